#pragma once

// Training loop: AdamW with decoupled weight decay, linear warmup into a
// cosine schedule, global-norm gradient clipping, seeded window sampling
// over a byte-level (or fixed-map) tokenized corpus, per-step JSONL metrics
// and route statistics, and periodic checkpoints.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmr/checkpoint.hpp"
#include "mmr/model.hpp"

namespace mmr {

enum class TokenizerKind { byte_level, fixed_vocab_map };

inline const char* to_string(TokenizerKind k) {
    return k == TokenizerKind::byte_level ? "byte" : "fixed_map";
}

inline TokenizerKind tokenizer_kind_from_string(const std::string& s) {
    if (s == "byte") return TokenizerKind::byte_level;
    if (s == "fixed_map") return TokenizerKind::fixed_vocab_map;
    throw std::invalid_argument("unknown tokenizer kind: " + s);
}

// Maps text to token ids. Byte-level mode is a bijection on bytes; the fixed
// map mode reads a JSON file {"tokens": ["a", "b", ...]} of single-byte
// strings whose index is the id.
class Tokenizer {
  public:
    static Tokenizer byte_level() {
        Tokenizer t;
        t.kind_ = TokenizerKind::byte_level;
        return t;
    }

    static Tokenizer fixed_map(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("tokenizer: cannot open vocab map " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("tokenizer: invalid vocab map JSON: " + std::string(e.what()));
        }
        Tokenizer t;
        t.kind_ = TokenizerKind::fixed_vocab_map;
        const auto tokens = j.at("tokens").get<std::vector<std::string>>();
        t.id_to_byte_.reserve(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i].size() != 1)
                throw std::runtime_error("tokenizer: vocab entries must be single bytes, got \"" +
                                         tokens[i] + "\"");
            const unsigned char b = static_cast<unsigned char>(tokens[i][0]);
            t.byte_to_id_[b] = static_cast<int>(i);
            t.id_to_byte_.push_back(b);
        }
        return t;
    }

    TokenizerKind kind() const { return kind_; }

    std::size_t vocab_size() const {
        return kind_ == TokenizerKind::byte_level ? 256 : id_to_byte_.size();
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char b : text) {
            if (kind_ == TokenizerKind::byte_level) {
                ids.push_back(static_cast<int>(b));
            } else {
                auto it = byte_to_id_.find(b);
                if (it == byte_to_id_.end())
                    throw std::out_of_range("encode: byte " + std::to_string(int(b)) +
                                            " not in vocab map");
                ids.push_back(it->second);
            }
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (kind_ == TokenizerKind::byte_level) {
                if (id < 0 || id > 255)
                    throw std::out_of_range("decode: token id " + std::to_string(id) +
                                            " outside byte range");
                out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
            } else {
                if (id < 0 || static_cast<std::size_t>(id) >= id_to_byte_.size())
                    throw std::out_of_range("decode: token id " + std::to_string(id) +
                                            " outside vocab map");
                out.push_back(static_cast<char>(id_to_byte_[static_cast<std::size_t>(id)]));
            }
        }
        return out;
    }

  private:
    TokenizerKind kind_ = TokenizerKind::byte_level;
    std::map<unsigned char, int> byte_to_id_;
    std::vector<unsigned char> id_to_byte_;
};

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_sequences = 8;
    std::size_t seq_len = 64;
    double lr_peak = 3e-4;
    double lr_floor = 1e-5;
    double warmup_fraction = 0.10;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    std::uint64_t seed = 1234;
    BalanceStrategy strategy = BalanceStrategy::bias_diff;
    double gamma = 1e-3;
    double alpha = 0.01;
    std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
    double val_fraction = 0.1;
    TokenizerKind tokenizer = TokenizerKind::byte_level;
    std::string vocab_map_path;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("train.steps must be >= 1");
        if (batch_sequences < 1) throw std::invalid_argument("train.batch_sequences must be >= 1");
        if (seq_len < 1) throw std::invalid_argument("train.seq_len must be >= 1");
        if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
            throw std::invalid_argument("train.warmup_fraction must lie in (0, 1)");
        if (clip_norm <= 0.0) throw std::invalid_argument("train.clip_norm must be > 0");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("train.val_fraction must lie in [0, 1)");
        if (tokenizer == TokenizerKind::fixed_vocab_map && vocab_map_path.empty())
            throw std::invalid_argument("train.vocab_map_path required for fixed_map tokenizer");
    }
};

// Linear warmup to lr_peak, then cosine decay to lr_floor at the final step.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.steps)
        throw std::invalid_argument("lr_at: step " + std::to_string(step) + " beyond " +
                                    std::to_string(cfg.steps));
    const double warmup = std::max(1.0, std::round(cfg.warmup_fraction * cfg.steps));
    const double s = static_cast<double>(step);
    if (s < warmup) return cfg.lr_peak * s / warmup;
    if (cfg.steps <= static_cast<std::size_t>(warmup)) return cfg.lr_peak;
    const double progress = (s - warmup) / (static_cast<double>(cfg.steps) - warmup);
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Scales all gradients so the global L2 norm does not exceed clip_norm;
// returns the factor applied.
template <class Real>
double clip_gradients(const std::vector<typename Model<Real>::NamedParam>& params,
                      double clip_norm) {
    double sq = 0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= clip_norm || norm == 0.0) return 1.0;
    const double factor = clip_norm / norm;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        auto t = p.tensor;
        for (auto& g : t.grad()) g = static_cast<Real>(g * factor);
    }
    return factor;
}

template <class Real>
struct AdamState {
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;

    template <class Params>
    static AdamState init(const Params& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.tensor.size(), Real(0));
            s.v.emplace_back(p.tensor.size(), Real(0));
        }
        return s;
    }
};

// Decoupled weight decay followed by bias-corrected Adam. step is 1-based.
template <class Real>
void adamw_step(const std::vector<typename Model<Real>::NamedParam>& params,
                AdamState<Real>& state, std::size_t step, double lr, const TrainConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto t = params[pi].tensor;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const bool has_grad = t.has_grad();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double g = has_grad ? static_cast<double>(t.grad()[i]) : 0.0;
            double theta = static_cast<double>(t.data()[i]);
            theta -= lr * cfg.weight_decay * theta;
            double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            theta -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            t.data()[i] = static_cast<Real>(theta);
        }
    }
}

// Tokenized text with a disjoint validation tail.
class Corpus {
  public:
    static Corpus from_text(const std::string& text, const Tokenizer& tok, double val_fraction) {
        Corpus c;
        c.tokens_ = tok.encode(text);
        const std::size_t val = static_cast<std::size_t>(
            std::floor(val_fraction * static_cast<double>(c.tokens_.size())));
        c.train_len_ = c.tokens_.size() - val;
        return c;
    }

    static Corpus from_file(const std::string& path, const Tokenizer& tok, double val_fraction) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("corpus: cannot open " + path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return from_text(text, tok, val_fraction);
    }

    std::size_t size() const { return tokens_.size(); }
    std::size_t train_size() const { return train_len_; }
    std::size_t val_size() const { return tokens_.size() - train_len_; }
    const std::vector<int>& tokens() const { return tokens_; }

    // contiguous window of seq_len + 1 tokens from the training slice
    std::vector<int> sample_window(std::size_t seq_len, std::mt19937& rng) const {
        if (train_len_ < seq_len + 1)
            throw std::runtime_error("corpus: training slice of " + std::to_string(train_len_) +
                                     " tokens is shorter than seq_len + 1 = " +
                                     std::to_string(seq_len + 1));
        std::uniform_int_distribution<std::size_t> start(0, train_len_ - seq_len - 1);
        const std::size_t s = start(rng);
        return std::vector<int>(tokens_.begin() + s, tokens_.begin() + s + seq_len + 1);
    }

    // deterministic validation windows
    std::vector<std::vector<int>> val_windows(std::size_t seq_len, std::size_t max_windows) const {
        std::vector<std::vector<int>> out;
        std::size_t s = train_len_;
        while (s + seq_len + 1 <= tokens_.size() && out.size() < max_windows) {
            out.emplace_back(tokens_.begin() + s, tokens_.begin() + s + seq_len + 1);
            s += seq_len;
        }
        return out;
    }

  private:
    std::vector<int> tokens_;
    std::size_t train_len_ = 0;
};

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
    std::vector<double> cv;  // per MoE layer
};

template <class Real>
class Trainer {
  public:
    Trainer(Model<Real>& model, TrainConfig cfg, const Corpus& corpus)
        : model_(model), cfg_(cfg), corpus_(corpus), sampler_(static_cast<std::uint32_t>(cfg.seed)) {
        cfg_.validate();
        adam_ = AdamState<Real>::init(model_.params());
        if (model_.config().ffn == FfnKind::moe) {
            for (std::size_t l = 0; l < model_.config().layers; ++l) {
                auto& rs = model_.router_state(l);
                rs.strategy = cfg_.strategy;
                rs.gamma = cfg_.gamma;
                rs.alpha = cfg_.alpha;
            }
        }
    }

    void set_metrics_stream(std::ostream* s) { metrics_ = s; }
    void set_route_stats_stream(std::ostream* s) { route_stats_ = s; }
    void set_checkpoint_path(const std::string& dir) { checkpoint_dir_ = dir; }

    // cumulative routed-slot counts per layer, for end-of-run balance checks
    const std::vector<std::vector<double>>& cumulative_loads() const { return cum_loads_; }
    std::size_t cumulative_load_steps() const { return cum_load_steps_; }
    void reset_cumulative_loads() {
        for (auto& l : cum_loads_) std::fill(l.begin(), l.end(), 0.0);
        cum_load_steps_ = 0;
    }

    StepMetrics train_step(std::size_t step) {
        model_.set_training(true);
        const auto& params = model_.params();
        for (const auto& p : params) {
            auto t = p.tensor;
            t.zero_grad();
        }

        const std::size_t layers = model_.config().layers;
        const bool is_moe = model_.config().ffn == FfnKind::moe;
        std::vector<std::vector<double>> batch_counts(
            is_moe ? layers : 0, std::vector<double>(is_moe ? model_.config().experts.routed() : 0));

        Tensor<Real> total;
        std::vector<Tensor<Real>> aux_terms;
        for (std::size_t b = 0; b < cfg_.batch_sequences; ++b) {
            auto window = corpus_.sample_window(cfg_.seq_len, sampler_);
            std::vector<int> inputs(window.begin(), window.end() - 1);
            std::vector<int> targets(window.begin() + 1, window.end());
            ForwardStats<Real> stats;
            auto logits = model_.forward(inputs, nullptr, &stats);
            auto loss = cross_entropy(logits, targets);
            total = total.defined() ? add(total, loss) : loss;
            for (auto& aux : stats.aux_losses) aux_terms.push_back(aux);
            if (is_moe) {
                for (std::size_t l = 0; l < layers; ++l)
                    for (std::size_t slot = 0; slot < stats.decisions[l].size(); ++slot)
                        batch_counts[l][stats.decisions[l][slot]] += 1.0;
            }
        }
        total = scale(total, Real(1.0 / static_cast<double>(cfg_.batch_sequences)));
        const double primary = total.item();
        if (cfg_.strategy == BalanceStrategy::aux_loss) {
            for (auto& aux : aux_terms)
                total = add(total, scale(aux, Real(1.0 / static_cast<double>(cfg_.batch_sequences))));
        }

        StepMetrics m;
        m.step = step;
        m.loss = primary;
        if (!std::isfinite(primary)) {
            emit_diagnostic(step, primary);
            throw std::runtime_error("train_step: non-finite loss at step " +
                                     std::to_string(step));
        }

        total.backward();
        m.grad_norm = global_grad_norm();
        clip_gradients<Real>(params, cfg_.clip_norm);
        m.lr = lr_at(step, cfg_);
        adamw_step<Real>(params, adam_, step + 1, m.lr, cfg_);

        if (is_moe) {
            const double slots = static_cast<double>(cfg_.batch_sequences) * cfg_.seq_len *
                                 model_.config().experts.top_k;
            if (cum_loads_.empty())
                cum_loads_.assign(layers, std::vector<double>(model_.config().experts.routed()));
            for (std::size_t l = 0; l < layers; ++l) {
                std::vector<double> loads(batch_counts[l].size());
                for (std::size_t e = 0; e < loads.size(); ++e) loads[e] = batch_counts[l][e] / slots;
                balancer_update(model_.router_state(l), loads);
                for (std::size_t e = 0; e < loads.size(); ++e) cum_loads_[l][e] += loads[e];
                m.cv.push_back(load_cv(loads));
                emit_route_stats(step, l, loads);
            }
            ++cum_load_steps_;
        }
        emit_metrics(m);
        model_.set_training(false);
        return m;
    }

    std::vector<StepMetrics> run() {
        std::vector<StepMetrics> history;
        history.reserve(cfg_.steps);
        for (std::size_t step = 0; step < cfg_.steps; ++step) {
            history.push_back(train_step(step));
            if (!checkpoint_dir_.empty() && cfg_.checkpoint_every > 0 &&
                (step + 1) % cfg_.checkpoint_every == 0)
                save_checkpoint(model_, checkpoint_dir_ + "/ckpt_step_" + std::to_string(step + 1) +
                                            ".mmr",
                                step + 1);
        }
        if (!checkpoint_dir_.empty())
            save_checkpoint(model_, checkpoint_dir_ + "/ckpt_final.mmr", cfg_.steps);
        return history;
    }

    double validation_loss(std::size_t max_windows = 16) {
        autograd::NoGradGuard ng;
        model_.set_training(false);
        auto windows = corpus_.val_windows(cfg_.seq_len, max_windows);
        if (windows.empty())
            throw std::runtime_error("validation_loss: validation slice has no full window");
        double acc = 0;
        for (const auto& w : windows) {
            std::vector<int> inputs(w.begin(), w.end() - 1);
            std::vector<int> targets(w.begin() + 1, w.end());
            acc += cross_entropy(model_.forward(inputs), targets).item();
        }
        return acc / static_cast<double>(windows.size());
    }

    double global_grad_norm() const {
        double sq = 0;
        for (const auto& p : model_.params()) {
            if (!p.tensor.has_grad()) continue;
            for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        return std::sqrt(sq);
    }

  private:
    void emit_metrics(const StepMetrics& m) {
        if (!metrics_) return;
        nlohmann::json j{{"step", m.step},
                         {"loss", m.loss},
                         {"lr", m.lr},
                         {"grad_norm", m.grad_norm},
                         {"cv", m.cv}};
        (*metrics_) << j.dump() << '\n';
    }

    void emit_diagnostic(std::size_t step, double loss) {
        if (!metrics_) return;
        nlohmann::json j{{"step", step}, {"error", "non-finite loss"}, {"loss_repr", std::to_string(loss)}};
        (*metrics_) << j.dump() << '\n';
    }

    void emit_route_stats(std::size_t step, std::size_t layer, const std::vector<double>& loads) {
        if (!route_stats_) return;
        const auto& rs = model_.router_state(layer);
        double bmin = 0, bmax = 0;
        if (!rs.bias.empty()) {
            bmin = static_cast<double>(*std::min_element(rs.bias.begin(), rs.bias.end()));
            bmax = static_cast<double>(*std::max_element(rs.bias.begin(), rs.bias.end()));
        }
        nlohmann::json j{{"step", step},
                         {"layer", layer},
                         {"loads", loads},
                         {"cv", load_cv(loads)},
                         {"bias_min", bmin},
                         {"bias_max", bmax}};
        (*route_stats_) << j.dump() << '\n';
    }

    Model<Real>& model_;
    TrainConfig cfg_;
    const Corpus& corpus_;
    std::mt19937 sampler_;
    AdamState<Real> adam_;
    std::ostream* metrics_ = nullptr;
    std::ostream* route_stats_ = nullptr;
    std::string checkpoint_dir_;
    std::vector<std::vector<double>> cum_loads_;
    std::size_t cum_load_steps_ = 0;
};

}  // namespace mmr
