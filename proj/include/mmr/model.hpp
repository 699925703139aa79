#pragma once

// Decoder-only language model: token embedding, pre-norm residual blocks
// (attention then FFN-or-MoE), final normalization and a tied unembedding.
// Attention is either standard multi-head or latent-compressed; the FFN is
// either dense or a fine-grained mixture of experts.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmr/attention.hpp"
#include "mmr/moe.hpp"
#include "mmr/rope.hpp"
#include "mmr/tensor.hpp"

namespace mmr {

enum class AttentionKind { mha, mla };
enum class FfnKind { dense, moe };

inline const char* to_string(AttentionKind k) { return k == AttentionKind::mha ? "mha" : "mla"; }
inline const char* to_string(FfnKind k) { return k == FfnKind::dense ? "dense" : "moe"; }

inline AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "mha") return AttentionKind::mha;
    if (s == "mla") return AttentionKind::mla;
    throw std::invalid_argument("unknown attention kind: " + s);
}

inline FfnKind ffn_kind_from_string(const std::string& s) {
    if (s == "dense") return FfnKind::dense;
    if (s == "moe") return FfnKind::moe;
    throw std::invalid_argument("unknown ffn kind: " + s);
}

struct ModelConfig {
    std::size_t vocab = 256;
    std::size_t d = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t latent = 0;  // r; 0 means d/2
    AttentionKind attention = AttentionKind::mla;
    FfnKind ffn = FfnKind::moe;
    ExpertConfig experts{.total = 64, .shared = 2, .top_k = 6, .hidden = 0};
    std::size_t d_ff = 0;  // dense FFN width; 0 means 4*d
    double dropout = 0.1;
    std::size_t max_seq = 256;
    double rope_base = 10000.0;
    bool rope_trainable = false;  // fixed frequencies; flag reserved, must stay off
    std::uint64_t seed = 42;

    std::size_t head_dim() const { return d / heads; }

    // resolves the width defaults: r = d/2, d_ff = 4d, expert hidden = d
    ModelConfig normalized() const {
        ModelConfig c = *this;
        if (c.latent == 0) c.latent = c.d / 2;
        if (c.d_ff == 0) c.d_ff = 4 * c.d;
        if (c.experts.hidden == 0) c.experts.hidden = c.d;
        return c;
    }

    double compression_ratio() const {
        const auto c = normalized();
        return static_cast<double>(c.latent) / static_cast<double>(c.d);
    }

    void validate() const {
        const auto c = normalized();
        if (c.vocab < 2) throw std::invalid_argument("model.vocab must be >= 2");
        if (c.layers < 1) throw std::invalid_argument("model.layers must be >= 1");
        if (c.heads < 1 || c.d % c.heads != 0)
            throw std::invalid_argument("model.d " + std::to_string(c.d) +
                                        " must be divisible by model.heads " +
                                        std::to_string(c.heads));
        if (c.head_dim() % 2 != 0)
            throw std::invalid_argument("model.d / model.heads must be even for rotary pairs");
        if (c.latent < 1 || c.latent > c.d)
            throw std::invalid_argument("model.latent " + std::to_string(c.latent) +
                                        " must lie in [1, " + std::to_string(c.d) + "]");
        if (c.dropout < 0.0 || c.dropout >= 1.0)
            throw std::invalid_argument("model.dropout must lie in [0, 1)");
        if (c.max_seq < 1) throw std::invalid_argument("model.max_seq must be >= 1");
        if (c.rope_trainable)
            throw std::invalid_argument(
                "model.rope_trainable: learnable frequencies are not supported; "
                "the rotation table is fixed");
        if (c.ffn == FfnKind::moe) c.experts.validate();
    }
};

inline void to_json(nlohmann::json& j, const ExpertConfig& e) {
    j = nlohmann::json{
        {"total", e.total}, {"shared", e.shared}, {"top_k", e.top_k}, {"hidden", e.hidden}};
}

inline void from_json(const nlohmann::json& j, ExpertConfig& e) {
    e.total = j.value("total", e.total);
    e.shared = j.value("shared", e.shared);
    e.top_k = j.value("top_k", e.top_k);
    e.hidden = j.value("hidden", e.hidden);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab", c.vocab},
                       {"d", c.d},
                       {"layers", c.layers},
                       {"heads", c.heads},
                       {"latent", c.latent},
                       {"attention", to_string(c.attention)},
                       {"ffn", to_string(c.ffn)},
                       {"experts", c.experts},
                       {"d_ff", c.d_ff},
                       {"dropout", c.dropout},
                       {"max_seq", c.max_seq},
                       {"rope_base", c.rope_base},
                       {"rope_trainable", c.rope_trainable},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.vocab = j.value("vocab", c.vocab);
    c.d = j.value("d", c.d);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.latent = j.value("latent", c.latent);
    if (j.contains("attention")) c.attention = attention_kind_from_string(j.at("attention"));
    if (j.contains("ffn")) c.ffn = ffn_kind_from_string(j.at("ffn"));
    if (j.contains("experts")) c.experts = j.at("experts").get<ExpertConfig>();
    c.d_ff = j.value("d_ff", c.d_ff);
    c.dropout = j.value("dropout", c.dropout);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.rope_trainable = j.value("rope_trainable", c.rope_trainable);
    c.seed = j.value("seed", c.seed);
}

struct ParamCounts {
    std::uint64_t total = 0;
    std::uint64_t active = 0;  // per-token: experts counted as shared + top_k of N
};

// Per-decode-session cache state; one owner per generation stream.
template <class Real>
struct InferenceSession {
    std::vector<LatentKVCache<Real>> mla;
    std::vector<FullKVCache<Real>> mha;

    std::size_t length() const {
        if (!mla.empty()) return mla[0].size();
        if (!mha.empty()) return mha[0].size();
        return 0;
    }
    void reset() {
        for (auto& c : mla) c.reset();
        for (auto& c : mha) c.reset();
    }
    std::uint64_t live_cache_bytes() const {
        std::uint64_t b = 0;
        for (const auto& c : mla) b += c.live_bytes();
        for (const auto& c : mha) b += c.live_bytes();
        return b;
    }
};

template <class Real>
struct BlockWeights {
    Tensor<Real> ln1_gain, ln1_offset, ln2_gain, ln2_offset;
    MlaLayerWeights<Real> mla;
    MhaLayerWeights<Real> mha;
    Tensor<Real> ffn_in, ffn_out;  // dense path
    ExpertWeights<Real> experts;   // moe path
    RouterState<Real> router;
};

struct SampleSpec {
    enum class Mode { greedy, temperature, top_p };
    Mode mode = Mode::greedy;
    double temperature = 1.0;
    double top_p = 0.9;
};

// Per-forward training byproducts: routing decisions per MoE layer, the
// auxiliary balance losses when that strategy is active, and the constant
// bias tensors (exposed so their grad-freeness can be asserted).
template <class Real>
struct ForwardStats {
    std::vector<std::vector<std::size_t>> decisions;
    std::vector<Tensor<Real>> aux_losses;
    std::vector<Tensor<Real>> bias_tensors;
};

template <class Real>
class Model {
  public:
    struct NamedParam {
        std::string name;
        Tensor<Real> tensor;
    };

    explicit Model(ModelConfig cfg) : cfg_(cfg.normalized()) {
        cfg_.validate();
        std::mt19937 rng(static_cast<std::uint32_t>(cfg_.seed));
        dropout_rng_.seed(static_cast<std::uint32_t>(cfg_.seed ^ 0x9E3779B9u));
        init_weights(rng);
        rope_ = RopeTable<Real>::create(cfg_.head_dim(), cfg_.max_seq, cfg_.rope_base);
        build_param_list();
    }

    const ModelConfig& config() const { return cfg_; }
    const RopeTable<Real>& rope() const { return rope_; }

    void set_training(bool t) { training_ = t; }
    bool training() const { return training_; }
    std::mt19937& dropout_rng() { return dropout_rng_; }

    std::vector<BlockWeights<Real>>& blocks() { return blocks_; }
    const std::vector<BlockWeights<Real>>& blocks() const { return blocks_; }
    Tensor<Real> embedding_table() { return embedding_; }

    RouterState<Real>& router_state(std::size_t layer) { return blocks_.at(layer).router; }

    InferenceSession<Real> make_session() const {
        InferenceSession<Real> s;
        if (cfg_.attention == AttentionKind::mla) {
            for (std::size_t i = 0; i < cfg_.layers; ++i)
                s.mla.emplace_back(cfg_.latent, cfg_.max_seq);
        } else {
            for (std::size_t i = 0; i < cfg_.layers; ++i)
                s.mha.emplace_back(cfg_.d, cfg_.max_seq);
        }
        return s;
    }

    // Pre-norm residual block: h = x + Attn(LN(x)); out = h + Ffn(LN(h)).
    Tensor<Real> block_forward(std::size_t layer, const Tensor<Real>& x,
                               InferenceSession<Real>* session, ForwardStats<Real>* stats = nullptr,
                               const std::vector<std::size_t>* frozen_routing = nullptr) {
        auto& blk = blocks_.at(layer);
        AttentionOptions<Real> opts;
        opts.dropout = cfg_.dropout;
        opts.rng = &dropout_rng_;
        opts.training = training_;

        InferenceSession<Real> ephemeral;
        InferenceSession<Real>* sess = session;
        if (!sess) {
            ephemeral = make_session();
            sess = &ephemeral;
        }

        auto a = layer_norm(x, blk.ln1_gain, blk.ln1_offset, Real(1e-5));
        Tensor<Real> attn;
        if (cfg_.attention == AttentionKind::mla)
            attn = mla_forward(a, blk.mla, sess->mla[layer], rope_, /*causal=*/true, opts);
        else
            attn = mha_forward(a, blk.mha, sess->mha[layer], rope_, /*causal=*/true, cfg_.heads,
                               opts);
        auto h = add(x, attn);

        auto b = layer_norm(h, blk.ln2_gain, blk.ln2_offset, Real(1e-5));
        Tensor<Real> f;
        if (cfg_.ffn == FfnKind::dense) {
            f = matmul(gelu(matmul(b, blk.ffn_in)), blk.ffn_out);
        } else {
            RoutingDecision<Real> dec =
                frozen_routing
                    ? route_with_fixed_selection(b, blk.router, blk.experts.w_g,
                                                 cfg_.experts.top_k, *frozen_routing)
                    : route(b, blk.router, blk.experts.w_g, cfg_.experts.top_k);
            f = moe_forward(b, blk.experts, cfg_.experts, dec);
            if (stats) {
                stats->decisions.push_back(dec.indices);
                stats->bias_tensors.push_back(dec.bias_in_graph);
                if (blk.router.strategy == BalanceStrategy::aux_loss) {
                    auto loads = compute_loads(dec.indices, b.rows(), cfg_.experts.top_k,
                                               cfg_.experts.routed());
                    stats->aux_losses.push_back(
                        aux_balance_loss(dec.probs, loads, blk.router.alpha));
                }
            }
        }
        f = dropout(f, cfg_.dropout, dropout_rng_, training_);
        return add(h, f);
    }

    // Next-token logits at every position.
    Tensor<Real> forward(const std::vector<int>& tokens, InferenceSession<Real>* session = nullptr,
                         ForwardStats<Real>* stats = nullptr,
                         const std::vector<std::vector<std::size_t>>* frozen_routing = nullptr) {
        const std::size_t n = tokens.size();
        const std::size_t held = session ? session->length() : 0;
        if (held + n > cfg_.max_seq)
            throw std::length_error("forward: sequence length " + std::to_string(held + n) +
                                    " exceeds max_seq " + std::to_string(cfg_.max_seq));
        InferenceSession<Real> ephemeral;
        if (!session) {
            ephemeral = make_session();
            session = &ephemeral;
        }
        auto x = embedding(embedding_, tokens);
        for (std::size_t i = 0; i < cfg_.layers; ++i)
            x = block_forward(i, x, session, stats,
                              frozen_routing ? &(*frozen_routing)[i] : nullptr);
        x = layer_norm(x, final_gain_, final_offset_, Real(1e-5));
        return matmul_nt(x, embedding_);  // tied unembedding
    }

    std::vector<int> generate(const std::vector<int>& prompt, std::size_t max_new,
                              const SampleSpec& spec, std::mt19937& rng, bool use_cache = true) {
        if (prompt.empty()) throw std::invalid_argument("generate: prompt must not be empty");
        if (prompt.size() + max_new > cfg_.max_seq)
            throw std::length_error("generate: prompt + max_new = " +
                                    std::to_string(prompt.size() + max_new) + " exceeds max_seq " +
                                    std::to_string(cfg_.max_seq));
        std::vector<int> out = prompt;
        if (max_new == 0) return out;

        autograd::NoGradGuard ng;
        const bool was_training = training_;
        training_ = false;

        if (use_cache) {
            auto session = make_session();
            auto logits = forward(prompt, &session);
            for (std::size_t s = 0; s < max_new; ++s) {
                const int tok = sample_row(logits, logits.rows() - 1, spec, rng);
                out.push_back(tok);
                if (s + 1 < max_new) logits = forward({tok}, &session);
            }
        } else {
            for (std::size_t s = 0; s < max_new; ++s) {
                auto logits = forward(out, nullptr);
                out.push_back(sample_row(logits, logits.rows() - 1, spec, rng));
            }
        }
        training_ = was_training;
        return out;
    }

    const std::vector<NamedParam>& params() const { return params_; }

    static ParamCounts param_counts(const ModelConfig& raw) {
        const auto c = raw.normalized();
        c.validate();
        const std::uint64_t d = c.d, r = c.latent;
        std::uint64_t attn = 0;
        if (c.attention == AttentionKind::mla)
            attn = d * d + 2 * d * r + 2 * r * d + d * d;  // q, kc+vc, per-head kr+vr, o
        else
            attn = 4 * d * d;
        std::uint64_t ffn = 0, inactive = 0;
        if (c.ffn == FfnKind::dense) {
            ffn = 2 * d * static_cast<std::uint64_t>(c.d_ff);
        } else {
            const std::uint64_t per_expert = 2 * d * static_cast<std::uint64_t>(c.experts.hidden);
            ffn = d * c.experts.routed() + c.experts.total * per_expert;
            inactive = (c.experts.routed() - c.experts.top_k) * per_expert;
        }
        const std::uint64_t per_layer = 4 * d + attn + ffn;  // two norms, affine pairs
        ParamCounts out;
        out.total = static_cast<std::uint64_t>(c.vocab) * d + c.layers * per_layer + 2 * d;
        out.active = out.total - c.layers * inactive;
        return out;
    }

  private:
    void init_weights(std::mt19937& rng) {
        const Real base_std = Real(0.02);
        // residual-branch output projections shrink with depth
        const Real out_std =
            static_cast<Real>(0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.layers)));
        embedding_ = Tensor<Real>::randn({cfg_.vocab, cfg_.d}, rng, base_std, true);
        const std::size_t d = cfg_.d, r = cfg_.latent, d_k = cfg_.head_dim();
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            BlockWeights<Real> blk;
            blk.ln1_gain = Tensor<Real>::full({d}, Real(1), true);
            blk.ln1_offset = Tensor<Real>::zeros({d}, true);
            if (cfg_.attention == AttentionKind::mla) {
                blk.mla.w_q = Tensor<Real>::randn({d, d}, rng, base_std, true);
                blk.mla.w_kc = Tensor<Real>::randn({d, r}, rng, base_std, true);
                blk.mla.w_vc = Tensor<Real>::randn({d, r}, rng, base_std, true);
                for (std::size_t h = 0; h < cfg_.heads; ++h) {
                    blk.mla.w_kr.push_back(Tensor<Real>::randn({r, d_k}, rng, base_std, true));
                    blk.mla.w_vr.push_back(Tensor<Real>::randn({r, d_k}, rng, base_std, true));
                }
                blk.mla.w_o = Tensor<Real>::randn({d, d}, rng, out_std, true);
            } else {
                blk.mha.w_q = Tensor<Real>::randn({d, d}, rng, base_std, true);
                blk.mha.w_k = Tensor<Real>::randn({d, d}, rng, base_std, true);
                blk.mha.w_v = Tensor<Real>::randn({d, d}, rng, base_std, true);
                blk.mha.w_o = Tensor<Real>::randn({d, d}, rng, out_std, true);
            }
            blk.ln2_gain = Tensor<Real>::full({d}, Real(1), true);
            blk.ln2_offset = Tensor<Real>::zeros({d}, true);
            if (cfg_.ffn == FfnKind::dense) {
                blk.ffn_in = Tensor<Real>::randn({d, cfg_.d_ff}, rng, base_std, true);
                blk.ffn_out = Tensor<Real>::randn({cfg_.d_ff, d}, rng, out_std, true);
            } else {
                blk.experts.w_g =
                    Tensor<Real>::randn({d, cfg_.experts.routed()}, rng, base_std, true);
                for (std::size_t e = 0; e < cfg_.experts.total; ++e) {
                    blk.experts.w_in.push_back(
                        Tensor<Real>::randn({d, cfg_.experts.hidden}, rng, base_std, true));
                    blk.experts.w_out.push_back(
                        Tensor<Real>::randn({cfg_.experts.hidden, d}, rng, out_std, true));
                }
                blk.router = RouterState<Real>::init(cfg_.experts.routed(),
                                                     BalanceStrategy::bias_diff, 1e-3, 0.01);
            }
            blocks_.push_back(std::move(blk));
        }
        final_gain_ = Tensor<Real>::full({d}, Real(1), true);
        final_offset_ = Tensor<Real>::zeros({d}, true);
    }

    void build_param_list() {
        params_.clear();
        params_.push_back({"embedding", embedding_});
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            auto& blk = blocks_[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            params_.push_back({p + "ln1.gain", blk.ln1_gain});
            params_.push_back({p + "ln1.offset", blk.ln1_offset});
            if (cfg_.attention == AttentionKind::mla) {
                params_.push_back({p + "attn.w_q", blk.mla.w_q});
                params_.push_back({p + "attn.w_kc", blk.mla.w_kc});
                params_.push_back({p + "attn.w_vc", blk.mla.w_vc});
                for (std::size_t h = 0; h < cfg_.heads; ++h) {
                    params_.push_back({p + "attn.w_kr." + std::to_string(h), blk.mla.w_kr[h]});
                    params_.push_back({p + "attn.w_vr." + std::to_string(h), blk.mla.w_vr[h]});
                }
                params_.push_back({p + "attn.w_o", blk.mla.w_o});
            } else {
                params_.push_back({p + "attn.w_q", blk.mha.w_q});
                params_.push_back({p + "attn.w_k", blk.mha.w_k});
                params_.push_back({p + "attn.w_v", blk.mha.w_v});
                params_.push_back({p + "attn.w_o", blk.mha.w_o});
            }
            params_.push_back({p + "ln2.gain", blk.ln2_gain});
            params_.push_back({p + "ln2.offset", blk.ln2_offset});
            if (cfg_.ffn == FfnKind::dense) {
                params_.push_back({p + "ffn.w_in", blk.ffn_in});
                params_.push_back({p + "ffn.w_out", blk.ffn_out});
            } else {
                params_.push_back({p + "moe.w_g", blk.experts.w_g});
                for (std::size_t e = 0; e < cfg_.experts.total; ++e) {
                    const std::string ep = p + "moe.expert." + std::to_string(e) + ".";
                    params_.push_back({ep + "w_in", blk.experts.w_in[e]});
                    params_.push_back({ep + "w_out", blk.experts.w_out[e]});
                }
            }
        }
        params_.push_back({"final_ln.gain", final_gain_});
        params_.push_back({"final_ln.offset", final_offset_});
    }

    int sample_row(const Tensor<Real>& logits, std::size_t row, const SampleSpec& spec,
                   std::mt19937& rng) const {
        const std::size_t v = logits.cols();
        const Real* lr = logits.data() + row * v;
        if (spec.mode == SampleSpec::Mode::greedy) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < v; ++c)
                if (lr[c] > lr[best]) best = c;
            return static_cast<int>(best);
        }
        const double tau = std::max(spec.temperature, 1e-9);
        std::vector<double> probs(v);
        double mx = lr[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(lr[c]));
        double denom = 0;
        for (std::size_t c = 0; c < v; ++c) {
            probs[c] = std::exp((static_cast<double>(lr[c]) - mx) / tau);
            denom += probs[c];
        }
        for (auto& p : probs) p /= denom;
        if (spec.mode == SampleSpec::Mode::top_p) {
            std::vector<std::size_t> order(v);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (probs[a] != probs[b]) return probs[a] > probs[b];
                return a < b;
            });
            double cum = 0;
            std::size_t cut = 0;
            while (cut < v) {
                cum += probs[order[cut]];
                ++cut;
                if (cum >= spec.top_p) break;
            }
            std::vector<double> kept(cut);
            for (std::size_t i = 0; i < cut; ++i) kept[i] = probs[order[i]] / cum;
            const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            double acc = 0;
            for (std::size_t i = 0; i < cut; ++i) {
                acc += kept[i];
                if (u <= acc) return static_cast<int>(order[i]);
            }
            return static_cast<int>(order[cut - 1]);
        }
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        double acc = 0;
        for (std::size_t c = 0; c < v; ++c) {
            acc += probs[c];
            if (u <= acc) return static_cast<int>(c);
        }
        return static_cast<int>(v - 1);
    }

    ModelConfig cfg_;
    Tensor<Real> embedding_;
    std::vector<BlockWeights<Real>> blocks_;
    Tensor<Real> final_gain_, final_offset_;
    RopeTable<Real> rope_;
    std::vector<NamedParam> params_;
    std::mt19937 dropout_rng_;
    bool training_ = false;
};

}  // namespace mmr
