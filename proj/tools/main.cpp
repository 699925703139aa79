// mmr: train, sample, and analyze small MoE-MLA language models.
//
// Subcommands:
//   train        run the training loop from a JSON run config
//   generate     decode from a checkpoint
//   analyze      print the complexity/memory report, optionally measured
//   route-stats  expert-utilization statistics on held-out data
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmr/mmr.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// sets a dotted path like "model.latent" in a JSON document
void set_json_path(nlohmann::json& j, const std::string& path, const nlohmann::json& value) {
    nlohmann::json* cur = &j;
    std::istringstream in(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(in, part, '.')) parts.push_back(part);
    if (parts.empty()) throw UsageError("sweep: empty key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
    (*cur)[parts.back()] = value;
}

nlohmann::json parse_json_literal(const std::string& s) {
    try {
        return nlohmann::json::parse(s);
    } catch (const nlohmann::json::exception&) {
        return nlohmann::json(s);  // plain string value
    }
}

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return out;
}

struct TrainOutcome {
    double final_loss = 0;
    double val_loss = 0;
    double final_cv_mean = 0;
    std::string checkpoint;
};

TrainOutcome run_training(const mmr::RunConfig& rc) {
    mmr::Tokenizer tok = rc.train.tokenizer == mmr::TokenizerKind::byte_level
                             ? mmr::Tokenizer::byte_level()
                             : mmr::Tokenizer::fixed_map(rc.train.vocab_map_path);
    if (tok.vocab_size() > rc.model.vocab)
        throw mmr::ConfigError("config: tokenizer vocab " + std::to_string(tok.vocab_size()) +
                               " exceeds model.vocab " + std::to_string(rc.model.vocab));
    auto corpus = mmr::Corpus::from_file(rc.paths.corpus, tok, rc.train.val_fraction);

    fs::create_directories(rc.paths.out_dir);
    std::ofstream metrics(fs::path(rc.paths.out_dir) / rc.paths.metrics_file,
                          std::ios::trunc);
    if (!metrics) throw std::runtime_error("train: cannot open metrics file in " + rc.paths.out_dir);
    std::ofstream route_stats(fs::path(rc.paths.out_dir) / "route_stats.jsonl", std::ios::trunc);

    mmr::Model<float> model(rc.model);
    mmr::Trainer<float> trainer(model, rc.train, corpus);
    trainer.set_metrics_stream(&metrics);
    trainer.set_route_stats_stream(&route_stats);
    trainer.set_checkpoint_path(rc.paths.out_dir);

    auto history = trainer.run();

    TrainOutcome out;
    out.final_loss = history.empty() ? 0.0 : history.back().loss;
    if (!history.empty() && !history.back().cv.empty()) {
        for (double c : history.back().cv) out.final_cv_mean += c;
        out.final_cv_mean /= static_cast<double>(history.back().cv.size());
    }
    out.val_loss = corpus.val_size() > rc.train.seq_len + 1 ? trainer.validation_loss() : 0.0;
    out.checkpoint = (fs::path(rc.paths.out_dir) / "ckpt_final.mmr").string();
    return out;
}

int cmd_train(const std::string& config_path, std::optional<std::size_t> steps_override,
              std::optional<std::uint64_t> seed_override, const std::string& sweep) {
    std::ifstream in(config_path);
    if (!in) throw mmr::ConfigError("config: cannot open " + config_path);
    nlohmann::json base;
    try {
        in >> base;
    } catch (const nlohmann::json::exception& e) {
        throw mmr::ConfigError("config: " + config_path + " is not valid JSON: " + e.what());
    }
    if (steps_override) set_json_path(base, "train.steps", *steps_override);
    if (seed_override) {
        set_json_path(base, "train.seed", *seed_override);
        set_json_path(base, "model.seed", *seed_override);
    }

    if (sweep.empty()) {
        auto rc = mmr::parse_run_config(base);
        auto out = run_training(rc);
        nlohmann::json summary{{"final_loss", out.final_loss},
                               {"val_loss", out.val_loss},
                               {"final_cv_mean", out.final_cv_mean},
                               {"checkpoint", out.checkpoint}};
        std::cout << summary.dump() << "\n";
        return 0;
    }

    const auto eq = sweep.find('=');
    if (eq == std::string::npos) throw UsageError("--sweep expects key=v1,v2,...");
    const std::string key = sweep.substr(0, eq);
    std::vector<std::string> values;
    std::istringstream vs(sweep.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) values.push_back(v);
    if (values.empty()) throw UsageError("--sweep expects at least one value");

    auto probe = mmr::parse_run_config(base);  // validate base before sweeping
    const std::string root_out = probe.paths.out_dir;
    std::ostringstream csv;
    csv << "key,value,final_loss,val_loss,final_cv_mean,params_total,params_active\n";
    for (const auto& val : values) {
        nlohmann::json doc = base;
        set_json_path(doc, key, parse_json_literal(val));
        set_json_path(doc, "paths.out_dir",
                      (fs::path(root_out) / ("sweep_" + sanitize(key) + "_" + sanitize(val)))
                          .string());
        auto rc = mmr::parse_run_config(doc);
        auto out = run_training(rc);
        auto pc = mmr::Model<float>::param_counts(rc.model);
        csv << key << "," << val << "," << out.final_loss << "," << out.val_loss << ","
            << out.final_cv_mean << "," << pc.total << "," << pc.active << "\n";
    }
    fs::create_directories(root_out);
    std::ofstream csv_file(fs::path(root_out) / "sweep_results.csv", std::ios::trunc);
    csv_file << csv.str();
    std::cout << csv.str();
    return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt, std::size_t max_new,
                 bool greedy, std::optional<double> temperature, std::optional<double> top_p,
                 std::uint64_t seed, bool no_cache, const std::string& vocab_map) {
    auto loaded = mmr::load_checkpoint<float>(ckpt);
    mmr::Tokenizer tok =
        vocab_map.empty() ? mmr::Tokenizer::byte_level() : mmr::Tokenizer::fixed_map(vocab_map);

    mmr::SampleSpec spec;
    if (temperature) {
        spec.mode = mmr::SampleSpec::Mode::temperature;
        spec.temperature = *temperature;
    }
    if (top_p) {
        spec.mode = mmr::SampleSpec::Mode::top_p;
        spec.top_p = *top_p;
        if (temperature) spec.temperature = *temperature;
    }
    if (greedy) spec.mode = mmr::SampleSpec::Mode::greedy;

    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    const auto tokens = tok.encode(prompt);
    const auto out = loaded.model.generate(tokens, max_new, spec, rng, !no_cache);
    std::cout << tok.decode(out) << "\n";
    return 0;
}

int cmd_analyze(const std::string& config_path, std::size_t seq_len, const std::string& format,
                bool measure, std::uint64_t batch, std::uint64_t bytes) {
    auto rc = mmr::load_run_config(config_path, /*require_corpus=*/false);
    auto report = mmr::complexity_report<float>(rc.model, seq_len, measure, bytes, batch);
    if (format == "json") {
        nlohmann::json j = report;
        std::cout << j.dump(2) << "\n";
    } else if (format == "csv") {
        std::cout << mmr::render_csv(report);
    } else {
        std::cout << mmr::render_table(report);
    }
    return 0;
}

int cmd_route_stats(const std::string& ckpt, const std::string& data_path, std::size_t max_tokens,
                    std::size_t seq_len) {
    auto loaded = mmr::load_checkpoint<float>(ckpt);
    auto& model = loaded.model;
    const auto& cfg = model.config();
    if (cfg.ffn != mmr::FfnKind::moe)
        throw std::runtime_error("route-stats: checkpoint has a dense FFN, nothing to route");

    auto tok = mmr::Tokenizer::byte_level();
    std::ifstream in(data_path, std::ios::binary);
    if (!in) throw std::runtime_error("route-stats: cannot open " + data_path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto tokens = tok.encode(text);
    if (tokens.size() > max_tokens)
        tokens.erase(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(max_tokens));
    seq_len = std::min(seq_len, cfg.max_seq);
    if (tokens.size() < seq_len)
        throw std::runtime_error("route-stats: data has fewer than seq-len tokens");

    const std::size_t layers = cfg.layers;
    const std::size_t n_routed = cfg.experts.routed();
    const std::size_t k = cfg.experts.top_k;
    std::vector<std::vector<std::uint64_t>> hist(layers, std::vector<std::uint64_t>(n_routed));
    std::vector<std::map<std::vector<std::size_t>, std::uint64_t>> combos(layers);

    mmr::autograd::NoGradGuard ng;
    model.set_training(false);
    std::size_t routed_tokens = 0;
    for (std::size_t s = 0; s + seq_len <= tokens.size(); s += seq_len) {
        std::vector<int> window(tokens.begin() + s, tokens.begin() + s + seq_len);
        mmr::ForwardStats<float> stats;
        model.forward(window, nullptr, &stats);
        routed_tokens += window.size();
        for (std::size_t l = 0; l < layers; ++l) {
            const auto& idx = stats.decisions[l];
            for (std::size_t i = 0; i < window.size(); ++i) {
                std::vector<std::size_t> combo(idx.begin() + i * k, idx.begin() + (i + 1) * k);
                std::sort(combo.begin(), combo.end());
                combos[l][combo] += 1;
                for (std::size_t j = 0; j < k; ++j) hist[l][idx[i * k + j]] += 1;
            }
        }
    }
    if (routed_tokens == 0) throw std::runtime_error("route-stats: no full window to route");

    nlohmann::json out;
    out["tokens_routed"] = routed_tokens;
    out["slots_per_layer"] = routed_tokens * k;
    out["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> loads(n_routed);
        const double slots = static_cast<double>(routed_tokens * k);
        for (std::size_t e = 0; e < n_routed; ++e)
            loads[e] = static_cast<double>(hist[l][e]) / slots;
        double entropy = 0;
        for (const auto& [combo, count] : combos[l]) {
            const double p = static_cast<double>(count) / static_cast<double>(routed_tokens);
            entropy -= p * std::log2(p);
        }
        const auto& rs = model.router_state(l);
        double bmin = 0, bmax = 0;
        if (!rs.bias.empty()) {
            bmin = *std::min_element(rs.bias.begin(), rs.bias.end());
            bmax = *std::max_element(rs.bias.begin(), rs.bias.end());
        }
        out["layers"].push_back({{"layer", l},
                                 {"histogram", hist[l]},
                                 {"loads", loads},
                                 {"cv", mmr::load_cv(loads)},
                                 {"combination_entropy_bits", entropy},
                                 {"distinct_combinations", combos[l].size()},
                                 {"bias_min", bmin},
                                 {"bias_max", bmax}});
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"small MoE-MLA language model lab"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "run the training loop");
    std::string train_config;
    std::optional<std::size_t> steps_override;
    std::optional<std::uint64_t> seed_override;
    std::string sweep;
    train->add_option("--config", train_config, "run config JSON")->required();
    train->add_option("--steps", steps_override, "override train.steps");
    train->add_option("--seed", seed_override, "override model and train seeds");
    train->add_option("--sweep", sweep, "key=v1,v2,... run one training per value");

    // generate
    auto* gen = app.add_subcommand("generate", "decode from a checkpoint");
    std::string gen_ckpt, gen_prompt = "Once upon a time", gen_vocab_map;
    std::size_t gen_max_new = 128;
    bool gen_greedy = false, gen_no_cache = false;
    std::optional<double> gen_temperature, gen_top_p;
    std::uint64_t gen_seed = 0;
    gen->add_option("--ckpt", gen_ckpt, "checkpoint path")->required();
    gen->add_option("--prompt", gen_prompt, "prompt text");
    gen->add_option("--max-new", gen_max_new, "tokens to generate");
    gen->add_flag("--greedy", gen_greedy, "deterministic argmax decoding");
    gen->add_option("--temperature", gen_temperature, "sampling temperature");
    gen->add_option("--top-p", gen_top_p, "nucleus sampling threshold");
    gen->add_option("--seed", gen_seed, "sampling seed");
    gen->add_flag("--no-cache", gen_no_cache, "recompute the full forward each step");
    gen->add_option("--vocab-map", gen_vocab_map, "fixed vocab map JSON");

    // analyze
    auto* ana = app.add_subcommand("analyze", "complexity and memory report");
    std::string ana_config, ana_format = "table";
    std::size_t ana_seq_len = 512;
    bool ana_measure = false;
    std::uint64_t ana_batch = 1, ana_bytes = 2;
    ana->add_option("--config", ana_config, "run config JSON")->required();
    ana->add_option("--seq-len", ana_seq_len, "sequence length n");
    ana->add_option("--format", ana_format, "json, table, or csv")
        ->check(CLI::IsMember({"json", "table", "csv"}));
    ana->add_flag("--measure", ana_measure, "also run one instrumented forward pass");
    ana->add_option("--batch", ana_batch, "batch multiplier for the byte model");
    ana->add_option("--bytes", ana_bytes, "accounting bytes per cache element")
        ->check(CLI::IsMember({1, 2, 4, 8}));

    // route-stats
    auto* rs = app.add_subcommand("route-stats", "expert utilization on held-out data");
    std::string rs_ckpt, rs_data;
    std::size_t rs_tokens = 4096, rs_seq_len = 64;
    rs->add_option("--ckpt", rs_ckpt, "checkpoint path")->required();
    rs->add_option("--data", rs_data, "text file to route")->required();
    rs->add_option("--tokens", rs_tokens, "max tokens from the file tail");
    rs->add_option("--seq-len", rs_seq_len, "window length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage errors exit 2
    }

    try {
        if (*train) return cmd_train(train_config, steps_override, seed_override, sweep);
        if (*gen)
            return cmd_generate(gen_ckpt, gen_prompt, gen_max_new, gen_greedy, gen_temperature,
                                gen_top_p, gen_seed, gen_no_cache, gen_vocab_map);
        if (*ana)
            return cmd_analyze(ana_config, ana_seq_len, ana_format, ana_measure, ana_batch,
                               ana_bytes);
        if (*rs) return cmd_route_stats(rs_ckpt, rs_data, rs_tokens, rs_seq_len);
    } catch (const mmr::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        // validation failures are caller errors, same class as bad flags
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
