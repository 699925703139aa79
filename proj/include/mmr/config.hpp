#pragma once

// Run configuration: one self-describing JSON document with model, train
// and paths sections. Unknown keys are rejected by name; every field has a
// default except paths.corpus. Command-line flags override file values.

#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mmr/model.hpp"
#include "mmr/trainer.hpp"

namespace mmr {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunPaths {
    std::string corpus;        // required
    std::string out_dir;       // default: $MMR_OUT_DIR or "runs"
    std::string metrics_file = "metrics.jsonl";  // relative to out_dir
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    RunPaths paths;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& prefix) {
    if (!j.is_object()) throw ConfigError("config: section '" + prefix + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key))
            throw ConfigError("config: unknown key \"" + (prefix.empty() ? key : prefix + "." + key) +
                              "\"");
    }
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& prefix) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: bad value for \"" + prefix + "." + key + "\"");
    }
}

}  // namespace detail

inline ModelConfig parse_model_config(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"vocab", "d", "layers", "heads", "latent", "attention", "ffn",
                                 "experts", "d_ff", "dropout", "max_seq", "rope_base",
                                 "rope_trainable", "seed"},
                                "model");
    ModelConfig c;
    detail::read_field(j, "vocab", c.vocab, "model");
    detail::read_field(j, "d", c.d, "model");
    detail::read_field(j, "layers", c.layers, "model");
    detail::read_field(j, "heads", c.heads, "model");
    detail::read_field(j, "latent", c.latent, "model");
    if (j.contains("attention")) {
        try {
            c.attention = attention_kind_from_string(j.at("attention").get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: model.attention: ") + e.what());
        }
    }
    if (j.contains("ffn")) {
        try {
            c.ffn = ffn_kind_from_string(j.at("ffn").get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: model.ffn: ") + e.what());
        }
    }
    if (j.contains("experts")) {
        const auto& e = j.at("experts");
        detail::reject_unknown_keys(e, {"total", "shared", "top_k", "hidden"}, "model.experts");
        detail::read_field(e, "total", c.experts.total, "model.experts");
        detail::read_field(e, "shared", c.experts.shared, "model.experts");
        detail::read_field(e, "top_k", c.experts.top_k, "model.experts");
        detail::read_field(e, "hidden", c.experts.hidden, "model.experts");
    }
    detail::read_field(j, "d_ff", c.d_ff, "model");
    detail::read_field(j, "dropout", c.dropout, "model");
    detail::read_field(j, "max_seq", c.max_seq, "model");
    detail::read_field(j, "rope_base", c.rope_base, "model");
    detail::read_field(j, "rope_trainable", c.rope_trainable, "model");
    detail::read_field(j, "seed", c.seed, "model");
    return c;
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
    detail::reject_unknown_keys(
        j,
        {"steps", "batch_sequences", "seq_len", "lr_peak", "lr_floor", "warmup_fraction", "beta1",
         "beta2", "weight_decay", "adam_eps", "clip_norm", "seed", "balance", "checkpoint_every",
         "val_fraction", "tokenizer", "vocab_map_path"},
        "train");
    TrainConfig t;
    detail::read_field(j, "steps", t.steps, "train");
    detail::read_field(j, "batch_sequences", t.batch_sequences, "train");
    detail::read_field(j, "seq_len", t.seq_len, "train");
    detail::read_field(j, "lr_peak", t.lr_peak, "train");
    detail::read_field(j, "lr_floor", t.lr_floor, "train");
    detail::read_field(j, "warmup_fraction", t.warmup_fraction, "train");
    detail::read_field(j, "beta1", t.beta1, "train");
    detail::read_field(j, "beta2", t.beta2, "train");
    detail::read_field(j, "weight_decay", t.weight_decay, "train");
    detail::read_field(j, "adam_eps", t.adam_eps, "train");
    detail::read_field(j, "clip_norm", t.clip_norm, "train");
    detail::read_field(j, "seed", t.seed, "train");
    if (j.contains("balance")) {
        const auto& b = j.at("balance");
        detail::reject_unknown_keys(b, {"strategy", "gamma", "alpha"}, "train.balance");
        if (b.contains("strategy")) {
            try {
                t.strategy = balance_strategy_from_string(b.at("strategy").get<std::string>());
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config: train.balance.strategy: ") + e.what());
            }
        }
        detail::read_field(b, "gamma", t.gamma, "train.balance");
        detail::read_field(b, "alpha", t.alpha, "train.balance");
    }
    detail::read_field(j, "checkpoint_every", t.checkpoint_every, "train");
    detail::read_field(j, "val_fraction", t.val_fraction, "train");
    if (j.contains("tokenizer")) {
        try {
            t.tokenizer = tokenizer_kind_from_string(j.at("tokenizer").get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: train.tokenizer: ") + e.what());
        }
    }
    detail::read_field(j, "vocab_map_path", t.vocab_map_path, "train");
    return t;
}

inline RunConfig parse_run_config(const nlohmann::json& j, bool require_corpus = true) {
    detail::reject_unknown_keys(j, {"model", "train", "paths"}, "");
    RunConfig rc;
    if (j.contains("model")) rc.model = parse_model_config(j.at("model"));
    if (j.contains("train")) rc.train = parse_train_config(j.at("train"));

    const char* env_out = std::getenv("MMR_OUT_DIR");
    rc.paths.out_dir = env_out ? env_out : "runs";
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::reject_unknown_keys(p, {"corpus", "out_dir", "metrics_file"}, "paths");
        detail::read_field(p, "corpus", rc.paths.corpus, "paths");
        detail::read_field(p, "out_dir", rc.paths.out_dir, "paths");
        detail::read_field(p, "metrics_file", rc.paths.metrics_file, "paths");
    }
    if (require_corpus && rc.paths.corpus.empty())
        throw ConfigError("config: missing required \"paths.corpus\"");

    try {
        rc.model.validate();
        rc.train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return rc;
}

inline RunConfig load_run_config(const std::string& path, bool require_corpus = true) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j, require_corpus);
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
    nlohmann::json j;
    j["model"] = rc.model;
    j["train"] = {{"steps", rc.train.steps},
                  {"batch_sequences", rc.train.batch_sequences},
                  {"seq_len", rc.train.seq_len},
                  {"lr_peak", rc.train.lr_peak},
                  {"lr_floor", rc.train.lr_floor},
                  {"warmup_fraction", rc.train.warmup_fraction},
                  {"beta1", rc.train.beta1},
                  {"beta2", rc.train.beta2},
                  {"weight_decay", rc.train.weight_decay},
                  {"adam_eps", rc.train.adam_eps},
                  {"clip_norm", rc.train.clip_norm},
                  {"seed", rc.train.seed},
                  {"balance",
                   {{"strategy", to_string(rc.train.strategy)},
                    {"gamma", rc.train.gamma},
                    {"alpha", rc.train.alpha}}},
                  {"checkpoint_every", rc.train.checkpoint_every},
                  {"val_fraction", rc.train.val_fraction},
                  {"tokenizer", to_string(rc.train.tokenizer)},
                  {"vocab_map_path", rc.train.vocab_map_path}};
    j["paths"] = {{"corpus", rc.paths.corpus},
                  {"out_dir", rc.paths.out_dir},
                  {"metrics_file", rc.paths.metrics_file}};
    return j;
}

}  // namespace mmr
