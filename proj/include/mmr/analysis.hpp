#pragma once

// Closed-form per-layer cost and memory models, and their reconciliation
// against the instrumented FLOP counter and live cache structures of the
// running implementation.
//
// Two MLA cost conventions are reported side by side:
//   * as_stated: 2nd^2(1+rho) + 2n^2*d*rho, a compressed-space attention
//     count in multiply-accumulate units. It presumes scores are formed in
//     latent space, which rotating keys after per-head reconstruction rules
//     out, so the running code can never reproduce it.
//   * as_implemented: the exact forward matmul count of the reconstruct-
//     then-rotate pipeline at 2 FLOPs per MAC: 4nd^2 (q and output
//     projections) + 8ndr (compress + reconstruct k,v) + 4n^2*d (scores and
//     value mixing). This is the reconciliation target and must match the
//     counter with integer equality.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmr/attention.hpp"
#include "mmr/model.hpp"

namespace mmr {

// Per-layer attention cost, textbook MAC count: four projections plus
// scores and value mixing.
inline std::uint64_t flops_mha(std::uint64_t n, std::uint64_t d) {
    if (n == 0 || d == 0) throw std::invalid_argument("flops_mha: n and d must be positive");
    return 4 * n * d * d + 2 * n * n * d;
}

enum class MlaCostMode { as_stated, as_implemented };

// Latent-attention per-layer cost. r is the latent width (rho = r/d).
inline std::uint64_t flops_mla(std::uint64_t n, std::uint64_t d, std::uint64_t r,
                               MlaCostMode mode) {
    if (n == 0 || d == 0 || r == 0 || r > d)
        throw std::invalid_argument("flops_mla: need n, d > 0 and 0 < r <= d");
    switch (mode) {
        case MlaCostMode::as_stated:
            return 2 * n * d * d + 2 * n * d * r + 2 * n * n * r;
        case MlaCostMode::as_implemented:
            return 4 * n * d * d + 8 * n * d * r + 4 * n * n * d;
    }
    throw std::invalid_argument("flops_mla: unknown mode");
}

// MHA pipeline in counter units (2 FLOPs per MAC): q,k,v,o projections plus
// scores and value mixing.
inline std::uint64_t flops_mha_implemented(std::uint64_t n, std::uint64_t d) {
    return 8 * n * d * d + 4 * n * n * d;
}

// Dense FFN in counter units: in and out projections.
inline std::uint64_t flops_dense_ffn(std::uint64_t n, std::uint64_t d, std::uint64_t d_ff) {
    return 4 * n * d * d_ff;
}

struct MoeCost {
    std::uint64_t routing = 0;         // per token
    std::uint64_t active_experts = 0;  // per token
    std::uint64_t shared_experts = 0;  // per token

    std::uint64_t per_token_total() const { return routing + active_experts + shared_experts; }
};

// Per-token MoE cost at the implemented widths, counter units. The routing
// term is the router matmul; each expert costs 4*d*hidden.
inline MoeCost cost_moe(std::uint64_t d, std::uint64_t total, std::uint64_t shared,
                        std::uint64_t top_k, std::uint64_t hidden) {
    if (shared > total || top_k > total - shared)
        throw std::invalid_argument("cost_moe: invalid expert configuration");
    if (hidden == 0) hidden = d;
    MoeCost c;
    c.routing = 2 * d * (total - shared);
    c.active_experts = top_k * 4 * d * hidden;
    c.shared_experts = shared * 4 * d * hidden;
    return c;
}

// Asymptotic speedup factor (1/rho) * N / (k + N_s).
inline double speedup_asymptotic(double rho, std::uint64_t total, std::uint64_t shared,
                                 std::uint64_t top_k) {
    if (rho <= 0.0 || rho > 1.0) throw std::invalid_argument("speedup_asymptotic: rho in (0, 1]");
    if (top_k + shared == 0)
        throw std::invalid_argument("speedup_asymptotic: k + N_s must be positive");
    return (1.0 / rho) * static_cast<double>(total) / static_cast<double>(top_k + shared);
}

enum class KvVariant { per_head, shared };

// byte-model element widths follow the supported storage widths
inline void check_accounting_bytes(std::uint64_t bytes) {
    if (bytes != 1 && bytes != 2 && bytes != 4 && bytes != 8)
        throw std::invalid_argument("accounting bytes per element must be 1, 2, 4, or 8, got " +
                                    std::to_string(bytes));
}

// KV-cache byte model. The shared variant is what the implementation caches
// (one latent pair per layer); the per-head variant scales the latent by H
// and is reported for comparison.
inline std::uint64_t kv_cache_model(std::uint64_t n, std::uint64_t layers, std::uint64_t heads,
                                    std::uint64_t head_dim, std::uint64_t latent,
                                    std::uint64_t bytes, KvVariant variant,
                                    std::uint64_t batch = 1) {
    if (n == 0 || layers == 0 || heads == 0 || head_dim == 0 || latent == 0 || batch == 0)
        throw std::invalid_argument("kv_cache_model: all arguments must be positive");
    check_accounting_bytes(bytes);
    switch (variant) {
        case KvVariant::per_head:
            return 2ull * n * layers * heads * latent * bytes * batch;
        case KvVariant::shared:
            return 2ull * n * layers * latent * bytes * batch;
    }
    throw std::invalid_argument("kv_cache_model: unknown variant");
}

inline std::uint64_t kv_cache_baseline(std::uint64_t n, std::uint64_t layers, std::uint64_t heads,
                                       std::uint64_t head_dim, std::uint64_t bytes,
                                       std::uint64_t batch = 1) {
    return 2ull * n * layers * heads * head_dim * bytes * batch;
}

struct ComplexityReport {
    // inputs
    std::uint64_t n = 0;
    std::uint64_t batch = 1;
    ModelConfig config;
    std::uint64_t accounting_bytes = 2;

    // analytic
    std::uint64_t c_mha = 0;                 // textbook MAC form
    std::uint64_t c_mla_as_stated = 0;       // compressed-space MAC form
    std::uint64_t c_mla_as_implemented = 0;  // counter units
    std::uint64_t c_attention_layer = 0;     // counter units, per configured kind
    std::uint64_t c_ffn_layer = 0;           // counter units
    MoeCost moe_per_token;
    std::uint64_t c_unembedding = 0;   // counter units
    std::uint64_t c_combined = 0;      // counter units, full forward
    double speedup_factor = 0;
    std::uint64_t kv_bytes_per_head = 0;
    std::uint64_t kv_bytes_shared = 0;
    std::uint64_t kv_bytes_baseline = 0;
    double reduction_factor = 0;

    // measured (filled when a live pass runs)
    bool measured = false;
    std::uint64_t flops_forward = 0;
    std::uint64_t kv_bytes_live = 0;
    std::uint64_t live_elem_bytes = 0;
    std::uint64_t kv_bytes_shared_live_model = 0;  // shared model at live width
    std::int64_t delta_flops = 0;
    std::int64_t delta_kv_bytes = 0;
};

inline void to_json(nlohmann::json& j, const MoeCost& c) {
    j = nlohmann::json{{"routing", c.routing},
                       {"active_experts", c.active_experts},
                       {"shared_experts", c.shared_experts}};
}

inline void from_json(const nlohmann::json& j, MoeCost& c) {
    c.routing = j.value("routing", 0ull);
    c.active_experts = j.value("active_experts", 0ull);
    c.shared_experts = j.value("shared_experts", 0ull);
}

inline void to_json(nlohmann::json& j, const ComplexityReport& r) {
    j = nlohmann::json{{"inputs",
                        {{"n", r.n},
                         {"batch", r.batch},
                         {"config", r.config},
                         {"accounting_bytes", r.accounting_bytes}}},
                       {"analytic",
                        {{"c_mha", r.c_mha},
                         {"c_mla_as_stated", r.c_mla_as_stated},
                         {"c_mla_as_implemented", r.c_mla_as_implemented},
                         {"c_attention_layer", r.c_attention_layer},
                         {"c_ffn_layer", r.c_ffn_layer},
                         {"moe_per_token", r.moe_per_token},
                         {"c_unembedding", r.c_unembedding},
                         {"c_combined", r.c_combined},
                         {"speedup_factor", r.speedup_factor},
                         {"kv_bytes_per_head", r.kv_bytes_per_head},
                         {"kv_bytes_shared", r.kv_bytes_shared},
                         {"kv_bytes_baseline", r.kv_bytes_baseline},
                         {"reduction_factor", r.reduction_factor}}},
                       {"measured",
                        {{"present", r.measured},
                         {"flops_forward", r.flops_forward},
                         {"kv_bytes_live", r.kv_bytes_live},
                         {"live_elem_bytes", r.live_elem_bytes},
                         {"kv_bytes_shared_live_model", r.kv_bytes_shared_live_model},
                         {"delta_flops", r.delta_flops},
                         {"delta_kv_bytes", r.delta_kv_bytes}}}};
}

inline void from_json(const nlohmann::json& j, ComplexityReport& r) {
    const auto& in = j.at("inputs");
    r.n = in.at("n");
    r.batch = in.at("batch");
    r.config = in.at("config").get<ModelConfig>();
    r.accounting_bytes = in.at("accounting_bytes");
    const auto& a = j.at("analytic");
    r.c_mha = a.at("c_mha");
    r.c_mla_as_stated = a.at("c_mla_as_stated");
    r.c_mla_as_implemented = a.at("c_mla_as_implemented");
    r.c_attention_layer = a.at("c_attention_layer");
    r.c_ffn_layer = a.at("c_ffn_layer");
    r.moe_per_token = a.at("moe_per_token").get<MoeCost>();
    r.c_unembedding = a.at("c_unembedding");
    r.c_combined = a.at("c_combined");
    r.speedup_factor = a.at("speedup_factor");
    r.kv_bytes_per_head = a.at("kv_bytes_per_head");
    r.kv_bytes_shared = a.at("kv_bytes_shared");
    r.kv_bytes_baseline = a.at("kv_bytes_baseline");
    r.reduction_factor = a.at("reduction_factor");
    const auto& m = j.at("measured");
    r.measured = m.at("present");
    r.flops_forward = m.at("flops_forward");
    r.kv_bytes_live = m.at("kv_bytes_live");
    r.live_elem_bytes = m.at("live_elem_bytes");
    r.kv_bytes_shared_live_model = m.at("kv_bytes_shared_live_model");
    r.delta_flops = m.at("delta_flops");
    r.delta_kv_bytes = m.at("delta_kv_bytes");
}

// Expected forward matmul count for one full forward pass of the configured
// model at sequence length n, in counter units.
inline std::uint64_t expected_forward_flops(const ModelConfig& raw, std::uint64_t n) {
    const auto cfg = raw.normalized();
    const std::uint64_t d = cfg.d;
    std::uint64_t attn = cfg.attention == AttentionKind::mla
                             ? flops_mla(n, d, cfg.latent, MlaCostMode::as_implemented)
                             : flops_mha_implemented(n, d);
    std::uint64_t ffn = 0;
    if (cfg.ffn == FfnKind::dense) {
        ffn = flops_dense_ffn(n, d, cfg.d_ff);
    } else {
        ffn = n * cost_moe(d, cfg.experts.total, cfg.experts.shared, cfg.experts.top_k,
                           cfg.experts.hidden)
                      .per_token_total();
    }
    const std::uint64_t unembed = 2 * n * d * static_cast<std::uint64_t>(cfg.vocab);
    return cfg.layers * (attn + ffn) + unembed;
}

// Full analytic report; optionally reconciles against one instrumented
// forward pass and a cache-filling decode of length n.
template <class Real = float>
ComplexityReport complexity_report(const ModelConfig& raw, std::uint64_t n, bool measure,
                                   std::uint64_t accounting_bytes = 2, std::uint64_t batch = 1) {
    const auto cfg = raw.normalized();
    cfg.validate();
    if (n == 0) throw std::invalid_argument("complexity_report: n must be positive");
    if (n > cfg.max_seq)
        throw std::invalid_argument("complexity_report: n exceeds model max_seq");

    check_accounting_bytes(accounting_bytes);
    ComplexityReport r;
    r.n = n;
    r.batch = batch;
    r.config = cfg;
    r.accounting_bytes = accounting_bytes;

    const std::uint64_t d = cfg.d;
    r.c_mha = flops_mha(n, d);
    r.c_mla_as_stated = flops_mla(n, d, cfg.latent, MlaCostMode::as_stated);
    r.c_mla_as_implemented = flops_mla(n, d, cfg.latent, MlaCostMode::as_implemented);
    r.c_attention_layer = cfg.attention == AttentionKind::mla ? r.c_mla_as_implemented
                                                              : flops_mha_implemented(n, d);
    if (cfg.ffn == FfnKind::dense) {
        r.c_ffn_layer = flops_dense_ffn(n, d, cfg.d_ff);
    } else {
        r.moe_per_token = cost_moe(d, cfg.experts.total, cfg.experts.shared, cfg.experts.top_k,
                                   cfg.experts.hidden);
        r.c_ffn_layer = n * r.moe_per_token.per_token_total();
    }
    r.c_unembedding = 2 * n * d * static_cast<std::uint64_t>(cfg.vocab);
    r.c_combined = expected_forward_flops(cfg, n);
    r.speedup_factor = speedup_asymptotic(cfg.compression_ratio(), cfg.experts.total,
                                          cfg.experts.shared, cfg.experts.top_k);
    r.kv_bytes_per_head = kv_cache_model(n, cfg.layers, cfg.heads, cfg.head_dim(), cfg.latent,
                                        accounting_bytes, KvVariant::per_head, batch);
    r.kv_bytes_shared = kv_cache_model(n, cfg.layers, cfg.heads, cfg.head_dim(), cfg.latent,
                                       accounting_bytes, KvVariant::shared, batch);
    r.kv_bytes_baseline =
        kv_cache_baseline(n, cfg.layers, cfg.heads, cfg.head_dim(), accounting_bytes, batch);
    r.reduction_factor = 1.0 - static_cast<double>(r.kv_bytes_shared) /
                                   static_cast<double>(r.kv_bytes_baseline);

    if (measure) {
        Model<Real> model(cfg);
        autograd::NoGradGuard ng;
        std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed) + 1);
        std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab) - 1);
        std::vector<int> tokens(n);
        for (auto& t : tokens) t = tok(rng);

        flops::reset();
        model.forward(tokens);
        r.flops_forward = flops::count();

        auto session = model.make_session();
        model.forward(tokens, &session);
        r.kv_bytes_live = session.live_cache_bytes();
        r.live_elem_bytes = sizeof(Real);
        r.kv_bytes_shared_live_model =
            cfg.attention == AttentionKind::mla
                ? kv_cache_model(n, cfg.layers, cfg.heads, cfg.head_dim(), cfg.latent,
                                 sizeof(Real), KvVariant::shared)
                : kv_cache_baseline(n, cfg.layers, cfg.heads, cfg.head_dim(), sizeof(Real));
        r.delta_flops = static_cast<std::int64_t>(r.flops_forward) -
                        static_cast<std::int64_t>(r.c_combined);
        r.delta_kv_bytes = static_cast<std::int64_t>(r.kv_bytes_live) -
                           static_cast<std::int64_t>(r.kv_bytes_shared_live_model);
        r.measured = true;
    }
    return r;
}

namespace detail {

inline std::string mb_string(std::uint64_t bytes) {
    std::ostringstream os;
    if (bytes % (1024ull * 1024ull) == 0) {
        os << bytes / (1024ull * 1024ull);
    } else {
        os << std::fixed << std::setprecision(2)
           << static_cast<double>(bytes) / (1024.0 * 1024.0);
    }
    return os.str();
}

}  // namespace detail

inline std::string render_table(const ComplexityReport& r) {
    std::ostringstream os;
    auto row = [&os](const std::string& k, const std::string& v) {
        os << "  " << std::left << std::setw(34) << k << std::right << std::setw(24) << v << "\n";
    };
    os << "complexity report (n=" << r.n << ", batch=" << r.batch << ", d=" << r.config.d
       << ", L=" << r.config.layers << ", H=" << r.config.heads << ", r=" << r.config.latent
       << ")\n";
    os << "analytic\n";
    row("mha cost (mac form)", std::to_string(r.c_mha));
    row("mla cost (as stated)", std::to_string(r.c_mla_as_stated));
    row("mla cost (as implemented)", std::to_string(r.c_mla_as_implemented));
    row("attention layer flops", std::to_string(r.c_attention_layer));
    row("ffn/moe layer flops", std::to_string(r.c_ffn_layer));
    row("unembedding flops", std::to_string(r.c_unembedding));
    row("combined forward flops", std::to_string(r.c_combined));
    {
        std::ostringstream sv;
        sv << std::fixed << std::setprecision(4) << r.speedup_factor;
        row("asymptotic speedup", sv.str());
    }
    row("kv bytes baseline", std::to_string(r.kv_bytes_baseline) + " (" +
                                 detail::mb_string(r.kv_bytes_baseline) + " MB)");
    row("kv bytes shared", std::to_string(r.kv_bytes_shared) + " (" +
                               detail::mb_string(r.kv_bytes_shared) + " MB)");
    row("kv bytes per-head form", std::to_string(r.kv_bytes_per_head) + " (" +
                                      detail::mb_string(r.kv_bytes_per_head) + " MB)");
    {
        std::ostringstream rv;
        rv << std::fixed << std::setprecision(4) << r.reduction_factor;
        row("reduction factor", rv.str());
    }
    if (r.measured) {
        os << "measured\n";
        row("forward flops", std::to_string(r.flops_forward));
        row("delta vs combined", std::to_string(r.delta_flops));
        row("live cache bytes", std::to_string(r.kv_bytes_live));
        row("delta vs shared model", std::to_string(r.delta_kv_bytes));
    }
    return os.str();
}

inline std::string render_csv(const ComplexityReport& r) {
    std::ostringstream os;
    os << "key,value\n";
    os << "n," << r.n << "\nbatch," << r.batch << "\nd," << r.config.d << "\nlayers,"
       << r.config.layers << "\nheads," << r.config.heads << "\nlatent," << r.config.latent
       << "\n";
    os << "c_mha," << r.c_mha << "\nc_mla_as_stated," << r.c_mla_as_stated
       << "\nc_mla_as_implemented," << r.c_mla_as_implemented << "\n";
    os << "c_attention_layer," << r.c_attention_layer << "\nc_ffn_layer," << r.c_ffn_layer
       << "\nc_unembedding," << r.c_unembedding << "\nc_combined," << r.c_combined << "\n";
    os << "speedup_factor," << r.speedup_factor << "\n";
    os << "kv_bytes_baseline," << r.kv_bytes_baseline << "\nkv_bytes_shared," << r.kv_bytes_shared
       << "\nkv_bytes_per_head," << r.kv_bytes_per_head << "\nreduction_factor,"
       << r.reduction_factor << "\n";
    if (r.measured) {
        os << "flops_forward," << r.flops_forward << "\ndelta_flops," << r.delta_flops << "\n";
        os << "kv_bytes_live," << r.kv_bytes_live << "\ndelta_kv_bytes," << r.delta_kv_bytes
           << "\n";
    }
    return os.str();
}

}  // namespace mmr
