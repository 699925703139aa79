#pragma once

// Multi-head latent attention: keys and values are projected once into a
// shared latent stream of width r, cached in that form, and reconstructed
// per head before rotary rotation and causal attention. A standard MHA path
// with a full-width cache serves as the baseline. Keys are reconstructed
// from the full cache on every call because rotation happens after the
// head-specific projection, which rules out attending in latent space.

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmr/rope.hpp"
#include "mmr/tensor.hpp"

namespace mmr {

template <class Real>
struct MlaLayerWeights {
    Tensor<Real> w_q;                  // [d x H*d_k]
    Tensor<Real> w_kc;                 // [d x r], shared across heads
    Tensor<Real> w_vc;                 // [d x r], shared across heads
    std::vector<Tensor<Real>> w_kr;    // per head [r x d_k]
    std::vector<Tensor<Real>> w_vr;    // per head [r x d_k]
    Tensor<Real> w_o;                  // [H*d_k x d]

    std::size_t heads() const { return w_kr.size(); }
    std::size_t model_dim() const { return w_q.rows(); }
    std::size_t latent_dim() const { return w_kc.cols(); }
    std::size_t head_dim() const { return w_kr.empty() ? 0 : w_kr[0].cols(); }
};

template <class Real>
struct MhaLayerWeights {
    Tensor<Real> w_q;  // [d x H*d_k]
    Tensor<Real> w_k;
    Tensor<Real> w_v;
    Tensor<Real> w_o;  // [H*d_k x d]
};

// Append-only value store for one layer's compressed K/V streams.
template <class Real>
class LatentKVCache {
  public:
    LatentKVCache() = default;
    LatentKVCache(std::size_t latent_dim, std::size_t capacity)
        : latent_dim_(latent_dim), capacity_(capacity) {
        ck_.reserve(latent_dim * capacity);
        cv_.reserve(latent_dim * capacity);
    }

    std::size_t size() const { return n_cached_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t latent_dim() const { return latent_dim_; }

    void append(const Real* ck_rows, const Real* cv_rows, std::size_t n) {
        if (n_cached_ + n > capacity_)
            throw std::length_error("kv cache overflow: " + std::to_string(n_cached_) + " + " +
                                    std::to_string(n) + " exceeds capacity " +
                                    std::to_string(capacity_));
        ck_.insert(ck_.end(), ck_rows, ck_rows + n * latent_dim_);
        cv_.insert(cv_.end(), cv_rows, cv_rows + n * latent_dim_);
        n_cached_ += n;
    }

    void reset() {
        ck_.clear();
        cv_.clear();
        n_cached_ = 0;
    }

    const std::vector<Real>& key_latents() const { return ck_; }
    const std::vector<Real>& value_latents() const { return cv_; }

    std::uint64_t live_bytes() const {
        return static_cast<std::uint64_t>(ck_.size() + cv_.size()) * sizeof(Real);
    }

  private:
    std::size_t latent_dim_ = 0;
    std::size_t capacity_ = 0;
    std::size_t n_cached_ = 0;
    std::vector<Real> ck_;
    std::vector<Real> cv_;
};

// Full-width K/V store for the MHA baseline; keys are kept post-rotation.
template <class Real>
class FullKVCache {
  public:
    FullKVCache() = default;
    FullKVCache(std::size_t width, std::size_t capacity) : width_(width), capacity_(capacity) {
        k_.reserve(width * capacity);
        v_.reserve(width * capacity);
    }

    std::size_t size() const { return n_cached_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t width() const { return width_; }

    void append(const Real* k_rows, const Real* v_rows, std::size_t n) {
        if (n_cached_ + n > capacity_)
            throw std::length_error("kv cache overflow: " + std::to_string(n_cached_) + " + " +
                                    std::to_string(n) + " exceeds capacity " +
                                    std::to_string(capacity_));
        k_.insert(k_.end(), k_rows, k_rows + n * width_);
        v_.insert(v_.end(), v_rows, v_rows + n * width_);
        n_cached_ += n;
    }

    void reset() {
        k_.clear();
        v_.clear();
        n_cached_ = 0;
    }

    const std::vector<Real>& keys() const { return k_; }
    const std::vector<Real>& values() const { return v_; }

    std::uint64_t live_bytes() const {
        return static_cast<std::uint64_t>(k_.size() + v_.size()) * sizeof(Real);
    }

  private:
    std::size_t width_ = 0;
    std::size_t capacity_ = 0;
    std::size_t n_cached_ = 0;
    std::vector<Real> k_;
    std::vector<Real> v_;
};

enum class CacheKind { mha, mla };

// Whole-model KV byte accounting. The analytic twin lives in the analysis
// module; this one must agree with live_bytes() of the actual structures.
inline std::uint64_t cache_bytes(CacheKind kind, std::uint64_t n, std::uint64_t layers,
                                 std::uint64_t heads, std::uint64_t head_dim, std::uint64_t latent,
                                 std::uint64_t bytes_per_elem, std::uint64_t batch = 1) {
    if (n == 0 || layers == 0 || heads == 0 || head_dim == 0 || bytes_per_elem == 0 || batch == 0)
        throw std::invalid_argument("cache_bytes: all arguments must be positive");
    switch (kind) {
        case CacheKind::mha:
            return 2ull * n * layers * heads * head_dim * bytes_per_elem * batch;
        case CacheKind::mla:
            if (latent == 0) throw std::invalid_argument("cache_bytes: latent width must be positive");
            return 2ull * n * layers * latent * bytes_per_elem * batch;
    }
    throw std::invalid_argument("cache_bytes: unknown cache kind");
}

// Softmax over the causally valid prefix of each score row; masked entries
// are exactly zero, so later tokens cannot perturb earlier outputs.
template <class Real>
Tensor<Real> masked_causal_softmax(const Tensor<Real>& scores,
                                   const std::vector<std::size_t>& query_positions) {
    const std::size_t n = scores.rows(), total = scores.cols();
    if (query_positions.size() != n)
        throw std::invalid_argument("masked_causal_softmax: positions/rows mismatch");
    std::vector<Real> out(n * total, Real(0));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t valid = query_positions[i] + 1;
        if (valid > total)
            throw std::invalid_argument("masked_causal_softmax: query position " +
                                        std::to_string(query_positions[i]) +
                                        " beyond key count " + std::to_string(total));
        const Real* row = scores.data() + i * total;
        Real mx = row[0];
        for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
        Real denom = 0;
        for (std::size_t j = 0; j < valid; ++j) {
            const Real e = std::exp(row[j] - mx);
            out[i * total + j] = e;
            denom += e;
        }
        const Real inv = Real(1) / denom;
        for (std::size_t j = 0; j < valid; ++j) out[i * total + j] *= inv;
    }
    return Tensor<Real>::make(
        scores.shape(), std::move(out), {scores},
        [n, total, query_positions](TensorNode<Real>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t valid = query_positions[i] + 1;
                Real dot = 0;
                for (std::size_t j = 0; j < valid; ++j)
                    dot += self.data[i * total + j] * self.grad[i * total + j];
                for (std::size_t j = 0; j < valid; ++j)
                    px.grad[i * total + j] +=
                        self.data[i * total + j] * (self.grad[i * total + j] - dot);
            }
        });
}

// Shared-latent projection; during decoding these rows (and only these) are
// appended to the cache.
template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> compress_kv(const Tensor<Real>& x,
                                                  const MlaLayerWeights<Real>& w) {
    return {matmul(x, w.w_kc), matmul(x, w.w_vc)};
}

template <class Real>
struct AttentionOptions {
    double dropout = 0.0;
    std::mt19937* rng = nullptr;
    bool training = false;
};

template <class Real>
Tensor<Real> mla_forward(const Tensor<Real>& x, const MlaLayerWeights<Real>& w,
                         LatentKVCache<Real>& cache, const RopeTable<Real>& rope, bool causal,
                         const AttentionOptions<Real>& opts = {}) {
    const std::size_t n_new = x.rows();
    const std::size_t d = w.model_dim();
    const std::size_t heads = w.heads();
    const std::size_t d_k = w.head_dim();
    const std::size_t r = w.latent_dim();
    if (x.cols() != d)
        throw std::invalid_argument("mla_forward: input width " + std::to_string(x.cols()) +
                                    " does not match model dim " + std::to_string(d));
    const std::size_t n_old = cache.size();
    if (n_old + n_new > cache.capacity())
        throw std::length_error("mla_forward: cache overflow at " + std::to_string(n_old + n_new) +
                                " of " + std::to_string(cache.capacity()));

    auto [ck_new, cv_new] = compress_kv(x, w);

    Tensor<Real> ck_full = ck_new, cv_full = cv_new;
    if (n_old > 0) {
        auto ck_old = Tensor<Real>::from_data({n_old, r}, cache.key_latents());
        auto cv_old = Tensor<Real>::from_data({n_old, r}, cache.value_latents());
        ck_full = concat_rows<Real>({ck_old, ck_new});
        cv_full = concat_rows<Real>({cv_old, cv_new});
    }
    cache.append(ck_new.data(), cv_new.data(), n_new);
    const std::size_t n_total = n_old + n_new;

    std::vector<std::size_t> q_pos(n_new), k_pos(n_total);
    for (std::size_t i = 0; i < n_new; ++i) q_pos[i] = n_old + i;
    for (std::size_t i = 0; i < n_total; ++i) k_pos[i] = i;

    auto q = matmul(x, w.w_q);
    const Real inv_sqrt_dk = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d_k)));

    std::vector<Tensor<Real>> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = rope_apply(slice_cols(q, h * d_k, d_k), q_pos, rope);
        auto kh = rope_apply(matmul(ck_full, w.w_kr[h]), k_pos, rope);
        auto vh = matmul(cv_full, w.w_vr[h]);
        auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
        auto probs = causal ? masked_causal_softmax(scores, q_pos) : softmax(scores, 1);
        if (opts.training && opts.dropout > 0.0 && opts.rng)
            probs = dropout(probs, opts.dropout, *opts.rng, true);
        head_outs.push_back(matmul(probs, vh));
    }
    return matmul(concat_cols(head_outs), w.w_o);
}

template <class Real>
Tensor<Real> mha_forward(const Tensor<Real>& x, const MhaLayerWeights<Real>& w,
                         FullKVCache<Real>& cache, const RopeTable<Real>& rope, bool causal,
                         std::size_t heads, const AttentionOptions<Real>& opts = {}) {
    const std::size_t n_new = x.rows();
    const std::size_t d = w.w_q.rows();
    const std::size_t width = w.w_q.cols();
    const std::size_t d_k = width / heads;
    if (x.cols() != d)
        throw std::invalid_argument("mha_forward: input width " + std::to_string(x.cols()) +
                                    " does not match model dim " + std::to_string(d));
    const std::size_t n_old = cache.size();
    if (n_old + n_new > cache.capacity())
        throw std::length_error("mha_forward: cache overflow at " + std::to_string(n_old + n_new) +
                                " of " + std::to_string(cache.capacity()));

    std::vector<std::size_t> q_pos(n_new);
    for (std::size_t i = 0; i < n_new; ++i) q_pos[i] = n_old + i;

    auto q = matmul(x, w.w_q);
    auto k_proj = matmul(x, w.w_k);
    auto v_new = matmul(x, w.w_v);

    // keys cached post-rotation; each row's position is fixed at append time
    std::vector<Tensor<Real>> k_rot_heads;
    k_rot_heads.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
        k_rot_heads.push_back(rope_apply(slice_cols(k_proj, h * d_k, d_k), q_pos, rope));
    auto k_new = concat_cols(k_rot_heads);

    Tensor<Real> k_full = k_new, v_full = v_new;
    if (n_old > 0) {
        auto k_old = Tensor<Real>::from_data({n_old, width}, cache.keys());
        auto v_old = Tensor<Real>::from_data({n_old, width}, cache.values());
        k_full = concat_rows<Real>({k_old, k_new});
        v_full = concat_rows<Real>({v_old, v_new});
    }
    cache.append(k_new.data(), v_new.data(), n_new);

    const Real inv_sqrt_dk = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d_k)));
    std::vector<Tensor<Real>> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = rope_apply(slice_cols(q, h * d_k, d_k), q_pos, rope);
        auto kh = slice_cols(k_full, h * d_k, d_k);
        auto vh = slice_cols(v_full, h * d_k, d_k);
        auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
        auto probs = causal ? masked_causal_softmax(scores, q_pos) : softmax(scores, 1);
        if (opts.training && opts.dropout > 0.0 && opts.rng)
            probs = dropout(probs, opts.dropout, *opts.rng, true);
        head_outs.push_back(matmul(probs, vh));
    }
    return matmul(concat_cols(head_outs), w.w_o);
}

}  // namespace mmr
