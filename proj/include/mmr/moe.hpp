#pragma once

// Fine-grained mixture of experts: a few always-active shared experts plus
// sparse top-k routing over the remaining ones. Load balancing is selectable:
// an auxiliary loss, or one of two gradient-free bias updates applied to the
// routing logits between steps. The bias lives outside the autograd graph and
// never receives gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmr/tensor.hpp"

namespace mmr {

struct ExpertConfig {
    std::size_t total = 64;    // N
    std::size_t shared = 2;    // N_s, always active
    std::size_t top_k = 6;     // active routed experts per token
    std::size_t hidden = 0;    // inner width per expert; 0 = use model dim

    std::size_t routed() const { return total - shared; }

    void validate() const {
        if (shared > total)
            throw std::invalid_argument("experts.shared " + std::to_string(shared) +
                                        " exceeds experts.total " + std::to_string(total));
        if (top_k < 1 || top_k > routed())
            throw std::invalid_argument("experts.top_k " + std::to_string(top_k) +
                                        " must be in [1, " + std::to_string(routed()) + "]");
    }
};

enum class BalanceStrategy { none, bias_diff, bias_ratio, aux_loss };

inline const char* to_string(BalanceStrategy s) {
    switch (s) {
        case BalanceStrategy::none: return "none";
        case BalanceStrategy::bias_diff: return "bias_diff";
        case BalanceStrategy::bias_ratio: return "bias_ratio";
        case BalanceStrategy::aux_loss: return "aux_loss";
    }
    return "?";
}

inline BalanceStrategy balance_strategy_from_string(const std::string& s) {
    if (s == "none") return BalanceStrategy::none;
    if (s == "bias_diff") return BalanceStrategy::bias_diff;
    if (s == "bias_ratio") return BalanceStrategy::bias_ratio;
    if (s == "aux_loss") return BalanceStrategy::aux_loss;
    throw std::invalid_argument("unknown balance strategy: " + s);
}

// Non-learned router adjustment state for one MoE layer.
template <class Real>
struct RouterState {
    std::vector<Real> bias;       // [N_r], starts at zero
    std::vector<double> loads;    // last observed batch load fractions
    BalanceStrategy strategy = BalanceStrategy::bias_diff;
    double gamma = 1e-3;  // bias step size
    double alpha = 0.01;  // aux-loss weight

    static RouterState init(std::size_t routed, BalanceStrategy strategy, double gamma,
                            double alpha) {
        RouterState s;
        s.bias.assign(routed, Real(0));
        s.strategy = strategy;
        s.gamma = gamma;
        s.alpha = alpha;
        return s;
    }
};

template <class Real>
struct ExpertWeights {
    Tensor<Real> w_g;                 // router [d x N_r]
    std::vector<Tensor<Real>> w_in;   // N experts, shared first: [d x hidden]
    std::vector<Tensor<Real>> w_out;  // [hidden x d]
};

template <class Real>
struct RoutingDecision {
    std::size_t top_k = 0;
    std::vector<std::size_t> indices;  // [n x k], routed-expert ids
    Tensor<Real> gates;                // [n x k], renormalized over the top-k
    Tensor<Real> probs;                // [n x N_r], softmax of biased logits
    Tensor<Real> bias_in_graph;        // the constant bias tensor used; never grad
};

namespace detail {

// top-k by probability, ties broken toward the lowest expert index
template <class Real>
void topk_indices(const Real* row, std::size_t n_routed, std::size_t k, std::size_t* out) {
    std::vector<std::size_t> idx(n_routed);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [row](std::size_t a, std::size_t b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    std::copy_n(idx.begin(), k, out);
}

}  // namespace detail

// gates = probs restricted to the selected experts, renormalized to sum 1.
// Differentiable through probs; selection itself is piecewise constant.
template <class Real>
Tensor<Real> topk_renorm(const Tensor<Real>& probs, const std::vector<std::size_t>& indices,
                         std::size_t k) {
    const std::size_t n = probs.rows(), n_routed = probs.cols();
    if (indices.size() != n * k)
        throw std::invalid_argument("topk_renorm: index count mismatch");
    std::vector<Real> out(n * k);
    std::vector<Real> sums(n);
    for (std::size_t i = 0; i < n; ++i) {
        Real s = 0;
        for (std::size_t j = 0; j < k; ++j) s += probs.data()[i * n_routed + indices[i * k + j]];
        sums[i] = s;
        for (std::size_t j = 0; j < k; ++j)
            out[i * k + j] = probs.data()[i * n_routed + indices[i * k + j]] / s;
    }
    return Tensor<Real>::make(
        Shape{n, k}, std::move(out), {probs},
        [n, k, n_routed, indices, sums = std::move(sums)](TensorNode<Real>& self) {
            auto& pp = *self.parents[0];
            if (!pp.requires_grad) return;
            pp.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                Real dot = 0;
                for (std::size_t j = 0; j < k; ++j)
                    dot += self.grad[i * k + j] * self.data[i * k + j];
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t e = indices[i * k + j];
                    pp.grad[i * n_routed + e] += (self.grad[i * k + j] - dot) / sums[i];
                }
            }
        });
}

// Computes biased routing logits, per-token softmax, top-k selection and
// renormalized gates. The bias enters as a constant: gradients flow into the
// router matrix only.
template <class Real>
RoutingDecision<Real> route(const Tensor<Real>& x, const RouterState<Real>& state,
                            const Tensor<Real>& w_g, std::size_t k) {
    const std::size_t n = x.rows(), n_routed = w_g.cols();
    if (k > n_routed)
        throw std::invalid_argument("route: top_k " + std::to_string(k) + " exceeds " +
                                    std::to_string(n_routed) + " routed experts");
    if (state.bias.size() != n_routed)
        throw std::invalid_argument("route: bias length " + std::to_string(state.bias.size()) +
                                    " does not match " + std::to_string(n_routed) + " experts");

    RoutingDecision<Real> dec;
    dec.top_k = k;
    dec.bias_in_graph = Tensor<Real>::from_data({n_routed}, state.bias, /*requires_grad=*/false);
    auto logits = add_row(matmul(x, w_g), dec.bias_in_graph);
    dec.probs = softmax(logits, 1);
    dec.indices.resize(n * k);
    for (std::size_t i = 0; i < n; ++i)
        detail::topk_indices(dec.probs.data() + i * n_routed, n_routed, k,
                             dec.indices.data() + i * k);
    dec.gates = topk_renorm(dec.probs, dec.indices, k);
    return dec;
}

// As route(), but with the top-k sets pinned by the caller. Used by the
// gradient checker: finite differences are only valid within a routing cell.
template <class Real>
RoutingDecision<Real> route_with_fixed_selection(const Tensor<Real>& x,
                                                 const RouterState<Real>& state,
                                                 const Tensor<Real>& w_g, std::size_t k,
                                                 std::vector<std::size_t> indices) {
    const std::size_t n_routed = w_g.cols();
    RoutingDecision<Real> dec;
    dec.top_k = k;
    dec.bias_in_graph = Tensor<Real>::from_data({n_routed}, state.bias, false);
    auto logits = add_row(matmul(x, w_g), dec.bias_in_graph);
    dec.probs = softmax(logits, 1);
    dec.indices = std::move(indices);
    dec.gates = topk_renorm(dec.probs, dec.indices, k);
    return dec;
}

// y = sum of shared experts + gate-weighted sum of the selected routed
// experts, each expert being w_out * gelu(w_in * x). Tokens are grouped per
// expert so the work is k+N_s expert applications regardless of order.
template <class Real>
Tensor<Real> moe_forward(const Tensor<Real>& x, const ExpertWeights<Real>& w,
                         const ExpertConfig& cfg, const RoutingDecision<Real>& dec) {
    const std::size_t n = x.rows();
    const std::size_t k = dec.top_k;
    auto expert_apply = [&](const Tensor<Real>& input, std::size_t e) {
        return matmul(gelu(matmul(input, w.w_in[e])), w.w_out[e]);
    };

    Tensor<Real> y;
    for (std::size_t s = 0; s < cfg.shared; ++s) {
        auto out = expert_apply(x, s);
        y = y.defined() ? add(y, out) : out;
    }
    if (!y.defined()) y = Tensor<Real>::zeros({n, x.cols()});

    // group tokens by routed expert
    std::vector<std::vector<std::size_t>> token_of(cfg.routed());
    std::vector<std::vector<std::size_t>> slot_of(cfg.routed());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t e = dec.indices[i * k + j];
            token_of[e].push_back(i);
            slot_of[e].push_back(i * k + j);
        }
    }
    for (std::size_t e = 0; e < cfg.routed(); ++e) {
        if (token_of[e].empty()) continue;
        auto xt = gather_rows(x, token_of[e]);
        auto out = expert_apply(xt, cfg.shared + e);
        auto gv = gather_elems(dec.gates, slot_of[e]);
        y = index_add_rows(y, token_of[e], scale_rows(out, gv));
    }
    return y;
}

// Batch load fractions: share of routed token-slots per expert; sums to 1.
inline std::vector<double> compute_loads(const std::vector<std::size_t>& indices, std::size_t n,
                                         std::size_t k, std::size_t n_routed) {
    std::vector<double> f(n_routed, 0.0);
    for (std::size_t i = 0; i < n * k; ++i) f[indices[i]] += 1.0;
    const double denom = static_cast<double>(n) * static_cast<double>(k);
    for (auto& v : f) v /= denom;
    return f;
}

// Gradient-free bias adjustment between steps. The target is the uniform
// load 1/N_r; none and aux_loss leave the bias untouched.
template <class Real>
void balancer_update(RouterState<Real>& state, const std::vector<double>& batch_loads) {
    if (batch_loads.size() != state.bias.size())
        throw std::invalid_argument("balancer_update: loads length " +
                                    std::to_string(batch_loads.size()) + " vs bias length " +
                                    std::to_string(state.bias.size()));
    state.loads = batch_loads;
    const double mean = 1.0 / static_cast<double>(state.bias.size());
    switch (state.strategy) {
        case BalanceStrategy::bias_diff:
            for (std::size_t i = 0; i < state.bias.size(); ++i)
                state.bias[i] -= static_cast<Real>(state.gamma * (batch_loads[i] - mean));
            break;
        case BalanceStrategy::bias_ratio:
            for (std::size_t i = 0; i < state.bias.size(); ++i)
                state.bias[i] -= static_cast<Real>(state.gamma * (batch_loads[i] / mean - 1.0));
            break;
        case BalanceStrategy::none:
        case BalanceStrategy::aux_loss:
            break;
    }
}

// Switch-style balance surrogate N_r * sum_i f_i * Pbar_i, scaled by alpha.
// The load fractions enter as constants; gradient flows through the mean
// router probabilities only.
template <class Real>
Tensor<Real> aux_balance_loss(const Tensor<Real>& probs, const std::vector<double>& loads,
                              double alpha) {
    const std::size_t n = probs.rows(), n_routed = probs.cols();
    if (loads.size() != n_routed)
        throw std::invalid_argument("aux_balance_loss: loads length mismatch");
    double acc = 0;
    for (std::size_t e = 0; e < n_routed; ++e) {
        double pbar = 0;
        for (std::size_t i = 0; i < n; ++i) pbar += probs.data()[i * n_routed + e];
        pbar /= static_cast<double>(n);
        acc += loads[e] * pbar;
    }
    const Real value = static_cast<Real>(alpha * static_cast<double>(n_routed) * acc);
    return Tensor<Real>::make(
        Shape{}, {value}, {probs}, [n, n_routed, loads, alpha](TensorNode<Real>& self) {
            auto& pp = *self.parents[0];
            if (!pp.requires_grad) return;
            pp.ensure_grad();
            const double c = alpha * static_cast<double>(n_routed) / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t e = 0; e < n_routed; ++e)
                    pp.grad[i * n_routed + e] +=
                        self.grad[0] * static_cast<Real>(c * loads[e]);
        });
}

// Coefficient of variation of the load fractions (population stddev / mean).
inline double load_cv(const std::vector<double>& loads) {
    if (loads.empty()) throw std::invalid_argument("load_cv: empty loads");
    double mean = 0;
    for (double f : loads) mean += f;
    mean /= static_cast<double>(loads.size());
    if (mean == 0.0) return 0.0;
    double var = 0;
    for (double f : loads) var += (f - mean) * (f - mean);
    var /= static_cast<double>(loads.size());
    return std::sqrt(var) / mean;
}

// Arbitrary-precision unsigned integer, base 1e9 limbs. Just enough for
// exact binomial coefficients of any size.
class BigUint {
  public:
    BigUint(std::uint64_t v = 0) {
        while (v) {
            limbs_.push_back(static_cast<std::uint32_t>(v % kBase));
            v /= kBase;
        }
    }

    void mul_small(std::uint64_t m) {
        std::uint64_t carry = 0;
        for (auto& limb : limbs_) {
            const std::uint64_t cur = static_cast<std::uint64_t>(limb) * m + carry;
            limb = static_cast<std::uint32_t>(cur % kBase);
            carry = cur / kBase;
        }
        while (carry) {
            limbs_.push_back(static_cast<std::uint32_t>(carry % kBase));
            carry /= kBase;
        }
    }

    // exact division by a small integer; remainder must be zero
    void div_small_exact(std::uint64_t d) {
        std::uint64_t rem = 0;
        for (std::size_t i = limbs_.size(); i-- > 0;) {
            const std::uint64_t cur = rem * kBase + limbs_[i];
            limbs_[i] = static_cast<std::uint32_t>(cur / d);
            rem = cur % d;
        }
        if (rem != 0) throw std::logic_error("BigUint: inexact division");
        while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
    }

    bool fits_u64() const {
        if (limbs_.size() > 3) return false;
        // conservative: recompose and check round trip
        unsigned __int128 v = 0;
        for (std::size_t i = limbs_.size(); i-- > 0;) v = v * kBase + limbs_[i];
        return v <= static_cast<unsigned __int128>(UINT64_MAX);
    }

    std::uint64_t to_u64() const {
        if (!fits_u64()) throw std::overflow_error("BigUint: value exceeds 64 bits");
        std::uint64_t v = 0;
        for (std::size_t i = limbs_.size(); i-- > 0;) v = v * kBase + limbs_[i];
        return v;
    }

    std::string str() const {
        if (limbs_.empty()) return "0";
        std::string s = std::to_string(limbs_.back());
        for (std::size_t i = limbs_.size() - 1; i-- > 0;) {
            std::string part = std::to_string(limbs_[i]);
            s += std::string(9 - part.size(), '0') + part;
        }
        return s;
    }

    friend bool operator==(const BigUint& a, const BigUint& b) { return a.limbs_ == b.limbs_; }

  private:
    static constexpr std::uint64_t kBase = 1000000000ull;
    std::vector<std::uint32_t> limbs_;  // little-endian
};

// Exact binomial coefficient. Note: the often-quoted routing-space figure
// 36,288,252 for 62 choose 6 actually equals 57 choose 6; the correct value
// is 61,474,519.
inline BigUint routing_combinations(std::uint64_t n, std::uint64_t k) {
    if (k > n) return BigUint(0);
    if (k > n - k) k = n - k;
    BigUint result(1);
    for (std::uint64_t i = 1; i <= k; ++i) {
        result.mul_small(n - k + i);
        result.div_small_exact(i);
    }
    return result;
}

}  // namespace mmr
