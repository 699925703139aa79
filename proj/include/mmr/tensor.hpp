#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// The graph is built eagerly by the free-function ops below; Tensor is a
// cheap shared handle onto a graph node. Only the ops needed by a small
// decoder-only transformer are provided; there is no general broadcasting
// beyond trailing-axis affine parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mmr {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

}  // namespace detail

// Matmul FLOP accounting: 2 FLOPs per multiply-accumulate, forward ops only.
// Softmax, normalization, activations and elementwise work are not counted.
namespace flops {

inline thread_local std::uint64_t g_matmul_flops = 0;

inline void reset() noexcept { g_matmul_flops = 0; }
inline std::uint64_t count() noexcept { return g_matmul_flops; }
inline void add(std::uint64_t f) noexcept { g_matmul_flops += f; }

}  // namespace flops

namespace autograd {

inline thread_local int g_no_grad_depth = 0;

inline bool grad_enabled() noexcept { return g_no_grad_depth == 0; }

// RAII scope that suppresses graph construction (inference / oracle paths).
struct NoGradGuard {
    NoGradGuard() noexcept { ++g_no_grad_depth; }
    ~NoGradGuard() { --g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

template <class Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until first touched
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // accumulates into parents

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    }
    bool is_leaf() const { return !backward_fn; }
};

template <class Real>
class Tensor {
  public:
    using Node = TensorNode<Real>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return leaf(std::move(shape), {}, requires_grad, Real(0));
    }

    static Tensor full(Shape shape, Real value, bool requires_grad = false) {
        return leaf(std::move(shape), {}, requires_grad, value);
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        return from_data(Shape{}, {value}, requires_grad);
    }

    static Tensor from_data(Shape shape, std::vector<Real> data, bool requires_grad = false) {
        if (detail::numel(shape) != data.size())
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + detail::shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor randn(Shape shape, std::mt19937& rng, Real stddev, bool requires_grad = false) {
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<Real> data(detail::numel(shape));
        for (auto& v : data) v = static_cast<Real>(dist(rng)) * stddev;
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    // Low-level constructor for custom differentiable ops. The backward
    // function reads this node's grad and accumulates into parents' grads.
    static Tensor make(Shape shape, std::vector<Real> data, std::vector<Tensor> parents,
                       std::function<void(Node&)> backward) {
        Tensor out = from_data(std::move(shape), std::move(data), false);
        bool rg = false;
        if (autograd::grad_enabled()) {
            for (const auto& p : parents) rg = rg || p.requires_grad();
        }
        if (rg) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward_fn = std::move(backward);
        }
        return out;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

    std::size_t rows() const {
        require_2d("rows");
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_2d("cols");
        return node_->shape[1];
    }

    Real* data() { return node_->data.data(); }
    const Real* data() const { return node_->data.data(); }
    std::vector<Real>& values() { return node_->data; }
    const std::vector<Real>& values() const { return node_->data; }

    Real item() const {
        if (size() != 1)
            throw std::logic_error("item: tensor has " + std::to_string(size()) + " elements");
        return node_->data[0];
    }

    Real at(std::size_t r, std::size_t c) const {
        require_2d("at");
        return node_->data[r * node_->shape[1] + c];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return defined() && !node_->grad.empty(); }
    std::vector<Real>& grad() { return node_->grad; }
    const std::vector<Real>& grad() const { return node_->grad; }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    // Reverse-mode sweep from a scalar. Visits each producing op exactly once
    // (reverse DFS postorder). Leaf grads accumulate across repeated calls;
    // interior grads are recomputed per call.
    void backward() {
        if (size() != 1)
            throw std::logic_error("backward: loss must be a scalar, got shape " +
                                   detail::shape_str(shape()));
        if (!node_->requires_grad)
            throw std::logic_error("backward: tensor does not require grad");

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        for (Node* n : order) {
            if (!n->is_leaf()) n->grad.assign(n->data.size(), Real(0));
        }
        node_->ensure_grad();
        node_->grad[0] += Real(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<Real>, bool requires_grad, Real fill) {
        std::vector<Real> data(detail::numel(shape), fill);
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    void require_2d(const char* what) const {
        if (node_->shape.size() != 2)
            throw std::logic_error(std::string(what) + ": tensor is not 2-D, shape " +
                                   detail::shape_str(node_->shape));
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

// Raw kernels shared by forward ops and backward lambdas. These do not touch
// the FLOP counter; the forward ops account explicitly.

template <class Real>
void mm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
        bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, Real(0));
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const Real av = ai[t];
            if (av == Real(0)) continue;
            const Real* bt = b + t * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
template <class Real>
void mm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
           bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = 0;
            for (std::size_t t = 0; t < k; ++t) acc += ai[t] * bj[t];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// c[k x n] (+)= a[m x k]^T * b[m x n]
template <class Real>
void mm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n,
           bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, Real(0));
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        const Real* bi = b + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const Real av = ai[t];
            if (av == Real(0)) continue;
            Real* ct = c + t * n;
            for (std::size_t j = 0; j < n; ++j) ct[j] += av * bi[j];
        }
    }
}

template <class Real>
void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise ----

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<Real>::make(a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& self) {
        for (int p = 0; p < 2; ++p) {
            auto& par = *self.parents[p];
            if (!par.requires_grad) continue;
            par.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
        }
    });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor<Real>::make(a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return Tensor<Real>::make(a.shape(), std::move(out), {a}, [c](TensorNode<Real>& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * c;
    });
}

// y[i,:] = x[i,:] + v  (trailing-axis broadcast)
template <class Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& v) {
    if (x.ndim() < 1 || v.ndim() != 1 || x.shape().back() != v.extent(0))
        throw std::invalid_argument("add_row: shape mismatch " + detail::shape_str(x.shape()) +
                                    " vs " + detail::shape_str(v.shape()));
    const std::size_t m = v.extent(0), rows = x.size() / m;
    std::vector<Real> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < m; ++c) out[r * m + c] = x.data()[r * m + c] + v.data()[c];
    return Tensor<Real>::make(x.shape(), std::move(out), {x, v}, [m, rows](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        auto& pv = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < m; ++c) pv.grad[c] += self.grad[r * m + c];
        }
    });
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    return Tensor<Real>::make(Shape{}, {acc}, {x}, [](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (auto& g : px.grad) g += self.grad[0];
    });
}

// ---- matmul ----

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                                    " vs " + detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    flops::add(2ull * m * n * k);
    std::vector<Real> out(m * n);
    detail::mm(a.data(), b.data(), out.data(), m, k, n, false);
    return Tensor<Real>::make(Shape{m, n}, std::move(out), {a, b},
                              [m, k, n](TensorNode<Real>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                      pa.ensure_grad();
                                      detail::mm_nt(self.grad.data(), pb.data.data(),
                                                    pa.grad.data(), m, n, k, true);
                                  }
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      detail::mm_tn(pa.data.data(), self.grad.data(),
                                                    pb.grad.data(), m, k, n, true);
                                  }
                              });
}

// c = a * b^T with a[m x k], b[n x k]; used for attention scores and the tied
// unembedding so the transpose is never materialized.
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: incompatible shapes " +
                                    detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    flops::add(2ull * m * n * k);
    std::vector<Real> out(m * n);
    detail::mm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    return Tensor<Real>::make(Shape{m, n}, std::move(out), {a, b},
                              [m, k, n](TensorNode<Real>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  if (pa.requires_grad) {
                                      pa.ensure_grad();
                                      detail::mm(self.grad.data(), pb.data.data(), pa.grad.data(),
                                                 m, n, k, true);
                                  }
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      detail::mm_tn(self.grad.data(), pa.data.data(),
                                                    pb.grad.data(), m, n, k, true);
                                  }
                              });
}

// ---- softmax / norm / activations ----

template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
    if (axis >= x.ndim())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                    " out of range for shape " + detail::shape_str(x.shape()));
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];

    std::vector<Real> out(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            Real mx = x.data()[base];
            for (std::size_t l = 1; l < len; ++l)
                mx = std::max(mx, x.data()[base + l * inner]);
            Real denom = 0;
            for (std::size_t l = 0; l < len; ++l) {
                const Real e = std::exp(x.data()[base + l * inner] - mx);
                out[base + l * inner] = e;
                denom += e;
            }
            const Real inv = Real(1) / denom;
            for (std::size_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
        }
    }
    return Tensor<Real>::make(
        x.shape(), std::move(out), {x}, [outer, inner, len](TensorNode<Real>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    Real dot = 0;
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t i = base + l * inner;
                        dot += self.data[i] * self.grad[i];
                    }
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t i = base + l * inner;
                        px.grad[i] += self.data[i] * (self.grad[i] - dot);
                    }
                }
            }
        });
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& offset, Real eps) {
    if (x.ndim() < 1 || gain.ndim() != 1 || offset.ndim() != 1 ||
        gain.extent(0) != x.shape().back() || offset.extent(0) != x.shape().back())
        throw std::invalid_argument("layer_norm: affine params must match last extent of " +
                                    detail::shape_str(x.shape()));
    const std::size_t d = x.shape().back(), rows = x.size() / d;
    std::vector<Real> out(x.size());
    std::vector<Real> xhat(x.size());
    std::vector<Real> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * d;
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= Real(d);
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) {
            const Real t = xr[c] - mean;
            var += t * t;
        }
        var /= Real(d);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < d; ++c) {
            const Real xh = (xr[c] - mean) * is;
            xhat[r * d + c] = xh;
            out[r * d + c] = gain.data()[c] * xh + offset.data()[c];
        }
    }
    return Tensor<Real>::make(
        x.shape(), std::move(out), {x, gain, offset},
        [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<Real>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        pg.grad[c] += self.grad[r * d + c] * xhat[r * d + c];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    Real sum_g = 0, sum_gx = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real gp = self.grad[r * d + c] * pg.data[c];
                        sum_g += gp;
                        sum_gx += gp * xhat[r * d + c];
                    }
                    const Real inv_d = Real(1) / Real(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        const Real gp = self.grad[r * d + c] * pg.data[c];
                        px.grad[r * d + c] +=
                            inv_std[r] * (gp - sum_g * inv_d - xhat[r * d + c] * sum_gx * inv_d);
                    }
                }
            }
        });
}

// GELU, tanh approximation.
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out[i] = static_cast<Real>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    return Tensor<Real>::make(x.shape(), std::move(out), {x}, [](TensorNode<Real>& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        constexpr double c = 0.7978845608028654;
        constexpr double a = 0.044715;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = static_cast<double>(px.data[i]);
            const double t = std::tanh(c * (v + a * v * v * v));
            const double dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
            px.grad[i] += self.grad[i] * static_cast<Real>(dy);
        }
    });
}

// Mean negative log-softmax probability of the targets.
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2 || logits.rows() != targets.size())
        throw std::invalid_argument("cross_entropy: logits " + detail::shape_str(logits.shape()) +
                                    " vs " + std::to_string(targets.size()) + " targets");
    const std::size_t n = logits.rows(), v = logits.cols();
    std::vector<Real> probs(n * v);
    Real total = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const int t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= v)
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " at row " +
                                    std::to_string(r) + " out of range for vocab " +
                                    std::to_string(v));
        const Real* lr = logits.data() + r * v;
        Real mx = lr[0];
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, lr[c]);
        Real denom = 0;
        for (std::size_t c = 0; c < v; ++c) {
            const Real e = std::exp(lr[c] - mx);
            probs[r * v + c] = e;
            denom += e;
        }
        const Real inv = Real(1) / denom;
        for (std::size_t c = 0; c < v; ++c) probs[r * v + c] *= inv;
        total += std::log(denom) + mx - lr[static_cast<std::size_t>(t)];
    }
    total /= Real(n);
    return Tensor<Real>::make(
        Shape{}, {total}, {logits},
        [n, v, probs = std::move(probs), targets](TensorNode<Real>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            const Real g = self.grad[0] / Real(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < v; ++c) px.grad[r * v + c] += g * probs[r * v + c];
                px.grad[r * v + static_cast<std::size_t>(targets[r])] -= g;
            }
        });
}

// Inverted dropout with a caller-owned RNG; identity when not training.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, std::mt19937& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    const Real keep_inv = static_cast<Real>(1.0 / (1.0 - p));
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<Real> mask(x.size());
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = keep(rng) ? keep_inv : Real(0);
        out[i] = x.data()[i] * mask[i];
    }
    return Tensor<Real>::make(x.shape(), std::move(out), {x},
                              [mask = std::move(mask)](TensorNode<Real>& self) {
                                  auto& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      px.grad[i] += self.grad[i] * mask[i];
                              });
}

// ---- lookup / slicing / assembly ----

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2)
        throw std::invalid_argument("embedding: table must be 2-D, got " +
                                    detail::shape_str(table.shape()));
    const std::size_t v = table.rows(), d = table.cols(), n = ids.size();
    std::vector<Real> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) +
                                    " out of range for vocab " + std::to_string(v));
        std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return Tensor<Real>::make(Shape{n, d}, std::move(out), {table},
                              [d, ids](TensorNode<Real>& self) {
                                  auto& pt = *self.parents[0];
                                  if (!pt.requires_grad) return;
                                  pt.ensure_grad();
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                      Real* dst = pt.grad.data() + static_cast<std::size_t>(ids[i]) * d;
                                      const Real* src = self.grad.data() + i * d;
                                      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                                  }
                              });
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t start, std::size_t len) {
    if (x.ndim() != 2 || start + len > x.cols())
        throw std::invalid_argument("slice_cols: [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of range for " +
                                    detail::shape_str(x.shape()));
    const std::size_t n = x.rows(), m = x.cols();
    std::vector<Real> out(n * len);
    for (std::size_t r = 0; r < n; ++r)
        std::copy_n(x.data() + r * m + start, len, out.data() + r * len);
    return Tensor<Real>::make(Shape{n, len}, std::move(out), {x},
                              [start, len, m](TensorNode<Real>& self) {
                                  auto& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  const std::size_t n2 = self.shape[0];
                                  for (std::size_t r = 0; r < n2; ++r)
                                      for (std::size_t c = 0; c < len; ++c)
                                          px.grad[r * m + start + c] += self.grad[r * len + c];
                              });
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const std::size_t n = parts[0].rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.rows() != n)
            throw std::invalid_argument("concat_cols: row mismatch " +
                                        detail::shape_str(p.shape()));
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<Real> out(n * total);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const std::size_t w = widths[pi];
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(parts[pi].data() + r * w, w, out.data() + r * total + off);
        off += w;
    }
    return Tensor<Real>::make(Shape{n, total}, std::move(out), parts,
                              [widths, total, n](TensorNode<Real>& self) {
                                  std::size_t off2 = 0;
                                  for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                                      auto& p = *self.parents[pi];
                                      const std::size_t w = widths[pi];
                                      if (p.requires_grad) {
                                          p.ensure_grad();
                                          for (std::size_t r = 0; r < n; ++r)
                                              for (std::size_t c = 0; c < w; ++c)
                                                  p.grad[r * w + c] +=
                                                      self.grad[r * total + off2 + c];
                                      }
                                      off2 += w;
                                  }
                              });
}

template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const std::size_t m = parts[0].cols();
    std::size_t total = 0;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        if (p.cols() != m)
            throw std::invalid_argument("concat_rows: column mismatch " +
                                        detail::shape_str(p.shape()));
        heights.push_back(p.rows());
        total += p.rows();
    }
    std::vector<Real> out;
    out.reserve(total * m);
    for (const auto& p : parts) out.insert(out.end(), p.data(), p.data() + p.size());
    return Tensor<Real>::make(Shape{total, m}, std::move(out), parts,
                              [heights, m](TensorNode<Real>& self) {
                                  std::size_t row = 0;
                                  for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                                      auto& p = *self.parents[pi];
                                      if (p.requires_grad) {
                                          p.ensure_grad();
                                          for (std::size_t i = 0; i < heights[pi] * m; ++i)
                                              p.grad[i] += self.grad[row * m + i];
                                      }
                                      row += heights[pi];
                                  }
                              });
}

template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<std::size_t>& idx) {
    const std::size_t d = x.cols();
    std::vector<Real> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.rows())
            throw std::out_of_range("gather_rows: row " + std::to_string(idx[i]) +
                                    " out of range for " + detail::shape_str(x.shape()));
        std::copy_n(x.data() + idx[i] * d, d, out.data() + i * d);
    }
    return Tensor<Real>::make(Shape{idx.size(), d}, std::move(out), {x},
                              [d, idx](TensorNode<Real>& self) {
                                  auto& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                      for (std::size_t c = 0; c < d; ++c)
                                          px.grad[idx[i] * d + c] += self.grad[i * d + c];
                              });
}

// out = base with rows[i] added at row idx[i].
template <class Real>
Tensor<Real> index_add_rows(const Tensor<Real>& base, const std::vector<std::size_t>& idx,
                            const Tensor<Real>& rows) {
    if (base.cols() != rows.cols() || rows.rows() != idx.size())
        throw std::invalid_argument("index_add_rows: shape mismatch " +
                                    detail::shape_str(base.shape()) + " vs " +
                                    detail::shape_str(rows.shape()));
    const std::size_t d = base.cols();
    std::vector<Real> out(base.data(), base.data() + base.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= base.rows())
            throw std::out_of_range("index_add_rows: row " + std::to_string(idx[i]) +
                                    " out of range");
        for (std::size_t c = 0; c < d; ++c) out[idx[i] * d + c] += rows.data()[i * d + c];
    }
    return Tensor<Real>::make(base.shape(), std::move(out), {base, rows},
                              [d, idx](TensorNode<Real>& self) {
                                  auto& pb = *self.parents[0];
                                  auto& pr = *self.parents[1];
                                  if (pb.requires_grad) {
                                      pb.ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          pb.grad[i] += self.grad[i];
                                  }
                                  if (pr.requires_grad) {
                                      pr.ensure_grad();
                                      for (std::size_t i = 0; i < idx.size(); ++i)
                                          for (std::size_t c = 0; c < d; ++c)
                                              pr.grad[i * d + c] += self.grad[idx[i] * d + c];
                                  }
                              });
}

template <class Real>
Tensor<Real> gather_elems(const Tensor<Real>& x, const std::vector<std::size_t>& flat_idx) {
    std::vector<Real> out(flat_idx.size());
    for (std::size_t i = 0; i < flat_idx.size(); ++i) {
        if (flat_idx[i] >= x.size())
            throw std::out_of_range("gather_elems: index " + std::to_string(flat_idx[i]) +
                                    " out of range");
        out[i] = x.data()[flat_idx[i]];
    }
    return Tensor<Real>::make(Shape{flat_idx.size()}, std::move(out), {x},
                              [flat_idx](TensorNode<Real>& self) {
                                  auto& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < flat_idx.size(); ++i)
                                      px.grad[flat_idx[i]] += self.grad[i];
                              });
}

// y[i,:] = rows[i,:] * gains[i]
template <class Real>
Tensor<Real> scale_rows(const Tensor<Real>& rows, const Tensor<Real>& gains) {
    if (rows.ndim() != 2 || gains.ndim() != 1 || gains.extent(0) != rows.rows())
        throw std::invalid_argument("scale_rows: shape mismatch " +
                                    detail::shape_str(rows.shape()) + " vs " +
                                    detail::shape_str(gains.shape()));
    const std::size_t n = rows.rows(), d = rows.cols();
    std::vector<Real> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = rows.data()[i * d + c] * gains.data()[i];
    return Tensor<Real>::make(Shape{n, d}, std::move(out), {rows, gains},
                              [n, d](TensorNode<Real>& self) {
                                  auto& pr = *self.parents[0];
                                  auto& pg = *self.parents[1];
                                  if (pr.requires_grad) {
                                      pr.ensure_grad();
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t c = 0; c < d; ++c)
                                              pr.grad[i * d + c] +=
                                                  self.grad[i * d + c] * pg.data[i];
                                  }
                                  if (pg.requires_grad) {
                                      pg.ensure_grad();
                                      for (std::size_t i = 0; i < n; ++i) {
                                          Real acc = 0;
                                          for (std::size_t c = 0; c < d; ++c)
                                              acc += self.grad[i * d + c] * pr.data[i * d + c];
                                          pg.grad[i] += acc;
                                      }
                                  }
                              });
}

}  // namespace mmr
