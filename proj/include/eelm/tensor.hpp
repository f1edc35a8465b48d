#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "eelm/error.hpp"
#include "eelm/rng.hpp"

namespace eelm {

using Shape = std::vector<int>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (int d : s) {
        if (d <= 0) throw DimError("non-positive dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Row kernels. All accumulation orders are fixed, and the functions are kept
// out-of-line so every call site executes the identical instruction sequence;
// the bit-exactness contracts (cache transparency, fallback anchor) depend on
// per-row results not varying with batch shape.
// ---------------------------------------------------------------------------

#define EELM_NOINLINE __attribute__((noinline))

// c[m x n] (+)= a[m x k] * b[k x n]
EELM_NOINLINE inline void gemm_nn(const float* a, const float* b, float* c, int m, int k,
                                  int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* ci = c + static_cast<long>(i) * n;
        if (!accumulate) std::fill(ci, ci + n, 0.0f);
        const float* ai = a + static_cast<long>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float aip = ai[p];
            const float* bp = b + static_cast<long>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
EELM_NOINLINE inline void gemm_nt(const float* a, const float* b, float* c, int m, int k,
                                  int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<long>(i) * k;
        float* ci = c + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* bj = b + static_cast<long>(j) * k;
            float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
            int p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += ai[p] * bj[p];
                s1 += ai[p + 1] * bj[p + 1];
                s2 += ai[p + 2] * bj[p + 2];
                s3 += ai[p + 3] * bj[p + 3];
            }
            float s = (s0 + s1) + (s2 + s3);
            for (; p < k; ++p) s += ai[p] * bj[p];
            if (accumulate)
                ci[j] += s;
            else
                ci[j] = s;
        }
    }
}

// c[m x n] (+)= a[k x m]^T * b[k x n]
EELM_NOINLINE inline void gemm_tn(const float* a, const float* b, float* c, int m, int k,
                                  int n, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<long>(m) * n, 0.0f);
    for (int p = 0; p < k; ++p) {
        const float* ap = a + static_cast<long>(p) * m;
        const float* bp = b + static_cast<long>(p) * n;
        for (int i = 0; i < m; ++i) {
            const float api = ap[i];
            float* ci = c + static_cast<long>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

// In-place stable softmax over each row of x[rows x n].
EELM_NOINLINE inline void softmax_rows(float* x, long rows, int n) {
    for (long r = 0; r < rows; ++r) {
        float* row = x + r * n;
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < n; ++j) row[j] *= inv;
    }
}

// y = gamma * (x - mu) / sqrt(var + eps) + beta, per row; saves inv_std per row.
EELM_NOINLINE inline void layernorm_rows(const float* x, const float* gamma, const float* beta,
                                         float eps, float* y, float* inv_std, long rows, int n) {
    for (long r = 0; r < rows; ++r) {
        const float* xr = x + r * n;
        float* yr = y + r * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += xr[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= n;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        const float muf = static_cast<float>(mu);
        inv_std[r] = is;
        for (int j = 0; j < n; ++j) yr[j] = gamma[j] * ((xr[j] - muf) * is) + beta[j];
    }
}

EELM_NOINLINE inline void gelu_vec(const float* x, float* y, long n) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    for (long i = 0; i < n; ++i) {
        const float v = x[i];
        const float t = std::tanh(kC * (v + 0.044715f * v * v * v));
        y[i] = 0.5f * v * (1.0f + t);
    }
}

EELM_NOINLINE inline void add_vec(const float* a, const float* b, float* c, long n) {
    for (long i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

inline float sigmoid_scalar(float x) {
    if (x >= 0.f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus_f64(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until gradient flows into this tensor
    bool requires_grad = false;
    std::optional<double> exact;  // f64 value carried by scalar reductions

    long numel() const { return static_cast<long>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        const long n = shape_numel(shape);
        impl->shape = std::move(shape);
        impl->data.assign(n, 0.0f);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        if (shape_numel(shape) != static_cast<long>(values.size()))
            throw DimError("from_data: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        Tensor t = from_data({1}, {static_cast<float>(v)}, requires_grad);
        t.impl_->exact = v;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<float>(rng.next_gaussian()) * stddev;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    long numel() const { return impl_->numel(); }
    std::vector<float>& data() { return impl_->data; }
    const std::vector<float>& data() const { return impl_->data; }
    std::vector<float>& grad() { return impl_->grad; }
    const std::vector<float>& grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }
    void zero_grad() { impl_->grad.clear(); }

    float item() const {
        if (numel() != 1) throw ContractError("item: tensor is not scalar");
        return impl_->data[0];
    }

    // Exact f64 value carried through scalar reductions; falls back to f32.
    double item_f64() const {
        if (numel() != 1) throw ContractError("item_f64: tensor is not scalar");
        return impl_->exact.value_or(static_cast<double>(impl_->data[0]));
    }

    float& at(int i) { return impl_->data[static_cast<size_t>(i)]; }
    float& at(int i, int j) { return impl_->data[static_cast<size_t>(i) * dim(1) + j]; }
    float& at(int i, int j, int k) {
        return impl_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    float cat(int i) const { return impl_->data[static_cast<size_t>(i)]; }
    float cat(int i, int j) const { return impl_->data[static_cast<size_t>(i) * dim(1) + j]; }
    float cat(int i, int j, int k) const {
        return impl_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend class Graph;
};

inline void check_finite(const std::vector<float>& v, const char* op) {
    for (float x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

// ---------------------------------------------------------------------------
// Graph: define-by-run tape, rebuilt per forward pass. Recording order is the
// topological order; backward walks it once in reverse.
// ---------------------------------------------------------------------------

class Graph {
public:
    struct Node {
        std::shared_ptr<TensorImpl> out;
        std::function<void()> backward;
    };

    void record(std::shared_ptr<TensorImpl> out, std::function<void()> backward) {
        nodes_.push_back({std::move(out), std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
        if (!loss.requires_grad())
            throw ContractError("backward: loss does not require grad");
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->grad.empty()) continue;  // not on the loss path
            it->backward();
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

inline Tensor make_out(Shape shape, bool requires_grad) {
    return Tensor::from_data(std::move(shape), {}, false);  // unreachable; see below
}

inline bool track(Graph* g, std::initializer_list<const Tensor*> inputs) {
    if (!g) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b, Graph* g) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimError("matmul: expected rank-2 inputs, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimError("matmul: inner dims differ: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
    check_finite(out.data(), "matmul");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g->record(oi, [ai, bi, oi, m, k, n] {
            if (ai->requires_grad) {
                ai->ensure_grad();
                gemm_nt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k, true);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                gemm_tn(ai->data.data(), oi->grad.data(), bi->grad.data(), k, m, n, true);
            }
        });
    }
    return out;
}

// Batched matmul over leading dim: a[B,m,k] * b[B,k,n] -> [B,m,n]
inline Tensor bmm(const Tensor& a, const Tensor& b, Graph* g) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out = Tensor::zeros({B, m, n});
    for (int s = 0; s < B; ++s)
        gemm_nn(a.data().data() + static_cast<long>(s) * m * k,
                b.data().data() + static_cast<long>(s) * k * n,
                out.data().data() + static_cast<long>(s) * m * n, m, k, n, false);
    check_finite(out.data(), "bmm");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g->record(oi, [ai, bi, oi, B, m, k, n] {
            for (int s = 0; s < B; ++s) {
                const float* go = oi->grad.data() + static_cast<long>(s) * m * n;
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    gemm_nt(go, bi->data.data() + static_cast<long>(s) * k * n,
                            ai->grad.data() + static_cast<long>(s) * m * k, m, n, k, true);
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    gemm_tn(ai->data.data() + static_cast<long>(s) * m * k, go,
                            bi->grad.data() + static_cast<long>(s) * k * n, k, m, n, true);
                }
            }
        });
    }
    return out;
}

// a[B,m,k] * b[B,n,k]^T -> [B,m,n]; attention-score form.
inline Tensor bmm_nt(const Tensor& a, const Tensor& b, Graph* g) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor out = Tensor::zeros({B, m, n});
    for (int s = 0; s < B; ++s)
        gemm_nt(a.data().data() + static_cast<long>(s) * m * k,
                b.data().data() + static_cast<long>(s) * n * k,
                out.data().data() + static_cast<long>(s) * m * n, m, k, n, false);
    check_finite(out.data(), "bmm_nt");
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g->record(oi, [ai, bi, oi, B, m, k, n] {
            for (int s = 0; s < B; ++s) {
                const float* go = oi->grad.data() + static_cast<long>(s) * m * n;
                if (ai->requires_grad) {
                    // dA = dC * B : [m,n]x[n,k]
                    ai->ensure_grad();
                    gemm_nn(go, bi->data.data() + static_cast<long>(s) * n * k,
                            ai->grad.data() + static_cast<long>(s) * m * k, m, n, k, true);
                }
                if (bi->requires_grad) {
                    // dB = dC^T * A : [n,m]x[m,k]
                    bi->ensure_grad();
                    gemm_tn(go, ai->data.data() + static_cast<long>(s) * m * k,
                            bi->grad.data() + static_cast<long>(s) * n * k, n, m, k, true);
                }
            }
        });
    }
    return out;
}

// x[..., k] * w[k, n] + b[n]; leading dims are flattened to rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b, Graph* g) {
    if (w.rank() != 2) throw DimError("linear: weight must be rank-2");
    const int k = w.dim(0), n = w.dim(1);
    if (x.dim(x.rank() - 1) != k)
        throw DimError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                       shape_str(w.shape()));
    const long rows = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor out = Tensor::zeros(out_shape);
    gemm_nn(x.data().data(), w.data().data(), out.data().data(), static_cast<int>(rows), k, n,
            false);
    const bool has_bias = b.defined();
    if (has_bias) {
        if (b.rank() != 1 || b.dim(0) != n) throw DimError("linear: bias must be [n]");
        float* o = out.data().data();
        const float* bb = b.data().data();
        for (long r = 0; r < rows; ++r) add_vec(o + r * n, bb, o + r * n, n);
    }
    check_finite(out.data(), "linear");
    const bool track = has_bias ? detail::track(g, {&x, &w, &b}) : detail::track(g, {&x, &w});
    if (track) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl(), oi = out.impl();
        auto bi2 = has_bias ? b.impl() : nullptr;
        g->record(oi, [xi, wi, bi2, oi, rows, k, n] {
            const float* go = oi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                gemm_nt(go, wi->data.data(), xi->grad.data(), static_cast<int>(rows), n, k, true);
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                gemm_tn(xi->data.data(), go, wi->grad.data(), k, static_cast<int>(rows), n, true);
            }
            if (bi2 && bi2->requires_grad) {
                bi2->ensure_grad();
                float* gb = bi2->grad.data();
                for (long r = 0; r < rows; ++r) {
                    const float* gr = go + r * n;
                    for (int j = 0; j < n; ++j) gb[j] += gr[j];
                }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Graph* g) {
    if (a.shape() != b.shape())
        throw DimError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    add_vec(a.data().data(), b.data().data(), out.data().data(), a.numel());
    check_finite(out.data(), "add");
    if (a.impl()->exact && b.impl()->exact) out.impl()->exact = *a.impl()->exact + *b.impl()->exact;
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g->record(oi, [ai, bi, oi] {
            const auto& go = oi->grad;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < go.size(); ++i) ai->grad[i] += go[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < go.size(); ++i) bi->grad[i] += go[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double c, Graph* g) {
    Tensor out = Tensor::zeros(x.shape());
    const float cf = static_cast<float>(c);
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (long i = 0; i < x.numel(); ++i) od[i] = xd[i] * cf;
    check_finite(out.data(), "scale");
    if (x.impl()->exact) out.impl()->exact = *x.impl()->exact * c;
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi, cf] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * cf;
        });
    }
    return out;
}

// x[B,T,S] + mask[T,S] broadcast over the leading dim; mask is a constant.
inline Tensor add_mask(const Tensor& x, const Tensor& mask, Graph* g) {
    if (x.rank() != 3 || mask.rank() != 2 || x.dim(1) != mask.dim(0) || x.dim(2) != mask.dim(1))
        throw DimError("add_mask: incompatible shapes");
    const int B = x.dim(0);
    const long slice = static_cast<long>(x.dim(1)) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (int s = 0; s < B; ++s)
        add_vec(x.data().data() + s * slice, mask.data().data(), out.data().data() + s * slice,
                slice);
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// Softmax over the last axis. Rows sum to 1; stable via max subtraction.
inline Tensor softmax(const Tensor& x, Graph* g) {
    if (x.rank() < 1) throw DimError("softmax: needs rank >= 1");
    const int n = x.dim(x.rank() - 1);
    const long rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    softmax_rows(out.data().data(), rows, n);
    check_finite(out.data(), "softmax");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi, rows, n] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (long r = 0; r < rows; ++r) {
                const float* y = oi->data.data() + r * n;
                const float* gy = oi->grad.data() + r * n;
                float* gx = xi->grad.data() + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
                const float dotf = static_cast<float>(dot);
                for (int j = 0; j < n; ++j) gx[j] += (gy[j] - dotf) * y[j];
            }
        });
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                         Graph* g) {
    const int n = x.dim(x.rank() - 1);
    if (eps <= 0.f) throw ArgumentError("layer_norm: eps must be positive");
    if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
        throw DimError("layer_norm: gamma/beta must be [n]");
    const long rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    auto inv_std = std::make_shared<std::vector<float>>(rows);
    layernorm_rows(x.data().data(), gamma.data().data(), beta.data().data(), eps,
                   out.data().data(), inv_std->data(), rows, n);
    check_finite(out.data(), "layer_norm");
    if (detail::track(g, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        g->record(oi, [xi, gi, bi, oi, inv_std, rows, n] {
            std::vector<float> xhat(n);
            for (long r = 0; r < rows; ++r) {
                const float* xr = xi->data.data() + r * n;
                const float* gy = oi->grad.data() + r * n;
                const float is = (*inv_std)[r];
                double mu = 0.0;
                for (int j = 0; j < n; ++j) mu += xr[j];
                mu /= n;
                for (int j = 0; j < n; ++j)
                    xhat[j] = (xr[j] - static_cast<float>(mu)) * is;
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (int j = 0; j < n; ++j) gi->grad[j] += gy[j] * xhat[j];
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int j = 0; j < n; ++j) bi->grad[j] += gy[j];
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    float* gx = xi->grad.data() + r * n;
                    const float* gm = gi->data.data();
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double t = static_cast<double>(gy[j]) * gm[j];
                        sum_g += t;
                        sum_gx += t * xhat[j];
                    }
                    const float mg = static_cast<float>(sum_g / n);
                    const float mgx = static_cast<float>(sum_gx / n);
                    for (int j = 0; j < n; ++j)
                        gx[j] += (gy[j] * gm[j] - mg - xhat[j] * mgx) * is;
                }
            }
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& x, Graph* g) {
    Tensor out = Tensor::zeros(x.shape());
    gelu_vec(x.data().data(), out.data().data(), x.numel());
    check_finite(out.data(), "gelu");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            constexpr float kC = 0.7978845608028654f;
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                const float v = xi->data[i];
                const float u = kC * (v + 0.044715f * v * v * v);
                const float t = std::tanh(u);
                const float du = kC * (1.0f + 3.0f * 0.044715f * v * v);
                const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
                xi->grad[i] += oi->grad[i] * d;
            }
        });
    }
    return out;
}

inline Tensor leaky_relu(const Tensor& x, float slope, Graph* g) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (long i = 0; i < x.numel(); ++i) od[i] = xd[i] >= 0.f ? xd[i] : slope * xd[i];
    check_finite(out.data(), "leaky_relu");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi, slope] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += oi->grad[i] * (xi->data[i] >= 0.f ? 1.0f : slope);
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x, Graph* g) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (long i = 0; i < x.numel(); ++i) od[i] = sigmoid_scalar(xd[i]);
    check_finite(out.data(), "sigmoid");
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                const float y = oi->data[i];
                xi->grad[i] += oi->grad[i] * y * (1.0f - y);
            }
        });
    }
    return out;
}

// Row lookup: table[V,d] gathered by ids -> [R,d].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids, Graph* g) {
    if (table.rank() != 2) throw DimError("embedding: table must be rank-2");
    const int V = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V)
            throw VocabError("embedding: token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(V));
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data().data() + static_cast<long>(ids[r]) * d, d,
                    out.data().data() + static_cast<long>(r) * d);
    if (detail::track(g, {&table})) {
        out.set_requires_grad(true);
        auto ti = table.impl(), oi = out.impl();
        auto ids_copy = std::make_shared<std::vector<int>>(ids);
        g->record(oi, [ti, oi, ids_copy, d] {
            if (!ti->requires_grad) return;
            ti->ensure_grad();
            for (size_t r = 0; r < ids_copy->size(); ++r) {
                float* dst = ti->grad.data() + static_cast<long>((*ids_copy)[r]) * d;
                const float* src = oi->grad.data() + static_cast<long>(r) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Select rows of x[R,d] by index -> [r,d].
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx, Graph* g) {
    if (x.rank() != 2) throw DimError("gather_rows: input must be rank-2");
    const int R = x.dim(0), d = x.dim(1);
    for (int i : idx)
        if (i < 0 || i >= R) throw DimError("gather_rows: index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), d});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.data().data() + static_cast<long>(idx[r]) * d, d,
                    out.data().data() + static_cast<long>(r) * d);
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        auto idx_copy = std::make_shared<std::vector<int>>(idx);
        g->record(oi, [xi, oi, idx_copy, d] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t r = 0; r < idx_copy->size(); ++r) {
                float* dst = xi->grad.data() + static_cast<long>((*idx_copy)[r]) * d;
                const float* src = oi->grad.data() + static_cast<long>(r) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Concatenate along the middle (time) axis: a[B,P,d] ++ b[B,T,d] -> [B,P+T,d].
inline Tensor concat_time(const Tensor& a, const Tensor& b, Graph* g) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimError("concat_time: incompatible shapes");
    const int B = a.dim(0), P = a.dim(1), T = b.dim(1), d = a.dim(2);
    Tensor out = Tensor::zeros({B, P + T, d});
    for (int s = 0; s < B; ++s) {
        std::copy_n(a.data().data() + static_cast<long>(s) * P * d, static_cast<long>(P) * d,
                    out.data().data() + static_cast<long>(s) * (P + T) * d);
        std::copy_n(b.data().data() + static_cast<long>(s) * T * d, static_cast<long>(T) * d,
                    out.data().data() + static_cast<long>(s) * (P + T) * d +
                        static_cast<long>(P) * d);
    }
    if (detail::track(g, {&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        g->record(oi, [ai, bi, oi, B, P, T, d] {
            for (int s = 0; s < B; ++s) {
                const float* go = oi->grad.data() + static_cast<long>(s) * (P + T) * d;
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    float* ga = ai->grad.data() + static_cast<long>(s) * P * d;
                    for (long i = 0; i < static_cast<long>(P) * d; ++i) ga[i] += go[i];
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    float* gb = bi->grad.data() + static_cast<long>(s) * T * d;
                    const float* gos = go + static_cast<long>(P) * d;
                    for (long i = 0; i < static_cast<long>(T) * d; ++i) gb[i] += gos[i];
                }
            }
        });
    }
    return out;
}

// [B,S,H*dh] -> [B*H,S,dh]
inline Tensor split_heads(const Tensor& x, int heads, Graph* g) {
    if (x.rank() != 3 || x.dim(2) % heads != 0) throw DimError("split_heads: bad shape");
    const int B = x.dim(0), S = x.dim(1), d = x.dim(2), dh = d / heads;
    Tensor out = Tensor::zeros({B * heads, S, dh});
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int s = 0; s < S; ++s)
                std::copy_n(xd + (static_cast<long>(b) * S + s) * d + static_cast<long>(h) * dh,
                            dh,
                            od + ((static_cast<long>(b) * heads + h) * S + s) * dh);
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi, B, S, d, dh, heads] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int s = 0; s < S; ++s) {
                        float* dst = xi->grad.data() + (static_cast<long>(b) * S + s) * d +
                                     static_cast<long>(h) * dh;
                        const float* src =
                            oi->grad.data() + ((static_cast<long>(b) * heads + h) * S + s) * dh;
                        for (int j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// [B*H,S,dh] -> [B,S,H*dh]
inline Tensor merge_heads(const Tensor& x, int heads, Graph* g) {
    if (x.rank() != 3 || x.dim(0) % heads != 0) throw DimError("merge_heads: bad shape");
    const int B = x.dim(0) / heads, S = x.dim(1), dh = x.dim(2), d = dh * heads;
    Tensor out = Tensor::zeros({B, S, d});
    const float* xd = x.data().data();
    float* od = out.data().data();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int s = 0; s < S; ++s)
                std::copy_n(xd + ((static_cast<long>(b) * heads + h) * S + s) * dh, dh,
                            od + (static_cast<long>(b) * S + s) * d + static_cast<long>(h) * dh);
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi, B, S, d, dh, heads] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < heads; ++h)
                    for (int s = 0; s < S; ++s) {
                        float* dst = xi->grad.data() +
                                     ((static_cast<long>(b) * heads + h) * S + s) * dh;
                        const float* src = oi->grad.data() +
                                           (static_cast<long>(b) * S + s) * d +
                                           static_cast<long>(h) * dh;
                        for (int j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// Copy-reshape; total element count must match.
inline Tensor reshape(const Tensor& x, Shape shape, Graph* g) {
    if (shape_numel(shape) != x.numel()) throw DimError("reshape: element count mismatch");
    Tensor out = Tensor::from_data(std::move(shape), x.data());
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x, Graph* g) {
    double total = 0.0;
    for (float v : x.data()) total += v;
    Tensor out = Tensor::scalar(total);
    if (detail::track(g, {&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        g->record(oi, [xi, oi] {
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const float go = oi->grad[0];
            for (auto& v : xi->grad) v += go;
        });
    }
    return out;
}

// Mean negative log-likelihood over rows: logits[R,V], one target id per row.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, Graph* g) {
    if (logits.rank() != 2) throw DimError("cross_entropy: logits must be [R,V]");
    const int R = logits.dim(0), V = logits.dim(1);
    if (static_cast<int>(targets.size()) != R)
        throw DimError("cross_entropy: targets size does not match rows");
    for (int t : targets)
        if (t < 0 || t >= V)
            throw VocabError("cross_entropy: label id " + std::to_string(t) +
                             " outside vocab of " + std::to_string(V));
    if (R == 0) throw DataError("cross_entropy: no rows");
    double total = 0.0;
    for (int r = 0; r < R; ++r) {
        const float* z = logits.data().data() + static_cast<long>(r) * V;
        float mx = z[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (int j = 0; j < V; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
        total += (std::log(s) + mx) - z[targets[static_cast<size_t>(r)]];
    }
    Tensor out = Tensor::scalar(total / R);
    if (!std::isfinite(out.item())) throw NumericError("non-finite cross_entropy");
    if (detail::track(g, {&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        auto tg = std::make_shared<std::vector<int>>(targets);
        g->record(oi, [li, oi, tg, R, V] {
            if (!li->requires_grad) return;
            li->ensure_grad();
            const float go = oi->grad[0] / static_cast<float>(R);
            std::vector<float> p(V);
            for (int r = 0; r < R; ++r) {
                const float* z = li->data.data() + static_cast<long>(r) * V;
                std::copy_n(z, V, p.data());
                softmax_rows(p.data(), 1, V);
                float* gz = li->grad.data() + static_cast<long>(r) * V;
                for (int j = 0; j < V; ++j) gz[j] += go * p[j];
                gz[(*tg)[static_cast<size_t>(r)]] -= go;
            }
        });
    }
    return out;
}

// Mean over rows of KL(softmax(logits_r) || q_r); the reference q is constant.
// Log arguments are clamped to [1e-7, 1-1e-7].
inline Tensor kl_from_logits(const Tensor& logits, const Tensor& q, Graph* g) {
    if (logits.rank() != 2 || q.shape() != logits.shape())
        throw DimError("kl_from_logits: shapes must match, rank-2");
    const int R = logits.dim(0), V = logits.dim(1);
    if (R == 0) throw DataError("kl_from_logits: no rows");
    constexpr double kClampLo = 1e-7;
    auto row_kl = std::make_shared<std::vector<double>>(R);
    double total = 0.0;
    std::vector<double> lp(V);
    for (int r = 0; r < R; ++r) {
        const float* z = logits.data().data() + static_cast<long>(r) * V;
        const float* qr = q.data().data() + static_cast<long>(r) * V;
        float mx = z[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (int j = 0; j < V; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
        const double lse = std::log(s) + mx;
        double kl = 0.0;
        for (int j = 0; j < V; ++j) {
            lp[static_cast<size_t>(j)] = static_cast<double>(z[j]) - lse;
            const double pj = std::exp(lp[static_cast<size_t>(j)]);
            if (pj <= 0.0) continue;
            const double qj = std::clamp(static_cast<double>(qr[j]), kClampLo, 1.0 - kClampLo);
            kl += pj * (lp[static_cast<size_t>(j)] - std::log(qj));
        }
        (*row_kl)[static_cast<size_t>(r)] = kl;
        total += kl;
    }
    Tensor out = Tensor::scalar(total / R);
    if (!std::isfinite(out.item())) throw NumericError("non-finite kl_from_logits");
    if (detail::track(g, {&logits})) {
        out.set_requires_grad(true);
        auto li = logits.impl(), qi = q.impl(), oi = out.impl();
        g->record(oi, [li, qi, oi, row_kl, R, V] {
            if (!li->requires_grad) return;
            li->ensure_grad();
            const float go = oi->grad[0] / static_cast<float>(R);
            std::vector<float> p(V);
            for (int r = 0; r < R; ++r) {
                const float* z = li->data.data() + static_cast<long>(r) * V;
                const float* qr = qi->data.data() + static_cast<long>(r) * V;
                std::copy_n(z, V, p.data());
                softmax_rows(p.data(), 1, V);
                float* gz = li->grad.data() + static_cast<long>(r) * V;
                const double klr = (*row_kl)[static_cast<size_t>(r)];
                for (int j = 0; j < V; ++j) {
                    if (p[j] <= 0.f) continue;
                    const double qj =
                        std::clamp(static_cast<double>(qr[j]), 1e-7, 1.0 - 1e-7);
                    const double lpj = std::log(static_cast<double>(p[j]));
                    gz[j] += go * static_cast<float>(p[j] * (lpj - std::log(qj) - klr));
                }
            }
        });
    }
    return out;
}

// Mean binary cross-entropy against a constant 0/1 target, computed from
// logits in log-space. Per-element loss is capped at -log(1e-7).
inline Tensor logistic_loss(const Tensor& z, bool target_one, Graph* g) {
    const long n = z.numel();
    if (n == 0) throw DataError("logistic_loss: empty input");
    constexpr double kCap = 16.11809565095832;  // -log(1e-7)
    double total = 0.0;
    for (long i = 0; i < n; ++i) {
        const double zi = z.data()[static_cast<size_t>(i)];
        const double l = target_one ? softplus_f64(-zi) : softplus_f64(zi);
        total += std::min(l, kCap);
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    if (detail::track(g, {&z})) {
        out.set_requires_grad(true);
        auto zi = z.impl(), oi = out.impl();
        g->record(oi, [zi, oi, n, target_one] {
            if (!zi->requires_grad) return;
            zi->ensure_grad();
            const float go = oi->grad[0] / static_cast<float>(n);
            for (long i = 0; i < n; ++i) {
                const float s = sigmoid_scalar(zi->data[static_cast<size_t>(i)]);
                zi->grad[static_cast<size_t>(i)] += go * (target_one ? s - 1.0f : s);
            }
        });
    }
    return out;
}

// Inference-only helpers (no graph participation).

inline int argmax_row(const float* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

inline double mean_sq_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimError("mean_sq_diff: shape mismatch");
    double s = 0.0;
    for (long i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data()[static_cast<size_t>(i)]) -
                         b.data()[static_cast<size_t>(i)];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

}  // namespace eelm
