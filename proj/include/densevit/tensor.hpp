#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "densevit/random.hpp"

namespace densevit {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Trailing-dimension broadcast of two shapes; throws when incompatible.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        check(da == db || da == 1 || db == 1,
              "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` viewed as shape `out` (size-1 dims and missing leading dims
// get stride 0), used to index a broadcast operand by the output index.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> st(out.size(), 0);
    auto natural = row_major_strides(s);
    const std::size_t off = out.size() - s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : natural[i];
    return st;
}

} // namespace detail

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;   // allocated lazily during backward
    bool requires_grad = false; // leaf flag; set only on parameters
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return value.size(); }
    bool needs_grad() const { return requires_grad || !parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantic handle to a node of the computation graph. Operations on
// tensors whose inputs participate in gradient tracking record a backward
// closure; `backward(loss)` replays them in reverse topological order.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    Tensor(const Shape& shape, std::vector<double> data, bool requires_grad = false) {
        detail::check(detail::numel(shape) == data.size(),
                      "data length " + std::to_string(data.size()) + " does not match shape " +
                          detail::shape_str(shape));
        node_ = std::make_shared<TensorNode>();
        node_->shape = shape;
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(detail::numel(shape), 0.0), requires_grad);
    }
    static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(detail::numel(shape), v), requires_grad);
    }
    static Tensor ones(const Shape& shape, bool requires_grad = false) {
        return full(shape, 1.0, requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        std::vector<double> d(detail::numel(shape));
        for (double& x : d) x = rng.normal(0.0, stddev);
        return Tensor(shape, std::move(d), requires_grad);
    }
    static Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi,
                               bool requires_grad = false) {
        std::vector<double> d(detail::numel(shape));
        for (double& x : d) x = rng.uniform(lo, hi);
        return Tensor(shape, std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }

    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& mutable_values() { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    double item() const {
        detail::check(numel() == 1, "item() requires a single-element tensor, got " +
                                        detail::shape_str(shape()));
        return node_->value[0];
    }

    double at(std::size_t i) const { return node_->value[i]; }

    // Copy with the graph cut; gradients never flow through the result.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

inline bool track(const Tensor& t) { return t.node()->needs_grad(); }

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (trailing-dimension broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    const std::size_t n = numel(out_shape);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const auto so = row_major_strides(out_shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(n);

    const bool plain = a.shape() == b.shape();
    if (plain) {
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        const std::size_t r = out_shape.size();
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t rem = i, ia = 0, ib = 0;
            for (std::size_t d = 0; d < r; ++d) {
                const std::size_t idx = rem / so[d];
                rem %= so[d];
                ia += idx * sa[d];
                ib += idx * sb[d];
            }
            out[i] = fwd(av[ia], bv[ib]);
        }
    }

    auto node = make_node(out_shape, std::move(out));
    if (track(a) || track(b)) {
        auto an = a.node(), bn = b.node();
        node->parents = {an, bn};
        node->backward_fn = [an, bn, sa, sb, so, plain, bwd](TensorNode& self) {
            const std::size_t n2 = self.value.size();
            if (an->needs_grad()) an->ensure_grad();
            if (bn->needs_grad()) bn->ensure_grad();
            const std::size_t r = self.shape.size();
            for (std::size_t i = 0; i < n2; ++i) {
                std::size_t ia = i, ib = i;
                if (!plain) {
                    std::size_t rem = i;
                    ia = ib = 0;
                    for (std::size_t d = 0; d < r; ++d) {
                        const std::size_t idx = rem / so[d];
                        rem %= so[d];
                        ia += idx * sa[d];
                        ib += idx * sb[d];
                    }
                }
                double da = 0.0, db = 0.0;
                bwd(self.grad[i], an->value[ia], bn->value[ib], da, db);
                if (an->needs_grad()) an->grad[ia] += da;
                if (bn->needs_grad()) bn->grad[ib] += db;
            }
        };
    }
    return Tensor(node);
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);

    auto node = make_node(a.shape(), std::move(out));
    if (track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, bwd](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.value.size(); ++i)
                an->grad[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
        };
    }
    return Tensor(node);
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double& da, double& db) { da = g; db = g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double& da, double& db) { da = g; db = -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& da, double& db) { da = g * y; db = g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

// Elementwise Huber with delta = 1 on the difference a-b.
inline Tensor smooth_l1(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b,
        [](double x, double y) {
            const double d = x - y;
            return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
        },
        [](double g, double x, double y, double& da, double& db) {
            const double d = x - y;
            const double gd = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
            da = g * gd;
            db = -g * gd;
        });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    return detail::unary_op(
        a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                       : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sin(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

// Exact GELU, x * Phi(x) with the Gaussian CDF.
inline Tensor gelu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            return cdf + x * pdf;
        });
}

// log(1 + e^x), stable; gradient is sigmoid(x).
inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

// Gradient is 1 strictly inside [lo, hi] (inclusive), 0 outside.
inline Tensor clip(const Tensor& a, double lo, double hi) {
    return detail::unary_op(
        a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto node = detail::make_node(Shape{1}, {s});
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an](TensorNode& self) {
            an->ensure_grad();
            const double g = self.grad[0];
            for (double& gv : an->grad) gv += g;
        };
    }
    return Tensor(node);
}

inline Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.numel())); }

inline Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false) {
    detail::check(axis < a.rank(), "sum_axis: axis out of range for " +
                                       detail::shape_str(a.shape()));
    const Shape& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t ax = s[axis];

    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<double> out(outer * inner, 0.0);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < ax; ++k) {
            const double* src = av.data() + (o * ax + k) * inner;
            double* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }

    auto node = detail::make_node(out_shape, std::move(out));
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, outer, inner, ax](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < ax; ++k) {
                    double* dst = an->grad.data() + (o * ax + k) * inner;
                    const double* src = self.grad.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        };
    }
    return Tensor(node);
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false) {
    return sum_axis(a, axis, keepdim) * (1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    detail::check(detail::numel(shape) == a.numel(),
                  "reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                      detail::shape_str(shape));
    auto node = detail::make_node(shape, a.values());
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    detail::check(axes.size() == a.rank(), "permute: axes length must equal rank");
    const Shape& s = a.shape();
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = s[axes[i]];

    const auto in_strides = detail::row_major_strides(s);
    const auto out_strides = detail::row_major_strides(out_shape);
    const std::size_t n = a.numel();
    const std::size_t r = axes.size();
    // out[i0,...] = in[axes-permuted index]; build in-index per out linear index
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[axes[i]];

    std::vector<double> out(n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, src = 0;
        for (std::size_t d = 0; d < r; ++d) {
            src += (rem / out_strides[d]) * src_stride[d];
            rem %= out_strides[d];
        }
        out[i] = av[src];
    }

    auto node = detail::make_node(out_shape, std::move(out));
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, out_strides, src_stride](TensorNode& self) {
            an->ensure_grad();
            const std::size_t r2 = out_strides.size();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                std::size_t rem = i, src = 0;
                for (std::size_t d = 0; d < r2; ++d) {
                    src += (rem / out_strides[d]) * src_stride[d];
                    rem %= out_strides[d];
                }
                an->grad[src] += self.grad[i];
            }
        };
    }
    return Tensor(node);
}

// Swap the last two axes.
inline Tensor transpose(const Tensor& a) {
    detail::check(a.rank() >= 2, "transpose requires rank >= 2");
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[a.rank() - 2], axes[a.rank() - 1]);
    return permute(a, axes);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    detail::check(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    detail::check(axis < s0.size(), "concat: axis out of range");
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        detail::check(p.rank() == s0.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d)
            detail::check(d == axis || p.shape()[d] == s0[d],
                          "concat: shapes disagree off-axis: " + detail::shape_str(s0) + " vs " +
                              detail::shape_str(p.shape()));
        axis_total += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<double> out(detail::numel(out_shape));
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t pa = p.shape()[axis];
        const auto& pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pv.begin() + o * pa * inner, pv.begin() + (o + 1) * pa * inner,
                      out.begin() + (o * axis_total + offset) * inner);
        offset += pa;
    }

    auto node = detail::make_node(out_shape, std::move(out));
    bool any_track = false;
    for (const Tensor& p : parts) any_track = any_track || detail::track(p);
    if (any_track) {
        std::vector<std::shared_ptr<TensorNode>> ps;
        std::vector<std::size_t> widths;
        for (const Tensor& p : parts) {
            ps.push_back(p.node());
            widths.push_back(p.shape()[axis]);
        }
        node->parents = ps;
        node->backward_fn = [ps, widths, outer, inner, axis_total](TensorNode& self) {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                const std::size_t pa = widths[pi];
                if (ps[pi]->needs_grad()) {
                    ps[pi]->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = self.grad.data() + (o * axis_total + off) * inner;
                        double* dst = ps[pi]->grad.data() + o * pa * inner;
                        for (std::size_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                off += pa;
            }
        };
    }
    return Tensor(node);
}

// Contiguous slice [start, start+len) along `axis`.
inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a.shape();
    detail::check(axis < s.size(), "narrow: axis out of range");
    detail::check(start + len <= s[axis], "narrow: slice out of bounds for " +
                                              detail::shape_str(s));
    Shape out_shape = s;
    out_shape[axis] = len;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t ax = s[axis];

    std::vector<double> out(detail::numel(out_shape));
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(av.begin() + (o * ax + start) * inner, av.begin() + (o * ax + start + len) * inner,
                  out.begin() + o * len * inner);

    auto node = detail::make_node(out_shape, std::move(out));
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, outer, inner, ax, start, len](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = self.grad.data() + o * len * inner;
                double* dst = an->grad.data() + (o * ax + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return Tensor(node);
}

// Split along `axis` at the midpoint into two equal halves.
inline std::pair<Tensor, Tensor> split_half(const Tensor& a, std::size_t axis) {
    detail::check(a.shape()[axis] % 2 == 0, "split_half: axis extent " +
                                                std::to_string(a.shape()[axis]) + " is odd");
    const std::size_t h = a.shape()[axis] / 2;
    return {narrow(a, axis, 0, h), narrow(a, axis, h, h)};
}

// Broadcast to a larger shape (numpy semantics); gradient sums back.
inline Tensor expand(const Tensor& a, const Shape& shape) {
    const Shape check_shape = detail::broadcast_shapes(a.shape(), shape);
    detail::check(check_shape == shape, "expand: cannot expand " + detail::shape_str(a.shape()) +
                                            " to " + detail::shape_str(shape));
    const auto sa = detail::broadcast_strides(a.shape(), shape);
    const auto so = detail::row_major_strides(shape);
    const std::size_t n = detail::numel(shape);
    const std::size_t r = shape.size();

    std::vector<double> out(n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, src = 0;
        for (std::size_t d = 0; d < r; ++d) {
            src += (rem / so[d]) * sa[d];
            rem %= so[d];
        }
        out[i] = av[src];
    }

    auto node = detail::make_node(shape, std::move(out));
    if (detail::track(a)) {
        auto an = a.node();
        node->parents = {an};
        node->backward_fn = [an, sa, so, r](TensorNode& self) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                std::size_t rem = i, src = 0;
                for (std::size_t d = 0; d < r; ++d) {
                    src += (rem / so[d]) * sa[d];
                    rem %= so[d];
                }
                an->grad[src] += self.grad[i];
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// matmul (batched over leading dims; a 2-D operand broadcasts across batches)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check(a.rank() >= 2 && b.rank() >= 2, "matmul requires rank >= 2 operands");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const std::size_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    const std::size_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    detail::check(K == Kb, "matmul: inner dimensions disagree: " + detail::shape_str(sa) +
                               " x " + detail::shape_str(sb));

    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    detail::check(batch_a.empty() || batch_b.empty() || batch_a == batch_b,
                  "matmul: batch dims disagree: " + detail::shape_str(sa) + " x " +
                      detail::shape_str(sb));
    const Shape batch = batch_a.empty() ? batch_b : batch_a;
    const std::size_t nb = detail::numel(batch);
    const bool a_batched = !batch_a.empty();
    const bool b_batched = !batch_b.empty();

    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);

    std::vector<double> out(nb * M * N, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t bi = 0; bi < nb; ++bi) {
        const double* A = av.data() + (a_batched ? bi * M * K : 0);
        const double* B = bv.data() + (b_batched ? bi * K * N : 0);
        double* C = out.data() + bi * M * N;
        for (std::size_t m = 0; m < M; ++m) {
            const double* Am = A + m * K;
            double* Cm = C + m * N;
            for (std::size_t k = 0; k < K; ++k) {
                const double amk = Am[k];
                const double* Bk = B + k * N;
                for (std::size_t n = 0; n < N; ++n) Cm[n] += amk * Bk[n];
            }
        }
    }

    auto node = detail::make_node(out_shape, std::move(out));
    if (detail::track(a) || detail::track(b)) {
        auto an = a.node(), bn = b.node();
        node->parents = {an, bn};
        node->backward_fn = [an, bn, nb, M, K, N, a_batched, b_batched](TensorNode& self) {
            const bool ga = an->needs_grad();
            const bool gb = bn->needs_grad();
            if (ga) an->ensure_grad();
            if (gb) bn->ensure_grad();
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const double* A = an->value.data() + (a_batched ? bi * M * K : 0);
                const double* B = bn->value.data() + (b_batched ? bi * K * N : 0);
                const double* G = self.grad.data() + bi * M * N;
                double* dA = ga ? an->grad.data() + (a_batched ? bi * M * K : 0) : nullptr;
                double* dB = gb ? bn->grad.data() + (b_batched ? bi * K * N : 0) : nullptr;
                if (ga) {
                    // dA[m,k] += sum_n G[m,n] * B[k,n]
                    for (std::size_t m = 0; m < M; ++m) {
                        const double* Gm = G + m * N;
                        double* dAm = dA + m * K;
                        for (std::size_t k = 0; k < K; ++k) {
                            const double* Bk = B + k * N;
                            double acc = 0.0;
                            for (std::size_t n = 0; n < N; ++n) acc += Gm[n] * Bk[n];
                            dAm[k] += acc;
                        }
                    }
                }
                if (gb) {
                    // dB[k,n] += sum_m A[m,k] * G[m,n]
                    for (std::size_t m = 0; m < M; ++m) {
                        const double* Am = A + m * K;
                        const double* Gm = G + m * N;
                        for (std::size_t k = 0; k < K; ++k) {
                            const double amk = Am[k];
                            double* dBk = dB + k * N;
                            for (std::size_t n = 0; n < N; ++n) dBk[n] += amk * Gm[n];
                        }
                    }
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Layer norm over the last axis, then affine gamma/beta. eps floors the
// standard deviation (guards constant vectors); for non-degenerate input the
// normalized output has mean 0 and variance exactly 1 up to rounding.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    const Shape& s = x.shape();
    detail::check(!s.empty() && s.back() > 0, "layer_norm: empty last axis");
    const std::size_t d = s.back();
    detail::check(gamma.numel() == d && beta.numel() == d,
                  "layer_norm: gamma/beta length " + std::to_string(gamma.numel()) + "/" +
                      std::to_string(beta.numel()) + " does not match last axis " +
                      std::to_string(d));
    const std::size_t rows = x.numel() / d;

    std::vector<double> out(x.numel());
    std::vector<double> rstd(rows), xhat(x.numel());
    std::vector<char> floored(rows);
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(d);
        const double sd = std::sqrt(var);
        floored[r] = sd <= eps;
        const double rs = 1.0 / std::max(sd, eps);
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (xr[i] - mu) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * gv[i] + bv[i];
        }
    }

    auto node = detail::make_node(s, std::move(out));
    if (detail::track(x) || detail::track(gamma) || detail::track(beta)) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        node->parents = {xn, gn, bn};
        node->backward_fn = [xn, gn, bn, rows, d, rstd = std::move(rstd),
                             xhat = std::move(xhat), floored = std::move(floored)](TensorNode& self) {
            const bool gx = xn->needs_grad(), gg = gn->needs_grad(), gb = bn->needs_grad();
            if (gx) xn->ensure_grad();
            if (gg) gn->ensure_grad();
            if (gb) bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (gg || gb) {
                    for (std::size_t i = 0; i < d; ++i) {
                        if (gg) gn->grad[i] += g[i] * xh[i];
                        if (gb) bn->grad[i] += g[i];
                    }
                }
                if (gx) {
                    // dxhat = g * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat));
                    // the xhat term comes from d(rstd)/d(var) and vanishes on the floored branch
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = g[i] * gn->value[i];
                        m1 += dxh;
                        m2 += dxh * xh[i];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    if (floored[r]) m2 = 0.0;
                    double* dx = xn->grad.data() + r * d;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dxh = g[i] * gn->value[i];
                        dx[i] += rstd[r] * (dxh - m1 - xh[i] * m2);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

namespace detail {

template <bool LogSpace>
Tensor softmax_impl(const Tensor& x, std::size_t axis) {
    check(axis < x.rank(), "softmax: axis out of range");
    const Shape& s = x.shape();
    check(s[axis] > 0, "softmax: empty axis");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t ax = s[axis];

    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * ax * inner + in;
            double mx = xv[base];
            for (std::size_t k = 1; k < ax; ++k) mx = std::max(mx, xv[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < ax; ++k) z += std::exp(xv[base + k * inner]- mx);
            if constexpr (LogSpace) {
                const double lz = std::log(z);
                for (std::size_t k = 0; k < ax; ++k)
                    out[base + k * inner] = xv[base + k * inner] - mx - lz;
            } else {
                for (std::size_t k = 0; k < ax; ++k)
                    out[base + k * inner] = std::exp(xv[base + k * inner] - mx) / z;
            }
        }

    auto node = make_node(s, std::move(out));
    if (track(x)) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, outer, inner, ax](TensorNode& self) {
            xn->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * ax * inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < ax; ++k) {
                        const std::size_t i = base + k * inner;
                        dot += LogSpace ? self.grad[i] : self.grad[i] * self.value[i];
                    }
                    for (std::size_t k = 0; k < ax; ++k) {
                        const std::size_t i = base + k * inner;
                        if constexpr (LogSpace)
                            xn->grad[i] += self.grad[i] - std::exp(self.value[i]) * dot;
                        else
                            xn->grad[i] += self.value[i] * (self.grad[i] - dot);
                    }
                }
        };
    }
    return Tensor(node);
}

} // namespace detail

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    return detail::softmax_impl<false>(x, axis);
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
    return detail::softmax_impl<true>(x, axis);
}

// ---------------------------------------------------------------------------
// conv / pool (cross-correlation semantics)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
    detail::check(x.rank() == 4, "conv2d: input must be (B,C,H,W), got " +
                                     detail::shape_str(x.shape()));
    detail::check(w.rank() == 4, "conv2d: kernel must be (Cout,Cin,kh,kw), got " +
                                     detail::shape_str(w.shape()));
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    detail::check(w.dim(1) == Cin, "conv2d: channel mismatch: input " +
                                       detail::shape_str(x.shape()) + " vs kernel " +
                                       detail::shape_str(w.shape()));
    detail::check(bias.numel() == Cout, "conv2d: bias length must equal Cout");
    detail::check(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than input");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;

    std::vector<double> out(B * Cout * Ho * Wo);
    const auto& xv = x.values();
    const auto& wv = w.values();
    const auto& bv = bias.values();
    const std::ptrdiff_t ip = static_cast<std::ptrdiff_t>(pad);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < Cout; ++co) {
            double* o0 = out.data() + ((b * Cout + co) * Ho) * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) o0[i] = bv[co];
            for (std::size_t ci = 0; ci < Cin; ++ci) {
                const double* xp = xv.data() + ((b * Cin + ci) * H) * W;
                const double* wp = wv.data() + ((co * Cin + ci) * kh) * kw;
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double wk = wp[ky * kw + kx];
                        if (wk == 0.0) continue;
                        for (std::size_t ho = 0; ho < Ho; ++ho) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(ho * stride + ky) - ip;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const double* xrow = xp + iy * W;
                            double* orow = o0 + ho * Wo;
                            for (std::size_t wo = 0; wo < Wo; ++wo) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(wo * stride + kx) - ip;
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                orow[wo] += wk * xrow[ix];
                            }
                        }
                    }
            }
        }

    auto node = detail::make_node(Shape{B, Cout, Ho, Wo}, std::move(out));
    if (detail::track(x) || detail::track(w) || detail::track(bias)) {
        auto xn = x.node(), wn = w.node(), bn = bias.node();
        node->parents = {xn, wn, bn};
        node->backward_fn = [xn, wn, bn, B, Cin, Cout, H, W, kh, kw, Ho, Wo, stride,
                             ip](TensorNode& self) {
            const bool gx = xn->needs_grad(), gw = wn->needs_grad(), gb = bn->needs_grad();
            if (gx) xn->ensure_grad();
            if (gw) wn->ensure_grad();
            if (gb) bn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t co = 0; co < Cout; ++co) {
                    const double* g0 = self.grad.data() + ((b * Cout + co) * Ho) * Wo;
                    if (gb)
                        for (std::size_t i = 0; i < Ho * Wo; ++i) bn->grad[co] += g0[i];
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const double* xp = xn->value.data() + ((b * Cin + ci) * H) * W;
                        double* dxp = gx ? xn->grad.data() + ((b * Cin + ci) * H) * W : nullptr;
                        const double* wp = wn->value.data() + ((co * Cin + ci) * kh) * kw;
                        double* dwp = gw ? wn->grad.data() + ((co * Cin + ci) * kh) * kw : nullptr;
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const double wk = wp[ky * kw + kx];
                                double dwk = 0.0;
                                for (std::size_t ho = 0; ho < Ho; ++ho) {
                                    const std::ptrdiff_t iy =
                                        static_cast<std::ptrdiff_t>(ho * stride + ky) - ip;
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                    const double* grow = g0 + ho * Wo;
                                    const double* xrow = xp + iy * W;
                                    double* dxrow = gx ? dxp + iy * W : nullptr;
                                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                                        const std::ptrdiff_t ix =
                                            static_cast<std::ptrdiff_t>(wo * stride + kx) - ip;
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        if (gw) dwk += grow[wo] * xrow[ix];
                                        if (gx) dxrow[ix] += grow[wo] * wk;
                                    }
                                }
                                if (gw) dwp[ky * kw + kx] += dwk;
                            }
                    }
                }
        };
    }
    return Tensor(node);
}

inline Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t stride = 0) {
    if (stride == 0) stride = k;
    detail::check(x.rank() == 4, "avg_pool2d: input must be (B,C,H,W), got " +
                                     detail::shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::check(H >= k && W >= k, "avg_pool2d: window larger than input");
    const std::size_t Ho = (H - k) / stride + 1;
    const std::size_t Wo = (W - k) / stride + 1;
    const double inv = 1.0 / static_cast<double>(k * k);

    std::vector<double> out(B * C * Ho * Wo, 0.0);
    const auto& xv = x.values();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* xp = xv.data() + bc * H * W;
        double* op = out.data() + bc * Ho * Wo;
        for (std::size_t ho = 0; ho < Ho; ++ho)
            for (std::size_t wo = 0; wo < Wo; ++wo) {
                double s = 0.0;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx)
                        s += xp[(ho * stride + ky) * W + wo * stride + kx];
                op[ho * Wo + wo] = s * inv;
            }
    }

    auto node = detail::make_node(Shape{B, C, Ho, Wo}, std::move(out));
    if (detail::track(x)) {
        auto xn = x.node();
        node->parents = {xn};
        node->backward_fn = [xn, B, C, H, W, Ho, Wo, k, stride, inv](TensorNode& self) {
            xn->ensure_grad();
            for (std::size_t bc = 0; bc < B * C; ++bc) {
                double* dxp = xn->grad.data() + bc * H * W;
                const double* gp = self.grad.data() + bc * Ho * Wo;
                for (std::size_t ho = 0; ho < Ho; ++ho)
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const double g = gp[ho * Wo + wo] * inv;
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx)
                                dxp[(ho * stride + ky) * W + wo * stride + kx] += g;
                    }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Every requires_grad tensor reachable
// through the recorded graph receives its accumulated gradient.
inline void backward(const Tensor& loss) {
    detail::check(loss.numel() == 1,
                  "backward: loss must be scalar, got " + detail::shape_str(loss.shape()));
    TensorNode* root = loss.node().get();

    // iterative post-order DFS
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            TensorNode* p = node->parents[child++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order)
        if (n->needs_grad()) n->ensure_grad();
    root->grad.assign(1, 1.0);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

} // namespace densevit
