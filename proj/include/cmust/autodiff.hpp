#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cmust/ops.hpp"
#include "cmust/tensor.hpp"

namespace cmust {

// Reverse-mode autodiff over Tensor-valued nodes. A graph is built per forward
// pass and discarded after backward(); ops on constant inputs record nothing,
// so loss-only evaluation (finite differencing) carries no tape overhead.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

struct Var {
    NodePtr node;

    const Tensor& value() const { return node->value; }
    const Tensor& grad() const { return node->grad; }
    const Shape& shape() const { return node->value.shape; }
    std::size_t size() const { return node->value.size(); }
    bool requires_grad() const { return node->requires_grad; }
};

inline Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return Var{std::move(n)};
}

inline Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var{std::move(n)};
}

namespace detail {

inline Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> back) {
    require_finite(value, name);
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const Var& p : parents) rg = rg || p.node->requires_grad;
    if (rg) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (Var& p : parents) n->parents.push_back(std::move(p.node));
        n->backward = std::move(back);
    }
    return Var{std::move(n)};
}

}  // namespace detail

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return detail::make_op("add", std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            Tensor& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (double& v : out.data) v *= c;
    return detail::make_op("scale", std::move(out), {a}, [c](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return detail::make_op("relu", std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const Tensor& x = p.value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) g[i] += self.grad[i];
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = sigmoid_scalar(v);
    return detail::make_op("sigmoid", std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const Tensor& y = self.value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (1.0 - y[i]);
    });
}

// ---- linear algebra ----

// x[..., K] times w[K, N] -> [..., N]
inline Var matmul(const Var& x, const Var& w) {
    if (w.shape().size() != 2 || x.value().last_dim() != w.shape()[0])
        throw shape_error("matmul: inner dimensions " + shape_str(x.shape()) + " x " +
                          shape_str(w.shape()));
    std::size_t m = x.value().rows(), k = w.shape()[0], n = w.shape()[1];
    Shape out_shape = x.shape();
    out_shape.back() = n;
    Tensor out = Tensor::zeros(std::move(out_shape));
    gemm(x.value().ptr(), w.value().ptr(), out.ptr(), m, k, n);
    return detail::make_op("matmul", std::move(out), {x, w}, [m, k, n](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        if (px.requires_grad)
            gemm_nt(self.grad.ptr(), pw.value.ptr(), px.ensure_grad().ptr(), m, n, k, true);
        if (pw.requires_grad)
            gemm_tn(px.value.ptr(), self.grad.ptr(), pw.ensure_grad().ptr(), m, k, n, true);
    });
}

// broadcast-add b[N] over the rows of x[..., N]
inline Var add_bias(const Var& x, const Var& b) {
    std::size_t n = x.value().last_dim();
    if (b.shape().size() != 1 || b.shape()[0] != n)
        throw shape_error("add_bias: bias " + shape_str(b.shape()) + " for " +
                          shape_str(x.shape()));
    std::size_t m = x.value().rows();
    Tensor out = x.value();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b.value()[j];
    return detail::make_op("add_bias", std::move(out), {x, b}, [m, n](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) {
            Tensor& g = px.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
        }
    });
}

// batched matmul: a[G,L,K] x b[G,K,M] -> [G,L,M]
inline Var bmm(const Var& a, const Var& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        throw shape_error("bmm: " + shape_str(sa) + " x " + shape_str(sb));
    std::size_t g = sa[0], l = sa[1], k = sa[2], m = sb[2];
    Tensor out = Tensor::zeros({g, l, m});
    for (std::size_t i = 0; i < g; ++i)
        gemm(a.value().ptr() + i * l * k, b.value().ptr() + i * k * m, out.ptr() + i * l * m, l, k,
             m);
    return detail::make_op("bmm", std::move(out), {a, b}, [g, l, k, m](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        for (std::size_t i = 0; i < g; ++i) {
            const double* gc = self.grad.ptr() + i * l * m;
            if (pa.requires_grad)
                gemm_nt(gc, pb.value.ptr() + i * k * m, pa.ensure_grad().ptr() + i * l * k, l, m, k,
                        true);
            if (pb.requires_grad)
                gemm_tn(pa.value.ptr() + i * l * k, gc, pb.ensure_grad().ptr() + i * k * m, l, k, m,
                        true);
        }
    });
}

// batched matmul with transposed rhs: a[G,L,K] x b[G,M,K]^T -> [G,L,M]
inline Var bmm_nt(const Var& a, const Var& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
        throw shape_error("bmm_nt: " + shape_str(sa) + " x " + shape_str(sb));
    std::size_t g = sa[0], l = sa[1], k = sa[2], m = sb[1];
    Tensor out = Tensor::zeros({g, l, m});
    for (std::size_t i = 0; i < g; ++i)
        gemm_nt(a.value().ptr() + i * l * k, b.value().ptr() + i * m * k, out.ptr() + i * l * m, l,
                k, m);
    return detail::make_op("bmm_nt", std::move(out), {a, b}, [g, l, k, m](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        for (std::size_t i = 0; i < g; ++i) {
            const double* gs = self.grad.ptr() + i * l * m;
            if (pa.requires_grad)
                gemm(gs, pb.value.ptr() + i * m * k, pa.ensure_grad().ptr() + i * l * k, l, m, k,
                     true);
            if (pb.requires_grad)
                gemm_tn(gs, pa.value.ptr() + i * l * k, pb.ensure_grad().ptr() + i * m * k, l, m, k,
                        true);
        }
    });
}

// ---- shape ops ----

inline Var reshape(const Var& x, Shape s) {
    if (numel(s) != x.size())
        throw shape_error("reshape: " + shape_str(x.shape()) + " to " + shape_str(s));
    Tensor out(std::move(s), x.value().data);
    return detail::make_op("reshape", std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

namespace detail {
inline void swap_axes12(const Tensor& in, Tensor& out) {
    std::size_t a = in.shape[0], b = in.shape[1], c = in.shape[2], d = in.shape[3];
    const double* src = in.ptr();
    double* dst = out.ptr();
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t k = 0; k < c; ++k) {
                const double* s = src + ((i * b + j) * c + k) * d;
                double* t = dst + ((i * c + k) * b + j) * d;
                for (std::size_t l = 0; l < d; ++l) t[l] = s[l];
            }
}
}  // namespace detail

// [A,B,C,D] -> [A,C,B,D]
inline Var transpose12(const Var& x) {
    if (x.shape().size() != 4) throw shape_error("transpose12: rank-4 input required");
    const Shape& s = x.shape();
    Tensor out = Tensor::zeros({s[0], s[2], s[1], s[3]});
    detail::swap_axes12(x.value(), out);
    return detail::make_op("transpose12", std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor back = Tensor::zeros(p.value.shape);
        detail::swap_axes12(self.grad, back);
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
    });
}

inline Var slice_last(const Var& x, std::size_t offset, std::size_t width) {
    std::size_t d = x.value().last_dim();
    if (offset + width > d)
        throw shape_error("slice_last: [" + std::to_string(offset) + "," +
                          std::to_string(offset + width) + ") out of width " + std::to_string(d));
    std::size_t m = x.value().rows();
    Shape s = x.shape();
    s.back() = width;
    Tensor out = Tensor::zeros(std::move(s));
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < width; ++j) out[r * width + j] = x.value()[r * d + offset + j];
    return detail::make_op("slice_last", std::move(out), {x}, [m, d, offset, width](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < width; ++j)
                g[r * d + offset + j] += self.grad[r * width + j];
    });
}

inline Var concat_last(const std::vector<Var>& parts) {
    if (parts.empty()) throw shape_error("concat_last: no inputs");
    std::size_t m = parts[0].value().rows();
    Shape lead = parts[0].shape();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const Var& p : parts) {
        Shape s = p.shape();
        s.back() = 0;
        Shape l0 = lead;
        l0.back() = 0;
        if (s != l0) throw shape_error("concat_last: leading dimensions differ");
        widths.push_back(p.value().last_dim());
        total += widths.back();
    }
    Shape out_shape = lead;
    out_shape.back() = total;
    Tensor out = Tensor::zeros(std::move(out_shape));
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < widths[k]; ++j)
                out[r * total + off + j] = v[r * widths[k] + j];
        off += widths[k];
    }
    return detail::make_op("concat_last", std::move(out), parts, [m, total, widths](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            if (p.requires_grad) {
                Tensor& g = p.ensure_grad();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j)
                        g[r * widths[k] + j] += self.grad[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

// ---- broadcasts ----

// x[B,T,d] -> [B,T,N,d]
inline Var tile_axis2(const Var& x, std::size_t n) {
    if (x.shape().size() != 3) throw shape_error("tile_axis2: rank-3 input required");
    std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
    Tensor out = Tensor::zeros({b, t, n, d});
    for (std::size_t r = 0; r < b * t; ++r)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) out[(r * n + i) * d + j] = x.value()[r * d + j];
    return detail::make_op("tile_axis2", std::move(out), {x}, [b, t, n, d](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t r = 0; r < b * t; ++r)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[(r * n + i) * d + j];
    });
}

// x[N,d] -> [B,T,N,d]
inline Var tile_bt(const Var& x, std::size_t b, std::size_t t) {
    if (x.shape().size() != 2) throw shape_error("tile_bt: rank-2 input required");
    std::size_t n = x.shape()[0], d = x.shape()[1];
    Tensor out = Tensor::zeros({b, t, n, d});
    for (std::size_t r = 0; r < b * t; ++r)
        for (std::size_t i = 0; i < n * d; ++i) out[r * n * d + i] = x.value()[i];
    return detail::make_op("tile_bt", std::move(out), {x}, [b, t, n, d](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t r = 0; r < b * t; ++r)
            for (std::size_t i = 0; i < n * d; ++i) g[i] += self.grad[r * n * d + i];
    });
}

// x[1,d] -> [R,d]
inline Var tile_rows(const Var& x, std::size_t r) {
    if (x.shape().size() != 2 || x.shape()[0] != 1) throw shape_error("tile_rows: [1,d] required");
    std::size_t d = x.shape()[1];
    Tensor out = Tensor::zeros({r, d});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[j];
    return detail::make_op("tile_rows", std::move(out), {x}, [r, d](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
    });
}

// x[..., P, Q] + m[P, Q] broadcast over leading dims; m carries no gradient.
inline Var add_tail2(const Var& x, const Tensor& m) {
    const Shape& s = x.shape();
    if (s.size() < 2 || m.shape.size() != 2 || s[s.size() - 2] != m.shape[0] ||
        s.back() != m.shape[1])
        throw shape_error("add_tail2: " + shape_str(s) + " + " + shape_str(m.shape));
    std::size_t block = m.size();
    Tensor out = x.value();
    for (std::size_t r = 0; r < out.size() / block; ++r)
        for (std::size_t i = 0; i < block; ++i) out[r * block + i] += m[i];
    return detail::make_op("add_tail2", std::move(out), {x}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---- row lookups ----

inline Var embedding_lookup(const Var& table, const std::vector<int>& idx) {
    if (table.shape().size() != 2) throw shape_error("embedding_lookup: rank-2 table required");
    std::size_t v = table.shape()[0], d = table.shape()[1];
    for (int i : idx)
        if (i < 0 || static_cast<std::size_t>(i) >= v)
            throw shape_error("embedding_lookup: index " + std::to_string(i) + " out of [0," +
                              std::to_string(v) + ")");
    Tensor out = Tensor::zeros({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = table.value()[static_cast<std::size_t>(idx[r]) * d + j];
    return detail::make_op("embedding_lookup", std::move(out), {table}, [idx, d](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j)
                g[static_cast<std::size_t>(idx[r]) * d + j] += self.grad[r * d + j];
    });
}

// ---- normalizations ----

inline Var softmax_last(const Var& x) {
    std::size_t n = x.value().last_dim();
    if (n == 0) throw shape_error("softmax_last: empty rows");
    std::size_t m = x.value().rows();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < m; ++r)
        softmax_row(x.value().ptr() + r * n, out.ptr() + r * n, n);
    return detail::make_op("softmax_last", std::move(out), {x}, [m, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        const Tensor& y = self.value;
        for (std::size_t r = 0; r < m; ++r) {
            const double* yr = y.ptr() + r * n;
            const double* gr = self.grad.ptr() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            double* out_g = g.ptr() + r * n;
            for (std::size_t j = 0; j < n; ++j) out_g[j] += yr[j] * (gr[j] - dot);
        }
    });
}

inline Var layer_norm_last(const Var& x, const Var& gain, const Var& bias, double eps) {
    std::size_t n = x.value().last_dim();
    if (gain.shape().size() != 1 || gain.shape()[0] != n || bias.shape().size() != 1 ||
        bias.shape()[0] != n)
        throw shape_error("layer_norm_last: gain/bias width must equal feature width");
    if (eps <= 0.0) throw numeric_error("layer_norm_last: eps must be positive");
    std::size_t m = x.value().rows();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < m; ++r)
        layer_norm_row(x.value().ptr() + r * n, gain.value().ptr(), bias.value().ptr(), eps,
                       out.ptr() + r * n, n);
    return detail::make_op("layer_norm_last", std::move(out), {x, gain, bias}, [m, n,
                                                                                eps](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const Tensor& x = px.value;
        const Tensor& gv = pg.value;
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
            const double* xr = x.ptr() + r * n;
            const double* gr = self.grad.ptr() + r * n;
            double mean = 0.0;
            for (std::size_t j = 0; j < n; ++j) mean += xr[j];
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double d = xr[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            double inv = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < n; ++j) xhat[j] = (xr[j] - mean) * inv;
            if (pg.requires_grad) {
                Tensor& gg = pg.ensure_grad();
                for (std::size_t j = 0; j < n; ++j) gg[j] += gr[j] * xhat[j];
            }
            if (pb.requires_grad) {
                Tensor& gb = pb.ensure_grad();
                for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
            }
            if (px.requires_grad) {
                double mean_dx = 0.0, mean_dx_xh = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dxhat[j] = gr[j] * gv[j];
                    mean_dx += dxhat[j];
                    mean_dx_xh += dxhat[j] * xhat[j];
                }
                mean_dx /= static_cast<double>(n);
                mean_dx_xh /= static_cast<double>(n);
                Tensor& gx = px.ensure_grad();
                double* gxr = gx.ptr() + r * n;
                for (std::size_t j = 0; j < n; ++j)
                    gxr[j] += inv * (dxhat[j] - mean_dx - xhat[j] * mean_dx_xh);
            }
        }
    });
}

// ---- losses and reductions ----

inline Var huber_mean(const Var& pred, const Tensor& target, double delta) {
    require_same_shape(pred.value(), target, "huber_mean");
    if (delta <= 0.0) throw numeric_error("huber_mean: delta must be positive");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        sum += huber_term(pred.value()[i] - target[i], delta);
    std::size_t count = pred.size();
    Tensor out({}, {sum / static_cast<double>(count)});
    return detail::make_op("huber_mean", std::move(out), {pred},
                           [target, delta, count](Node& self) {
                               Node& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               Tensor& g = p.ensure_grad();
                               double up = self.grad[0] / static_cast<double>(count);
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += up * huber_term_grad(p.value[i] - target[i], delta);
                           });
}

inline Var mse_mean(const Var& pred, const Tensor& target) {
    require_same_shape(pred.value(), target, "mse_mean");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double r = pred.value()[i] - target[i];
        sum += r * r;
    }
    std::size_t count = pred.size();
    Tensor out({}, {sum / static_cast<double>(count)});
    return detail::make_op("mse_mean", std::move(out), {pred}, [target, count](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        double up = 2.0 * self.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * (p.value[i] - target[i]);
    });
}

// scalar contraction against fixed weights; used by gradient tests
inline Var dot_const(const Var& x, const Tensor& w) {
    require_same_shape(x.value(), w, "dot_const");
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sum += x.value()[i] * w[i];
    Tensor out({}, {sum});
    return detail::make_op("dot_const", std::move(out), {x}, [w](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    });
}

// ---- backward driver ----

inline void backward(const Var& root) {
    if (root.size() != 1) throw shape_error("backward: root must be scalar");
    root.node->ensure_grad();
    root.node->grad[0] = 1.0;

    // iterative post-order over the parent DAG
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node.get(), 0);
    visited.insert(root.node.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* child = node->parents[next++].get();
            if (child->requires_grad && visited.insert(child).second)
                stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.data.empty()) node->backward(*node);
    }
}

}  // namespace cmust
