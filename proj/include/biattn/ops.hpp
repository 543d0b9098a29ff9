#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "biattn/gemm.hpp"
#include "biattn/graph.hpp"
#include "biattn/tensor.hpp"

namespace biattn {

namespace testing_hooks {
/// Flips the sign of the sigmoid backward rule. Used only to prove that the
/// gradient checker catches a broken derivative.
inline bool flip_sigmoid_backward = false;
}  // namespace testing_hooks

namespace detail {

inline Graph& same_graph(Var a, Var b) {
    if (!a.graph || a.graph != b.graph) throw GraphError("operands belong to different graphs");
    return *a.graph;
}

inline void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline std::size_t check_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         to_string(shape));
    }
    return axis;
}

struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// Period of the second operand of a broadcasting binary op: b must equal a,
// match a trailing run of a's dimensions, or hold a single element.
inline std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
    const std::size_t nb = numel(b);
    if (nb == 1) return 1;
    bool ok = b.size() <= a.size();
    for (std::size_t i = 0; ok && i < b.size(); ++i) ok = b[b.size() - 1 - i] == a[a.size() - 1 - i];
    if (!ok) {
        throw ShapeError(std::string(op) + ": shape " + to_string(b) + " does not broadcast to " +
                         to_string(a));
    }
    return nb;
}

inline Tensor permute_copy(const Tensor& x, const std::vector<std::size_t>& perm) {
    const Shape& in = x.shape();
    const std::size_t rank = in.size();
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
    Shape out_shape(rank);
    std::vector<std::size_t> stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    Tensor out(out_shape);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t flat = 0; flat < out.numel(); ++flat) {
        out[flat] = x[src];
        for (std::size_t ax = rank; ax-- > 0;) {
            if (++idx[ax] < out_shape[ax]) {
                src += stride[ax];
                break;
            }
            src -= stride[ax] * (out_shape[ax] - 1);
            idx[ax] = 0;
        }
    }
    return out;
}

// cols[(ci*k*k + ky*k + kx), (b*h*w + y*w + x)] for images [b0, b0+nb).
inline void im2col(const double* x, std::size_t b0, std::size_t nb, std::size_t c, std::size_t h,
                   std::size_t w, std::size_t k, double* cols) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t hw = h * w;
    const std::size_t ncol = nb * hw;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols + ((ci * k + ky) * k + kx) * ncol;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::size_t bi = 0; bi < nb; ++bi) {
                    const double* img = x + ((b0 + bi) * c + ci) * hw;
                    double* dst = row + bi * hw;
                    for (std::size_t y = 0; y < h; ++y) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                        double* drow = dst + y * w;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
                            std::fill(drow, drow + w, 0.0);
                            continue;
                        }
                        const double* srow = img + static_cast<std::size_t>(sy) * w;
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + dx;
                            drow[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w))
                                           ? 0.0
                                           : srow[static_cast<std::size_t>(sx)];
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_acc(const double* cols, std::size_t b0, std::size_t nb, std::size_t c,
                       std::size_t h, std::size_t w, std::size_t k, double* dx) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t hw = h * w;
    const std::size_t ncol = nb * hw;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = cols + ((ci * k + ky) * k + kx) * ncol;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t ddx = static_cast<std::ptrdiff_t>(kx) - pad;
                for (std::size_t bi = 0; bi < nb; ++bi) {
                    double* img = dx + ((b0 + bi) * c + ci) * hw;
                    const double* src = row + bi * hw;
                    for (std::size_t y = 0; y < h; ++y) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        double* drow = img + static_cast<std::size_t>(sy) * w;
                        const double* srow = src + y * w;
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + ddx;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                            drow[static_cast<std::size_t>(sx)] += srow[xx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the last two axes. Leading axes must agree.
inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const Shape sa = a.shape();
    const Shape sb = b.shape();
    const auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
    };
    if (sa.size() < 2 || sa.size() != sb.size()) throw mismatch();
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
        if (sa[i] != sb[i]) throw mismatch();
    }
    const std::size_t rank = sa.size();
    const std::size_t p = sa[rank - 2], r = sa[rank - 1], s = sb[rank - 1];
    if (sb[rank - 2] != r) throw mismatch();
    const std::size_t batch = numel(sa) / (p * r);

    Shape so = sa;
    so.back() = s;
    Tensor out(so);
    const double* A = a.value().raw();
    const double* B = b.value().raw();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::gemm_acc(A + bi * p * r, false, B + bi * r * s, false, out.raw() + bi * p * s, p, r, s);
    }
    const std::size_t ia = a.id, ib = b.id;
    return g.record("matmul", std::move(out), {ia, ib}, [=](Graph& gr, std::size_t self) {
        const double* G = gr.grad(self).data();
        const double* Av = gr.value(ia).raw();
        const double* Bv = gr.value(ib).raw();
        if (gr.needs_grad(ia)) {
            double* dA = gr.grad(ia).data();
            for (std::size_t bi = 0; bi < batch; ++bi) {
                detail::gemm_acc(G + bi * p * s, false, Bv + bi * r * s, true, dA + bi * p * r, p, s, r);
            }
        }
        if (gr.needs_grad(ib)) {
            double* dB = gr.grad(ib).data();
            for (std::size_t bi = 0; bi < batch; ++bi) {
                detail::gemm_acc(Av + bi * p * r, true, G + bi * p * s, false, dB + bi * r * s, r, p, s);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layout

inline Var reshape(Var x, Shape shape) {
    Graph& g = *x.graph;
    Tensor out = x.value().reshaped(std::move(shape));
    const std::size_t ix = x.id;
    return g.record("reshape", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        detail::accumulate(gr.grad(ix), gr.grad(self));
    });
}

/// Swaps two axes.
inline Var transpose(Var x, std::size_t axis0, std::size_t axis1) {
    Graph& g = *x.graph;
    const Shape& shape = x.shape();
    detail::check_axis(shape, axis0, "transpose");
    detail::check_axis(shape, axis1, "transpose");
    std::vector<std::size_t> perm(shape.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[axis0], perm[axis1]);
    Tensor out = detail::permute_copy(x.value(), perm);
    const std::size_t ix = x.id;
    return g.record("transpose", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const Tensor& y = gr.value(self);
        Tensor gy(y.shape(), gr.grad(self));
        detail::accumulate(gr.grad(ix), detail::permute_copy(gy, perm).data());
    });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Graph& g = *parts[0].graph;
    const Shape first = parts[0].shape();
    detail::check_axis(first, axis, "concat");
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> ids, chunk;
    for (const Var& v : parts) {
        if (v.graph != &g) throw GraphError("concat: operands belong to different graphs");
        const Shape& s = v.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) {
            throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first) +
                             " along axis " + std::to_string(axis));
        }
        out_shape[axis] += s[axis];
        ids.push_back(v.id);
        chunk.push_back(detail::split_at(s, axis).len * detail::split_at(s, axis).inner);
    }
    const std::size_t outer = detail::split_at(first, axis).outer;
    Tensor out(out_shape);
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const double* src = g.value(ids[k]).raw() + o * chunk[k];
            std::copy(src, src + chunk[k], out.raw() + pos);
            pos += chunk[k];
        }
    }
    return g.record("concat", std::move(out), ids, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        std::size_t at = 0;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (gr.needs_grad(ids[k])) {
                    double* dst = gr.grad(ids[k]).data() + o * chunk[k];
                    for (std::size_t i = 0; i < chunk[k]; ++i) dst[i] += G[at + i];
                }
                at += chunk[k];
            }
        }
    });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Gathers slices along axis 0: out[i] = x[indices[i]]. Repeated indices are
/// allowed; their gradients accumulate.
inline Var index_rows(Var x, std::vector<std::size_t> indices) {
    Graph& g = *x.graph;
    const Shape& shape = x.shape();
    if (indices.empty()) throw ShapeError("index_rows: empty index list");
    const std::size_t row = numel(shape) / shape[0];
    for (std::size_t i : indices) {
        if (i >= shape[0]) {
            throw ShapeError("index_rows: index " + std::to_string(i) + " out of range for shape " +
                             to_string(shape));
        }
    }
    Shape out_shape = shape;
    out_shape[0] = indices.size();
    Tensor out(out_shape);
    const double* src = x.value().raw();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy(src + indices[r] * row, src + (indices[r] + 1) * row, out.raw() + r * row);
    }
    const std::size_t ix = x.id;
    return g.record("index_rows", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t r = 0; r < indices.size(); ++r) {
            for (std::size_t i = 0; i < row; ++i) dx[indices[r] * row + i] += G[r * row + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const std::size_t m = detail::broadcast_period(a.shape(), b.shape(), "add");
    Tensor out = a.value();
    out.set_requires_grad(false);
    const double* B = b.value().raw();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i % m];
    const std::size_t ia = a.id, ib = b.id;
    return g.record("add", std::move(out), {ia, ib}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        if (gr.needs_grad(ia)) detail::accumulate(gr.grad(ia), G);
        if (gr.needs_grad(ib)) {
            auto& db = gr.grad(ib);
            for (std::size_t i = 0; i < G.size(); ++i) db[i % m] += G[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const std::size_t m = detail::broadcast_period(a.shape(), b.shape(), "sub");
    Tensor out = a.value();
    out.set_requires_grad(false);
    const double* B = b.value().raw();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= B[i % m];
    const std::size_t ia = a.id, ib = b.id;
    return g.record("sub", std::move(out), {ia, ib}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        if (gr.needs_grad(ia)) detail::accumulate(gr.grad(ia), G);
        if (gr.needs_grad(ib)) {
            auto& db = gr.grad(ib);
            for (std::size_t i = 0; i < G.size(); ++i) db[i % m] -= G[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const std::size_t m = detail::broadcast_period(a.shape(), b.shape(), "mul");
    Tensor out = a.value();
    out.set_requires_grad(false);
    const double* B = b.value().raw();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i % m];
    const std::size_t ia = a.id, ib = b.id;
    return g.record("mul", std::move(out), {ia, ib}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* Av = gr.value(ia).raw();
        const double* Bv = gr.value(ib).raw();
        if (gr.needs_grad(ia)) {
            auto& da = gr.grad(ia);
            for (std::size_t i = 0; i < G.size(); ++i) da[i] += G[i] * Bv[i % m];
        }
        if (gr.needs_grad(ib)) {
            auto& db = gr.grad(ib);
            for (std::size_t i = 0; i < G.size(); ++i) db[i % m] += G[i] * Av[i];
        }
    });
}

inline Var scale(Var x, double factor) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    out.set_requires_grad(false);
    for (double& v : out.data()) v *= factor;
    const std::size_t ix = x.id;
    return g.record("scale", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t i = 0; i < G.size(); ++i) dx[i] += factor * G[i];
    });
}

inline Var relu(Var x) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    out.set_requires_grad(false);
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    if (g.tracking_kinks()) {
        const auto& in = x.value().data();
        for (std::size_t i = 0; i < in.size(); ++i) g.mix_kink(in[i] > 0.0 ? 2 * i + 1 : 2 * i);
    }
    const std::size_t ix = x.id;
    return g.record("relu", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* X = gr.value(ix).raw();
        auto& dx = gr.grad(ix);
        for (std::size_t i = 0; i < G.size(); ++i) {
            if (X[i] > 0.0) dx[i] += G[i];
        }
    });
}

/// Overflow-safe logistic function.
inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    out.set_requires_grad(false);
    for (double& v : out.data()) v = sigmoid_value(v);
    const std::size_t ix = x.id;
    return g.record("sigmoid", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* Y = gr.value(self).raw();
        auto& dx = gr.grad(ix);
        const double sign = testing_hooks::flip_sigmoid_backward ? -1.0 : 1.0;
        for (std::size_t i = 0; i < G.size(); ++i) dx[i] += sign * G[i] * Y[i] * (1.0 - Y[i]);
    });
}

// ---------------------------------------------------------------------------
// Normalizers and reductions

/// Softmax along an axis, computed with max subtraction.
inline Var softmax(Var x, std::size_t axis) {
    Graph& g = *x.graph;
    detail::check_axis(x.shape(), axis, "softmax");
    const auto [outer, len, inner] = detail::split_at(x.shape(), axis);
    Tensor out(x.shape());
    const double* X = x.value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, X[base + k * inner]);
            double total = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double e = std::exp(X[base + k * inner] - mx);
                out[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
        }
    }
    const std::size_t ix = x.id;
    return g.record("softmax", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* Y = gr.value(self).raw();
        auto& dx = gr.grad(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k) dot += G[base + k * inner] * Y[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    const std::size_t i = base + k * inner;
                    dx[i] += Y[i] * (G[i] - dot);
                }
            }
        }
    });
}

inline Var log_softmax(Var x, std::size_t axis) {
    Graph& g = *x.graph;
    detail::check_axis(x.shape(), axis, "log_softmax");
    const auto [outer, len, inner] = detail::split_at(x.shape(), axis);
    Tensor out(x.shape());
    const double* X = x.value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, X[base + k * inner]);
            double total = 0.0;
            for (std::size_t k = 0; k < len; ++k) total += std::exp(X[base + k * inner] - mx);
            const double lse = mx + std::log(total);
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = X[base + k * inner] - lse;
        }
    }
    const std::size_t ix = x.id;
    return g.record("log_softmax", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* Y = gr.value(self).raw();
        auto& dx = gr.grad(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double gsum = 0.0;
                for (std::size_t k = 0; k < len; ++k) gsum += G[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    const std::size_t i = base + k * inner;
                    dx[i] += G[i] - std::exp(Y[i]) * gsum;
                }
            }
        }
    });
}

inline Var sum(Var x) {
    Graph& g = *x.graph;
    double total = 0.0;
    for (double v : x.value().data()) total += v;
    const std::size_t ix = x.id;
    return g.record("sum", Tensor::scalar(total), {ix}, [=](Graph& gr, std::size_t self) {
        const double G = gr.grad(self)[0];
        for (double& d : gr.grad(ix)) d += G;
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sums out one axis. A rank-1 input reduces to shape [1].
inline Var sum_axis(Var x, std::size_t axis) {
    Graph& g = *x.graph;
    detail::check_axis(x.shape(), axis, "sum_axis");
    const auto [outer, len, inner] = detail::split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    Tensor out(out_shape);
    const double* X = x.value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
            const double* src = X + (o * len + k) * inner;
            double* dst = out.raw() + o * inner;
            for (std::size_t in = 0; in < inner; ++in) dst[in] += src[in];
        }
    }
    const std::size_t ix = x.id;
    return g.record("sum_axis", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < len; ++k) {
                for (std::size_t in = 0; in < inner; ++in) dx[(o * len + k) * inner + in] += G[o * inner + in];
            }
        }
    });
}

/// out[j] = x[j, columns[j]] for a rank-2 x.
inline Var pick(Var x, std::vector<std::size_t> columns) {
    Graph& g = *x.graph;
    const Shape& s = x.shape();
    if (s.size() != 2 || s[0] != columns.size()) {
        throw ShapeError("pick: need rank-2 input with one column per row, got " + to_string(s) + " and " +
                         std::to_string(columns.size()) + " columns");
    }
    const std::size_t n = s[1];
    Tensor out(Shape{columns.size()});
    for (std::size_t j = 0; j < columns.size(); ++j) {
        if (columns[j] >= n) throw ShapeError("pick: column " + std::to_string(columns[j]) + " out of range");
        out[j] = x.value()[j * n + columns[j]];
    }
    const std::size_t ix = x.id;
    return g.record("pick", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t j = 0; j < columns.size(); ++j) dx[j * n + columns[j]] += G[j];
    });
}

// ---------------------------------------------------------------------------
// Convolutional

/// Stride-1 cross-correlation with "same" zero padding for odd square kernels.
/// x: [b, c_in, h, w], kernel: [c_out, c_in, k, k] -> [b, c_out, h, w].
inline Var conv2d(Var x, Var kernel) {
    Graph& g = detail::same_graph(x, kernel);
    const Shape xs = x.shape();
    const Shape ks = kernel.shape();
    if (xs.size() != 4 || ks.size() != 4 || ks[2] != ks[3] || ks[2] % 2 == 0) {
        throw ShapeError("conv2d: expected input [b,c,h,w] and square odd kernel, got " + to_string(xs) +
                         " and " + to_string(ks));
    }
    if (ks[1] != xs[1]) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                         std::to_string(xs[1]));
    }
    const std::size_t b = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const std::size_t o = ks[0], k = ks[2];
    const std::size_t hw = h * w, ckk = c * k * k;
    // Images per im2col chunk, bounding the column buffer to ~4M doubles.
    const std::size_t chunk = std::max<std::size_t>(1, std::min(b, (std::size_t{1} << 22) / (ckk * hw)));

    Tensor out(Shape{b, o, h, w});
    {
        const double* X = x.value().raw();
        const double* W = kernel.value().raw();
        std::vector<double> cols, res;
        for (std::size_t b0 = 0; b0 < b; b0 += chunk) {
            const std::size_t nb = std::min(chunk, b - b0);
            const std::size_t P = nb * hw;
            cols.resize(ckk * P);
            res.assign(o * P, 0.0);
            detail::im2col(X, b0, nb, c, h, w, k, cols.data());
            detail::gemm_acc(W, false, cols.data(), false, res.data(), o, ckk, P);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                for (std::size_t oc = 0; oc < o; ++oc) {
                    std::copy_n(res.data() + oc * P + bi * hw, hw, out.raw() + ((b0 + bi) * o + oc) * hw);
                }
            }
        }
    }
    const std::size_t ix = x.id, ik = kernel.id;
    return g.record("conv2d", std::move(out), {ix, ik}, [=](Graph& gr, std::size_t self) {
        const double* G = gr.grad(self).data();
        const double* X = gr.value(ix).raw();
        const double* W = gr.value(ik).raw();
        const bool want_x = gr.needs_grad(ix), want_k = gr.needs_grad(ik);
        std::vector<double> cols, gout, dcols;
        for (std::size_t b0 = 0; b0 < b; b0 += chunk) {
            const std::size_t nb = std::min(chunk, b - b0);
            const std::size_t P = nb * hw;
            gout.resize(o * P);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                for (std::size_t oc = 0; oc < o; ++oc) {
                    std::copy_n(G + ((b0 + bi) * o + oc) * hw, hw, gout.data() + oc * P + bi * hw);
                }
            }
            if (want_k) {
                cols.resize(ckk * P);
                detail::im2col(X, b0, nb, c, h, w, k, cols.data());
                detail::gemm_acc(gout.data(), false, cols.data(), true, gr.grad(ik).data(), o, P, ckk);
            }
            if (want_x) {
                dcols.assign(ckk * P, 0.0);
                detail::gemm_acc(W, true, gout.data(), false, dcols.data(), ckk, o, P);
                detail::col2im_acc(dcols.data(), b0, nb, c, h, w, k, gr.grad(ix).data());
            }
        }
    });
}

/// 2x2 max pooling with stride 2. Ties resolve to the first cell in row-major
/// window order, which is also where the gradient goes.
inline Var maxpool2d(Var x) {
    Graph& g = *x.graph;
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("maxpool2d: expected [b,c,h,w], got " + to_string(s));
    if (s[2] % 2 != 0 || s[3] % 2 != 0) {
        throw ShapeError("maxpool2d: spatial size must be even, got " + to_string(s));
    }
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out(Shape{s[0], s[1], oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    const double* X = x.value().raw();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const std::size_t cells[4] = {
                    pl * h * w + (2 * y) * w + 2 * xx,
                    pl * h * w + (2 * y) * w + 2 * xx + 1,
                    pl * h * w + (2 * y + 1) * w + 2 * xx,
                    pl * h * w + (2 * y + 1) * w + 2 * xx + 1,
                };
                std::size_t best = cells[0];
                for (std::size_t q = 1; q < 4; ++q) {
                    if (X[cells[q]] > X[best]) best = cells[q];
                }
                const std::size_t oi = (pl * oh + y) * ow + xx;
                out[oi] = X[best];
                argmax[oi] = best;
            }
        }
    }
    if (g.tracking_kinks()) {
        for (std::size_t a : argmax) g.mix_kink(a);
    }
    const std::size_t ix = x.id;
    return g.record("maxpool2d", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t i = 0; i < G.size(); ++i) dx[argmax[i]] += G[i];
    });
}

/// out[b, c, ...] = x[b, c, ...] * scale[c] + shift[c].
inline Var channel_affine(Var x, Var scale_vec, Var shift_vec) {
    Graph& g = detail::same_graph(x, scale_vec);
    detail::same_graph(x, shift_vec);
    const Shape& s = x.shape();
    if (s.size() < 2 || scale_vec.numel() != s[1] || shift_vec.numel() != s[1]) {
        throw ShapeError("channel_affine: parameters of size " + std::to_string(scale_vec.numel()) + "/" +
                         std::to_string(shift_vec.numel()) + " for input " + to_string(s));
    }
    const std::size_t outer = s[0], ch = s[1], inner = numel(s) / (s[0] * s[1]);
    Tensor out(s);
    const double* X = x.value().raw();
    const double* A = scale_vec.value().raw();
    const double* B = shift_vec.value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t base = (o * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[base + i] = X[base + i] * A[c] + B[c];
        }
    }
    const std::size_t ix = x.id, ia = scale_vec.id, ib = shift_vec.id;
    return g.record("channel_affine", std::move(out), {ix, ia, ib}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        const double* Xv = gr.value(ix).raw();
        const double* Av = gr.value(ia).raw();
        const bool wx = gr.needs_grad(ix), wa = gr.needs_grad(ia), wb = gr.needs_grad(ib);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t c = 0; c < ch; ++c) {
                const std::size_t base = (o * ch + c) * inner;
                if (wx) {
                    auto& dx = gr.grad(ix);
                    for (std::size_t i = 0; i < inner; ++i) dx[base + i] += G[base + i] * Av[c];
                }
                if (wa) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < inner; ++i) acc += G[base + i] * Xv[base + i];
                    gr.grad(ia)[c] += acc;
                }
                if (wb) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < inner; ++i) acc += G[base + i];
                    gr.grad(ib)[c] += acc;
                }
            }
        }
    });
}

}  // namespace biattn
