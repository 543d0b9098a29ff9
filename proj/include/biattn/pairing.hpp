#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "biattn/graph.hpp"
#include "biattn/ops.hpp"

namespace biattn {

/// Support embeddings [N, K, ...] -> class embeddings [N, ...], summing the
/// K shots (not averaging). Each element's K values are added in ascending
/// order, so the result is bit-identical under any shot permutation.
inline Var class_embeddings(Var support) {
    const Shape& s = support.shape();
    if (s.size() < 3) throw ShapeError("class_embeddings expects [N, K, ...], got " + to_string(s));
    Graph& g = *support.graph;
    const std::size_t n = s[0], k = s[1], inner = support.value().numel() / (n * k);
    Shape out_shape = s;
    out_shape.erase(out_shape.begin() + 1);
    Tensor out(out_shape);
    const double* X = support.value().raw();
    std::vector<double> shots(k);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < inner; ++i) {
            for (std::size_t j = 0; j < k; ++j) shots[j] = X[(c * k + j) * inner + i];
            std::sort(shots.begin(), shots.end());
            double acc = 0.0;
            for (double v : shots) acc += v;
            out.raw()[c * inner + i] = acc;
        }
    }
    const std::size_t ix = support.id;
    return g.record("class_embeddings", std::move(out), {ix}, [=](Graph& gr, std::size_t self) {
        const auto& G = gr.grad(self);
        auto& dx = gr.grad(ix);
        for (std::size_t c = 0; c < n; ++c)
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t i = 0; i < inner; ++i) dx[(c * k + j) * inner + i] += G[c * inner + i];
    });
}

/// Row r of a paired batch holds query j against class n, r = j*N + n.
struct PairIndex {
    std::size_t m_query = 0;
    std::size_t n_way = 0;

    std::size_t rows() const noexcept { return m_query * n_way; }
    std::size_t row(std::size_t j, std::size_t n) const noexcept { return j * n_way + n; }
    std::pair<std::size_t, std::size_t> pair(std::size_t r) const noexcept { return {r / n_way, r % n_way}; }
};

/// l_h = l*d*d / d_h; the feature size must divide evenly.
inline std::size_t sequence_length(std::size_t l, std::size_t d, std::size_t d_h) {
    if (d_h == 0 || (l * d * d) % d_h != 0) {
        throw ShapeError("feature size l*d*d = " + std::to_string(l) + "*" + std::to_string(d) + "*" +
                         std::to_string(d) + " is not divisible by d_h = " + std::to_string(d_h));
    }
    return l * d * d / d_h;
}

struct PairedRows {
    Var query;    // [M*N, l_h, d_h]
    Var classes;  // [M*N, l_h, d_h]
    PairIndex index;
    std::size_t l_h = 0;
};

/// Repeats every query N times and tiles the class set M times, then views
/// each flattened l*d*d feature vector row-major as l_h x d_h.
inline PairedRows pair_and_reshape(Var classes, Var queries, std::size_t d_h) {
    const Shape& cs = classes.shape();
    const Shape& qs = queries.shape();
    if (cs.size() != 4 || qs.size() != 4 || cs[1] != qs[1] || cs[2] != qs[2] || cs[3] != qs[3] || cs[2] != cs[3]) {
        throw ShapeError("pair_and_reshape expects classes [N,l,d,d] and queries [M,l,d,d], got " + to_string(cs) +
                         " and " + to_string(qs));
    }
    const std::size_t n = cs[0], m = qs[0];
    const std::size_t l_h = sequence_length(cs[1], cs[2], d_h);
    PairIndex index{m, n};
    std::vector<std::size_t> qi(index.rows()), ci(index.rows());
    for (std::size_t r = 0; r < index.rows(); ++r) {
        qi[r] = index.pair(r).first;
        ci[r] = index.pair(r).second;
    }
    const Shape rows{index.rows(), l_h, d_h};
    return {reshape(index_rows(queries, std::move(qi)), rows), reshape(index_rows(classes, std::move(ci)), rows),
            index, l_h};
}

/// Inverse of pair_and_reshape on plain values: recovers queries [M, item...]
/// and classes [N, item...] from the paired rows.
inline std::pair<Tensor, Tensor> unpair(const Tensor& query_rows, const Tensor& class_rows, const PairIndex& index,
                                        const Shape& item_shape) {
    const std::size_t item = numel(item_shape);
    if (query_rows.numel() != index.rows() * item || class_rows.numel() != index.rows() * item) {
        throw ShapeError("unpair: row tensors do not match the pair index");
    }
    Shape qshape{index.m_query}, cshape{index.n_way};
    qshape.insert(qshape.end(), item_shape.begin(), item_shape.end());
    cshape.insert(cshape.end(), item_shape.begin(), item_shape.end());
    Tensor q(qshape), c(cshape);
    for (std::size_t r = 0; r < index.rows(); ++r) {
        const auto [j, n] = index.pair(r);
        if (n == 0) std::copy_n(query_rows.raw() + r * item, item, q.raw() + j * item);
        if (j == 0) std::copy_n(class_rows.raw() + r * item, item, c.raw() + n * item);
    }
    return {std::move(q), std::move(c)};
}

}  // namespace biattn
