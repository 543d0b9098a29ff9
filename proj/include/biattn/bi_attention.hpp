#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/backbone.hpp"
#include "biattn/graph.hpp"
#include "biattn/ops.hpp"
#include "biattn/pairing.hpp"
#include "biattn/params.hpp"
#include "biattn/rng.hpp"

namespace biattn {

/// Shape of the bi-attention compare network. Per-head dims are
/// d_q = d_c = hidden / heads; the attention scale defaults to d_q.
struct BiAttentionConfig {
    std::size_t heads = 8;
    std::size_t hidden = 128;  // d_h
    std::size_t seq_len = 1;   // l_h
    double scale_dim = 0.0;    // d_z; 0 selects d_q

    std::size_t head_dim() const noexcept { return hidden / heads; }
    double d_z() const noexcept { return scale_dim > 0.0 ? scale_dim : static_cast<double>(head_dim()); }

    void validate() const {
        if (heads == 0 || hidden == 0 || hidden % heads != 0) {
            throw std::invalid_argument("bi-attention hidden size " + std::to_string(hidden) +
                                        " must be a positive multiple of the head count " + std::to_string(heads));
        }
        if (seq_len == 0) throw std::invalid_argument("bi-attention sequence length must be positive");
    }
};

/// Learnable weights of the compare network, stored under
///   biattn/head{i}/Wq, biattn/head{i}/Wc   (d_h x d_q), i = 1..h
///   biattn/Wo  (h*d_c x d_h)
///   biattn/W1  (d_h x 1),  biattn/b1 [1]
///   biattn/W2  (l_h x 1),  biattn/b2 [1]
class BiAttentionParams {
public:
    BiAttentionParams(const BiAttentionConfig& config, Rng& rng) : config_(config) {
        config_.validate();
        const std::size_t dh = config_.hidden, dq = config_.head_dim();
        for (std::size_t i = 1; i <= config_.heads; ++i) {
            params_.add(head_name(i, "Wq"), fan_in_uniform(Shape{dh, dq}, dh, rng));
            params_.add(head_name(i, "Wc"), fan_in_uniform(Shape{dh, dq}, dh, rng));
        }
        params_.add("biattn/Wo", fan_in_uniform(Shape{config_.heads * dq, dh}, config_.heads * dq, rng));
        params_.add("biattn/W1", fan_in_uniform(Shape{dh, 1}, dh, rng));
        params_.add("biattn/b1", Tensor::zeros(Shape{1}));
        params_.add("biattn/W2", fan_in_uniform(Shape{config_.seq_len, 1}, config_.seq_len, rng));
        params_.add("biattn/b2", Tensor::zeros(Shape{1}));
    }

    const BiAttentionConfig& config() const noexcept { return config_; }
    ParameterStore& params() noexcept { return params_; }
    const ParameterStore& params() const noexcept { return params_; }

    Tensor& wq(std::size_t head) { return params_.get(head_name(head, "Wq")); }
    Tensor& wc(std::size_t head) { return params_.get(head_name(head, "Wc")); }
    Tensor& wo() { return params_.get("biattn/Wo"); }
    Tensor& w1() { return params_.get("biattn/W1"); }
    Tensor& b1() { return params_.get("biattn/b1"); }
    Tensor& w2() { return params_.get("biattn/W2"); }
    Tensor& b2() { return params_.get("biattn/b2"); }

    static std::string head_name(std::size_t head, const char* which) {
        return "biattn/head" + std::to_string(head) + "/" + which;
    }

private:
    BiAttentionConfig config_;
    ParameterStore params_;
};

struct AttentionResult {
    Var output;   // [rows, l_h, d_c]
    Var weights;  // [rows, l_h, l_h], row-stochastic along the last axis
};

/// softmax(Qp Cp^T / sqrt(d_z)) Cp, per row of the batch. The projected class
/// tensor serves as both keys and values.
inline AttentionResult bi_attention(Var qp, Var cp, double d_z) {
    const Shape& qs = qp.shape();
    const Shape& cs = cp.shape();
    if (qs.size() != 3 || qs != cs) {
        throw ShapeError("bi_attention expects equal [rows, l_h, d] operands, got " + to_string(qs) + " and " +
                         to_string(cs));
    }
    if (!(d_z > 0.0)) throw std::invalid_argument("bi_attention scale factor must be positive");
    Var logits = scale(matmul(qp, transpose(cp, 1, 2)), 1.0 / std::sqrt(d_z));
    Var weights = softmax(logits, 2);
    return {matmul(weights, cp), weights};
}

namespace detail {
inline Var project_rows(Graph& g, Var x, Tensor& weight) {
    const Shape& s = x.shape();
    Var flat = reshape(x, Shape{s[0] * s[1], s[2]});
    Var y = matmul(flat, g.param(weight));
    return reshape(y, Shape{s[0], s[1], weight.dim(1)});
}
}  // namespace detail

/// H = Concat(head_1..head_h) W^O with head_i = bi_attention(Qr W_i^Q, Cr W_i^C).
/// When `attention` is non-null the per-head weight matrices are appended to it.
inline Var multi_head(Var qr, Var cr, BiAttentionParams& p, std::vector<Var>* attention = nullptr) {
    Graph& g = detail::same_graph(qr, cr);
    const auto& cfg = p.config();
    const Shape& s = qr.shape();
    if (s.size() != 3 || s != cr.shape() || s[1] != cfg.seq_len || s[2] != cfg.hidden) {
        throw ShapeError("multi_head expects [rows," + std::to_string(cfg.seq_len) + "," +
                         std::to_string(cfg.hidden) + "] operands, got " + to_string(s) + " and " +
                         to_string(cr.shape()));
    }
    std::vector<Var> heads;
    heads.reserve(cfg.heads);
    for (std::size_t i = 1; i <= cfg.heads; ++i) {
        AttentionResult r =
            bi_attention(detail::project_rows(g, qr, p.wq(i)), detail::project_rows(g, cr, p.wc(i)), cfg.d_z());
        heads.push_back(r.output);
        if (attention) attention->push_back(r.weights);
    }
    Var joined = heads.size() == 1 ? heads[0] : concat(heads, 2);
    return detail::project_rows(g, joined, p.wo());
}

/// score = sigmoid(H W_1 + b_1)^T W_2 + b_2, one scalar per row -> [rows].
inline Var score_head(Var h, BiAttentionParams& p) {
    Graph& g = *h.graph;
    const auto& cfg = p.config();
    const Shape& s = h.shape();
    if (s.size() != 3 || s[1] != cfg.seq_len || s[2] != cfg.hidden) {
        throw ShapeError("score_head expects [rows," + std::to_string(cfg.seq_len) + "," + std::to_string(cfg.hidden) +
                         "], got " + to_string(s));
    }
    const std::size_t rows = s[0];
    Var u = matmul(reshape(h, Shape{rows * s[1], s[2]}), g.param(p.w1()));
    u = sigmoid(add(u, g.param(p.b1())));
    Var score = matmul(reshape(u, Shape{rows, s[1]}), g.param(p.w2()));
    score = add(score, g.param(p.b2()));
    return reshape(score, Shape{rows});
}

/// Full compare network: queries [M,l,d,d] x classes [N,l,d,d] -> X [M,N].
inline Var bi_attention_compare(Var queries, Var classes, BiAttentionParams& p, std::vector<Var>* attention = nullptr) {
    PairedRows pairs = pair_and_reshape(classes, queries, p.config().hidden);
    if (pairs.l_h != p.config().seq_len) {
        throw ShapeError("embeddings give l_h = " + std::to_string(pairs.l_h) + " but the compare network was built for " +
                         std::to_string(p.config().seq_len));
    }
    Var h = multi_head(pairs.query, pairs.classes, p, attention);
    return reshape(score_head(h, p), Shape{pairs.index.m_query, pairs.index.n_way});
}

}  // namespace biattn
