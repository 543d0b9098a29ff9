#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/backbone.hpp"
#include "biattn/graph.hpp"
#include "biattn/ops.hpp"
#include "biattn/pairing.hpp"
#include "biattn/params.hpp"

namespace biattn {

namespace detail {
struct PairRowIndices {
    std::vector<std::size_t> query, cls;
};
inline PairRowIndices pair_rows(std::size_t m, std::size_t n) {
    PairIndex index{m, n};
    PairRowIndices out;
    for (std::size_t r = 0; r < index.rows(); ++r) {
        out.query.push_back(index.pair(r).first);
        out.cls.push_back(index.pair(r).second);
    }
    return out;
}
inline void check_embedding_pair(const Shape& qs, const Shape& cs, const char* who) {
    if (qs.size() != 4 || cs.size() != 4 || qs[1] != cs[1] || qs[2] != cs[2] || qs[3] != cs[3]) {
        throw ShapeError(std::string(who) + ": queries " + to_string(qs) + " and classes " + to_string(cs) +
                         " are not [*,l,d,d] embeddings of one backbone");
    }
}
}  // namespace detail

/// Learned CNN metric over concatenated (query, class) feature maps:
/// two conv3x3 + affine + relu + maxpool blocks, then a two-layer head with a
/// sigmoid output.
struct RelationConfig {
    std::size_t in_channels = 64;  // l of the backbone
    std::size_t spatial = 4;       // d of the backbone
    std::size_t conv_channels = 64;
    std::size_t hidden = 64;

    void validate() const {
        if (spatial < 4 || spatial % 4 != 0) {
            throw ShapeError("relation comparator needs feature maps of side >= 4 divisible by 4 for two pools, got " +
                             std::to_string(spatial));
        }
        if (in_channels == 0 || conv_channels == 0 || hidden == 0) {
            throw std::invalid_argument("relation comparator sizes must be positive");
        }
    }
    std::size_t flat_size() const noexcept { return conv_channels * (spatial / 4) * (spatial / 4); }
};

class RelationParams {
public:
    RelationParams(const RelationConfig& config, Rng& rng) : config_(config) {
        config_.validate();
        const std::size_t c = config_.conv_channels;
        params_.add("relation/block1/conv/weight",
                    fan_in_uniform(Shape{c, 2 * config_.in_channels, 3, 3}, 2 * config_.in_channels * 9, rng));
        params_.add("relation/block1/affine/scale", Tensor::ones(Shape{c}));
        params_.add("relation/block1/affine/shift", Tensor::zeros(Shape{c}));
        params_.add("relation/block2/conv/weight", fan_in_uniform(Shape{c, c, 3, 3}, c * 9, rng));
        params_.add("relation/block2/affine/scale", Tensor::ones(Shape{c}));
        params_.add("relation/block2/affine/shift", Tensor::zeros(Shape{c}));
        params_.add("relation/fc1/weight", fan_in_uniform(Shape{config_.flat_size(), config_.hidden},
                                                          config_.flat_size(), rng));
        params_.add("relation/fc1/bias", Tensor::zeros(Shape{config_.hidden}));
        params_.add("relation/fc2/weight", fan_in_uniform(Shape{config_.hidden, 1}, config_.hidden, rng));
        params_.add("relation/fc2/bias", Tensor::zeros(Shape{1}));
    }

    const RelationConfig& config() const noexcept { return config_; }
    ParameterStore& params() noexcept { return params_; }
    const ParameterStore& params() const noexcept { return params_; }

private:
    RelationConfig config_;
    ParameterStore params_;
};

/// queries [M,l,d,d] x classes [N,l,d,d] -> scores in (0,1), [M,N].
inline Var relation_cnn_score(Var queries, Var classes, RelationParams& rp) {
    Graph& g = detail::same_graph(queries, classes);
    const Shape qs = queries.shape(), cs = classes.shape();
    detail::check_embedding_pair(qs, cs, "relation_cnn_score");
    const auto& cfg = rp.config();
    if (qs[2] < 4) {
        throw ShapeError("relation comparator needs feature maps of side >= 4, got " + std::to_string(qs[2]));
    }
    if (qs[1] != cfg.in_channels || qs[2] != cfg.spatial) {
        throw ShapeError("relation comparator built for [" + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.spatial) + "," + std::to_string(cfg.spatial) + "] features, got " +
                         to_string(qs));
    }
    const std::size_t m = qs[0], n = cs[0];
    auto idx = detail::pair_rows(m, n);
    auto& P = rp.params();
    Var x = concat({index_rows(queries, idx.query), index_rows(classes, idx.cls)}, 1);
    for (const char* block : {"relation/block1/", "relation/block2/"}) {
        const std::string pre = block;
        x = conv2d(x, g.param(P.get(pre + "conv/weight")));
        x = channel_affine(x, g.param(P.get(pre + "affine/scale")), g.param(P.get(pre + "affine/shift")));
        x = maxpool2d(relu(x));
    }
    x = reshape(x, Shape{m * n, cfg.flat_size()});
    x = relu(add(matmul(x, g.param(P.get("relation/fc1/weight"))), g.param(P.get("relation/fc1/bias"))));
    x = add(matmul(x, g.param(P.get("relation/fc2/weight"))), g.param(P.get("relation/fc2/bias")));
    return reshape(sigmoid(x), Shape{m, n});
}

/// Fixed metric: x[j,n] = -|| p_j - c_n / K ||^2 on flattened features.
inline Var proto_distance_score(Var queries, Var classes, std::size_t k_shot) {
    const Shape qs = queries.shape(), cs = classes.shape();
    detail::check_embedding_pair(qs, cs, "proto_distance_score");
    if (k_shot == 0) throw std::invalid_argument("proto_distance_score needs k_shot > 0");
    const std::size_t m = qs[0], n = cs[0], f = numel(qs) / m;
    auto idx = detail::pair_rows(m, n);
    Var q = reshape(index_rows(queries, idx.query), Shape{m * n, f});
    Var c = scale(reshape(index_rows(classes, idx.cls), Shape{m * n, f}), 1.0 / static_cast<double>(k_shot));
    Var diff = sub(q, c);
    Var dist = sum_axis(mul(diff, diff), 1);
    return reshape(scale(dist, -1.0), Shape{m, n});
}

}  // namespace biattn
