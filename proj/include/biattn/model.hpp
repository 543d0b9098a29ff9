#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/backbone.hpp"
#include "biattn/baselines.hpp"
#include "biattn/bi_attention.hpp"
#include "biattn/checkpoint.hpp"
#include "biattn/episode.hpp"
#include "biattn/pairing.hpp"

namespace biattn {

enum class ComparatorKind { biattn, relation, proto };

inline const char* comparator_name(ComparatorKind k) {
    switch (k) {
        case ComparatorKind::biattn: return "biattn";
        case ComparatorKind::relation: return "relation";
        case ComparatorKind::proto: return "proto";
    }
    return "?";
}

inline ComparatorKind parse_comparator(const std::string& s) {
    if (s == "biattn") return ComparatorKind::biattn;
    if (s == "relation") return ComparatorKind::relation;
    if (s == "proto") return ComparatorKind::proto;
    throw std::invalid_argument("unknown comparator '" + s + "' (expected biattn, relation or proto)");
}

struct ModelConfig {
    BackboneConfig backbone;
    ComparatorKind comparator = ComparatorKind::biattn;
    std::size_t heads = 8;
    std::size_t hidden = 128;
    double scale_dim = 0.0;
    std::size_t relation_channels = 64;
    std::size_t relation_hidden = 64;
};

/// Backbone plus one comparator. Initialization draws from streams derived
/// from the seed and the component name, so two models with the same seed
/// share backbone weights regardless of comparator.
class FewShotModel {
public:
    FewShotModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        Rng backbone_rng(derive_seed(seed, "init/backbone"));
        backbone_ = std::make_unique<Backbone>(config.backbone, backbone_rng);
        Rng cmp_rng(derive_seed(seed, "init/comparator"));
        const auto& bb = config.backbone;
        switch (config.comparator) {
            case ComparatorKind::biattn: {
                BiAttentionConfig bc{config.heads, config.hidden, sequence_length(bb.l(), bb.d(), config.hidden),
                                     config.scale_dim};
                biattn_ = std::make_unique<BiAttentionParams>(bc, cmp_rng);
                break;
            }
            case ComparatorKind::relation:
                relation_ = std::make_unique<RelationParams>(
                    RelationConfig{bb.l(), bb.d(), config.relation_channels, config.relation_hidden}, cmp_rng);
                break;
            case ComparatorKind::proto:
                break;
        }
    }

    const ModelConfig& config() const noexcept { return config_; }
    Backbone& backbone() noexcept { return *backbone_; }
    BiAttentionParams* biattn() noexcept { return biattn_.get(); }
    RelationParams* relation() noexcept { return relation_.get(); }

    /// Comparator parameters (empty for proto).
    ParameterStore& comparator_params() {
        if (biattn_) return biattn_->params();
        if (relation_) return relation_->params();
        return empty_;
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out = backbone_->params().tensors();
        for (Tensor* t : comparator_params().tensors()) out.push_back(t);
        return out;
    }

    void zero_grad() {
        backbone_->params().zero_grad();
        comparator_params().zero_grad();
    }

    /// Scores of embedded queries [M,l,d,d] against class embeddings [N,l,d,d].
    Var compare(Var queries, Var classes, std::size_t k_shot) {
        switch (config_.comparator) {
            case ComparatorKind::biattn: return bi_attention_compare(queries, classes, *biattn_);
            case ComparatorKind::relation: return relation_cnn_score(queries, classes, *relation_);
            case ComparatorKind::proto: return proto_distance_score(queries, classes, k_shot);
        }
        throw std::logic_error("unreachable comparator kind");
    }

    /// Embeds support and query images in one batch, forms class embeddings
    /// by summing shots, and returns the score matrix [M, N].
    Var episode_scores(Graph& g, const EpisodeTensors& images, std::size_t n_way, std::size_t k_shot) {
        const std::size_t ns = images.support.dim(0), nq = images.query.dim(0);
        if (ns != n_way * k_shot) {
            throw ShapeError("support batch has " + std::to_string(ns) + " images, expected N*K = " +
                             std::to_string(n_way * k_shot));
        }
        Var support = g.constant(images.support);
        Var query = g.constant(images.query);
        Var emb = backbone_->forward(g, concat({support, query}, 0));
        const auto& bb = config_.backbone;
        std::vector<std::size_t> s_idx(ns), q_idx(nq);
        for (std::size_t i = 0; i < ns; ++i) s_idx[i] = i;
        for (std::size_t i = 0; i < nq; ++i) q_idx[i] = ns + i;
        Var s_emb = reshape(index_rows(emb, std::move(s_idx)), Shape{n_way, k_shot, bb.l(), bb.d(), bb.d()});
        Var q_emb = index_rows(emb, std::move(q_idx));
        return compare(q_emb, class_embeddings(s_emb), k_shot);
    }

    NamedTensors named_tensors() const {
        NamedTensors out = to_named(backbone_->params());
        const ParameterStore* cp = biattn_ ? &biattn_->params() : relation_ ? &relation_->params() : nullptr;
        if (cp) {
            for (auto& e : to_named(*cp)) out.push_back(std::move(e));
        }
        return out;
    }

    void load(const NamedTensors& entries) {
        load_into(backbone_->params(), entries);
        load_into(comparator_params(), entries);
    }

private:
    ModelConfig config_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<BiAttentionParams> biattn_;
    std::unique_ptr<RelationParams> relation_;
    ParameterStore empty_;
};

}  // namespace biattn
