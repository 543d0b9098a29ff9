#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "biattn/dataset.hpp"
#include "biattn/rng.hpp"
#include "biattn/tensor.hpp"

namespace biattn {

using ImageRef = std::pair<std::size_t, std::size_t>;  // (global class, sample index)

/// One N-way K-shot task. Support items are ordered class-major (local class
/// n occupies [n*K, (n+1)*K)); queries are ordered class-major too, with
/// queries_per_class consecutive items per local class.
struct Episode {
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::size_t m_query = 0;
    std::vector<std::uint32_t> classes;  // local label -> global class id
    std::vector<ImageRef> support;
    std::vector<std::size_t> support_labels;
    std::vector<ImageRef> query;
    std::vector<std::size_t> query_labels;

    /// FNV-1a fingerprint of the sampled indices, used to compare episode
    /// streams across runs.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        const auto mix = [&](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        };
        mix(n_way);
        mix(k_shot);
        mix(m_query);
        for (const auto& [c, s] : support) {
            mix(c);
            mix(s);
        }
        for (const auto& [c, s] : query) {
            mix(c);
            mix(s);
        }
        return h;
    }
};

class EpisodeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Draws k distinct values from [0, n) by a partial Fisher-Yates shuffle.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
    pool.resize(k);
    return pool;
}

inline Episode sample_episode(const DatasetStore& store, const SplitManifest& manifest, Split split, std::size_t n_way,
                              std::size_t k_shot, std::size_t queries_per_class, Rng& rng) {
    const auto& pool = manifest.classes(split);
    if (n_way == 0 || k_shot == 0 || queries_per_class == 0) {
        throw EpisodeError("episode sizes must be positive");
    }
    if (pool.size() < n_way) {
        throw EpisodeError(std::string("split ") + split_name(split) + " has " + std::to_string(pool.size()) +
                           " classes, need " + std::to_string(n_way));
    }
    if (store.samples_per_class < k_shot + queries_per_class) {
        throw EpisodeError("classes have " + std::to_string(store.samples_per_class) + " samples, need " +
                           std::to_string(k_shot + queries_per_class));
    }
    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.m_query = n_way * queries_per_class;
    for (std::size_t pick : sample_without_replacement(pool.size(), n_way, rng)) ep.classes.push_back(pool[pick]);
    for (std::size_t n = 0; n < n_way; ++n) {
        const auto drawn = sample_without_replacement(store.samples_per_class, k_shot + queries_per_class, rng);
        for (std::size_t i = 0; i < drawn.size(); ++i) {
            if (i < k_shot) {
                ep.support.emplace_back(ep.classes[n], drawn[i]);
                ep.support_labels.push_back(n);
            } else {
                ep.query.emplace_back(ep.classes[n], drawn[i]);
                ep.query_labels.push_back(n);
            }
        }
    }
    return ep;
}

/// Pixel tensors for an episode: support [N*K, c, h, w], query [M, c, h, w].
struct EpisodeTensors {
    Tensor support;
    Tensor query;
};

inline EpisodeTensors episode_tensors(const DatasetStore& store, const Episode& ep) {
    return {images_to_tensor(store, ep.support), images_to_tensor(store, ep.query)};
}

}  // namespace biattn
