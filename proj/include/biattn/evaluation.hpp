#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "biattn/dataset.hpp"
#include "biattn/episode.hpp"
#include "biattn/model.hpp"

namespace biattn {

struct EpisodeShape {
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t queries_per_class = 15;
};

/// Index of the largest entry per row of a [rows, cols] tensor; ties go to
/// the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
    const std::size_t rows = x.dim(0), cols = x.numel() / x.dim(0);
    std::vector<std::size_t> out(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 1; c < cols; ++c) {
            if (x[r * cols + c] > x[r * cols + out[r]]) out[r] = c;
        }
    }
    return out;
}

struct EvalReport {
    std::vector<double> task_accuracies;
    double mean = 0.0;  // fraction in [0, 1]
    double ci95 = 0.0;  // half-width, same unit as mean
    std::size_t num_tasks = 0;
};

/// Mean and 1.96 * s / sqrt(n) with the unbiased sample standard deviation.
inline EvalReport summarize(std::vector<double> accuracies) {
    EvalReport r;
    r.num_tasks = accuracies.size();
    if (accuracies.empty()) return r;
    double total = 0.0;
    for (double a : accuracies) total += a;
    r.mean = total / static_cast<double>(r.num_tasks);
    if (r.num_tasks > 1) {
        double ss = 0.0;
        for (double a : accuracies) ss += (a - r.mean) * (a - r.mean);
        const double sd = std::sqrt(ss / static_cast<double>(r.num_tasks - 1));
        r.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(r.num_tasks));
    }
    r.task_accuracies = std::move(accuracies);
    return r;
}

/// "acc = 53.74% +/- 0.89% (n=600)"
inline std::string format_report(const EvalReport& r) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "acc = %.2f%% +/- %.2f%% (n=%zu)", 100.0 * r.mean, 100.0 * r.ci95, r.num_tasks);
    return buf;
}

/// Seed of evaluation task i: derive_seed(seed, "eval/<split>") xor i, so a
/// task's episode does not depend on which other tasks are evaluated.
inline std::uint64_t eval_task_seed(std::uint64_t seed, Split split, std::size_t task) {
    return derive_seed(seed, std::string("eval/") + split_name(split)) ^ static_cast<std::uint64_t>(task);
}

inline double episode_accuracy(const Tensor& scores, const std::vector<std::size_t>& labels) {
    const auto pred = argmax_rows(scores);
    std::size_t correct = 0;
    for (std::size_t j = 0; j < labels.size(); ++j) correct += pred[j] == labels[j];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Forward-only accuracy over num_tasks sampled episodes of a split.
inline EvalReport evaluate(FewShotModel& model, const DatasetStore& store, const SplitManifest& manifest, Split split,
                           std::size_t num_tasks, std::uint64_t seed, const EpisodeShape& shape) {
    std::vector<double> acc(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
        Rng rng(eval_task_seed(seed, split, t));
        const Episode ep =
            sample_episode(store, manifest, split, shape.n_way, shape.k_shot, shape.queries_per_class, rng);
        Graph g;
        Var x = model.episode_scores(g, episode_tensors(store, ep), shape.n_way, shape.k_shot);
        acc[t] = episode_accuracy(x.value(), ep.query_labels);
    }
    return summarize(std::move(acc));
}

}  // namespace biattn
