#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "biattn/graph.hpp"
#include "biattn/rng.hpp"
#include "biattn/tensor.hpp"

namespace biattn {

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-4;
    /// Coordinates checked per leaf; larger leaves are subsampled.
    std::size_t max_coords_per_leaf = 64;
    std::uint64_t seed = 0x5eed;
    /// Skip coordinates whose +/- step evaluations leave the smooth piece of
    /// the program containing the base point (a relu sign or maxpool argmax
    /// changed), where central differences do not estimate the derivative.
    bool skip_nonsmooth = true;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t coords_skipped = 0;
    bool pass = true;
};

/// Compares the analytic gradient of a scalar tensor program against central
/// differences, with rel err = |a - n| / max(1, |a|, |n|). When every sampled
/// coordinate is skipped as non-smooth the report fails.
///
/// `program` must build its graph from scratch on each call, binding every
/// leaf with Graph::param so perturbations of the leaf data are observed.
inline GradCheckReport grad_check(const std::function<Var(Graph&)>& program, const std::vector<Tensor*>& leaves,
                                  const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    struct Eval {
        double value;
        std::uint64_t signature;
    };
    const auto evaluate = [&] {
        Graph g;
        g.set_track_kinks(true);
        const double v = program(g).value().item();
        return Eval{v, g.kink_signature()};
    };
    const std::uint64_t base_signature = evaluate().signature;

    for (Tensor* leaf : leaves) {
        leaf->set_requires_grad(true);
    }
    {
        Graph g;
        Var out = program(g);
        g.backward(out);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (Tensor* leaf : leaves) analytic.push_back(leaf->grad());

    Rng rng(opt.seed);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = *leaves[li];
        std::vector<std::size_t> coords(leaf.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opt.max_coords_per_leaf) {
            for (std::size_t i = 0; i < opt.max_coords_per_leaf; ++i) {
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            }
            coords.resize(opt.max_coords_per_leaf);
        }
        for (std::size_t c : coords) {
            const double saved = leaf[c];
            leaf[c] = saved + opt.step;
            const Eval up = evaluate();
            leaf[c] = saved - opt.step;
            const Eval down = evaluate();
            leaf[c] = saved;
            if (opt.skip_nonsmooth && (up.signature != base_signature || down.signature != base_signature)) {
                ++report.coords_skipped;
                continue;
            }
            const double numeric = (up.value - down.value) / (2.0 * opt.step);
            const double a = analytic[li][c];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            if (!std::isfinite(err)) {
                report.max_rel_err = INFINITY;
            } else {
                report.max_rel_err = std::max(report.max_rel_err, err);
            }
            ++report.coords_checked;
        }
    }
    report.pass = report.max_rel_err < opt.tol && report.coords_checked > 0;
    return report;
}

}  // namespace biattn
