#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "biattn/bi_attention.hpp"
#include "biattn/grad_check.hpp"
#include "biattn/model.hpp"
#include "biattn/ops.hpp"
#include "biattn/training.hpp"

namespace biattn {

struct SuiteEntry {
    std::string name;
    std::size_t seeds = 0;
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    std::size_t coords_skipped = 0;
    bool pass = true;
};

struct SuiteOptions {
    std::size_t seeds_per_case = 5;
    std::uint64_t base_seed = 2024;
    GradCheckOptions check;
};

namespace detail {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

// Checks sum(build(leaves) * R) for a fixed random R, so every output
// coordinate contributes with a distinct weight.
inline GradCheckReport check_program(const std::vector<Shape>& shapes, std::uint64_t seed, const GradCheckOptions& opt,
                                     const Builder& build) {
    Rng rng(seed);
    std::deque<Tensor> leaves;
    std::vector<Tensor*> ptrs;
    for (const Shape& s : shapes) {
        leaves.push_back(random_tensor(s, rng));
        ptrs.push_back(&leaves.back());
    }
    Tensor weights;
    {
        Graph g;
        std::vector<Var> vs;
        for (Tensor* t : ptrs) vs.push_back(g.param(*t));
        weights = random_tensor(build(g, vs).shape(), rng);
    }
    const auto program = [&](Graph& g) {
        std::vector<Var> vs;
        for (Tensor* t : ptrs) vs.push_back(g.param(*t));
        return sum(mul(build(g, vs), g.constant(weights)));
    };
    return grad_check(program, ptrs, opt);
}

// End-to-end episode loss through a tiny backbone and one comparator.
inline GradCheckReport check_end_to_end(ComparatorKind kind, std::uint64_t seed, const GradCheckOptions& opt) {
    ModelConfig mc;
    mc.backbone = BackboneConfig{BackboneVariant::tiny, {2, 3, 4, 4}, 1, 64};
    mc.comparator = kind;
    mc.heads = 2;
    mc.hidden = 16;
    mc.relation_channels = 3;
    mc.relation_hidden = 4;
    FewShotModel model(mc, seed);
    Rng rng(derive_seed(seed, "gradcheck/images"));
    const std::size_t n_way = 2, k_shot = 2, m = 3;
    EpisodeTensors images{random_tensor(Shape{n_way * k_shot, 1, 64, 64}, rng, 0.0, 1.0),
                          random_tensor(Shape{m, 1, 64, 64}, rng, 0.0, 1.0)};
    const std::vector<std::size_t> labels{0, 1, 1};
    const auto program = [&](Graph& g) { return episode_loss(model.episode_scores(g, images, n_way, k_shot), labels); };
    GradCheckOptions o = opt;
    o.max_coords_per_leaf = std::min<std::size_t>(opt.max_coords_per_leaf, 12);
    return grad_check(program, model.parameters(), o);
}

}  // namespace detail

struct SuiteCase {
    std::string name;
    std::function<GradCheckReport(std::uint64_t seed, const GradCheckOptions&)> run;
};

inline std::vector<SuiteCase> gradcheck_cases() {
    using detail::check_program;
    using V = const std::vector<Var>&;
    const auto op = [](std::string name, std::vector<Shape> shapes, detail::Builder b) {
        return SuiteCase{std::move(name), [shapes = std::move(shapes), b = std::move(b)](std::uint64_t s,
                                                                                         const GradCheckOptions& o) {
                             return check_program(shapes, s, o, b);
                         }};
    };
    std::vector<SuiteCase> cases;
    cases.push_back(op("matmul", {{2, 3, 4}, {2, 4, 5}}, [](Graph&, V v) { return matmul(v[0], v[1]); }));
    cases.push_back(op("transpose", {{2, 3, 4}}, [](Graph&, V v) { return transpose(v[0], 0, 2); }));
    cases.push_back(op("reshape", {{2, 6}}, [](Graph&, V v) { return reshape(v[0], {3, 4}); }));
    cases.push_back(op("concat", {{2, 3}, {2, 2}}, [](Graph&, V v) { return concat({v[0], v[1]}, 1); }));
    cases.push_back(op("index_rows", {{3, 4}}, [](Graph&, V v) { return index_rows(v[0], {2, 0, 2, 1}); }));
    cases.push_back(op("add", {{3, 4}, {4}}, [](Graph&, V v) { return add(v[0], v[1]); }));
    cases.push_back(op("sub", {{3, 4}, {3, 4}}, [](Graph&, V v) { return sub(v[0], v[1]); }));
    cases.push_back(op("mul", {{3, 4}, {1}}, [](Graph&, V v) { return mul(v[0], v[1]); }));
    cases.push_back(op("mul_same", {{3, 4}, {3, 4}}, [](Graph&, V v) { return mul(v[0], v[1]); }));
    cases.push_back(op("scale", {{5}}, [](Graph&, V v) { return scale(v[0], -2.5); }));
    cases.push_back(op("relu", {{4, 5}}, [](Graph&, V v) { return relu(v[0]); }));
    cases.push_back(op("sigmoid", {{4, 5}}, [](Graph&, V v) { return sigmoid(scale(v[0], 3.0)); }));
    cases.push_back(op("softmax", {{3, 4, 2}}, [](Graph&, V v) { return softmax(v[0], 1); }));
    cases.push_back(op("log_softmax", {{3, 2, 4}}, [](Graph&, V v) { return log_softmax(v[0], 2); }));
    cases.push_back(op("sum", {{3, 4}}, [](Graph&, V v) { return sum(v[0]); }));
    cases.push_back(op("sum_axis", {{2, 3, 4}}, [](Graph&, V v) { return sum_axis(v[0], 1); }));
    cases.push_back(op("class_embeddings", {{2, 3, 2, 2}}, [](Graph&, V v) { return class_embeddings(v[0]); }));
    cases.push_back(op("mean", {{2, 3}}, [](Graph&, V v) { return mean(v[0]); }));
    cases.push_back(op("pick", {{3, 4}}, [](Graph&, V v) { return pick(v[0], {3, 0, 1}); }));
    cases.push_back(op("conv2d_3x3", {{2, 2, 5, 6}, {3, 2, 3, 3}}, [](Graph&, V v) { return conv2d(v[0], v[1]); }));
    cases.push_back(op("conv2d_1x1", {{2, 3, 4, 4}, {2, 3, 1, 1}}, [](Graph&, V v) { return conv2d(v[0], v[1]); }));
    cases.push_back(SuiteCase{"maxpool2d", [](std::uint64_t s, const GradCheckOptions& o) {
                                  // Distinct values on a 0.01 grid keep every window far from a tie.
                                  Rng rng(s);
                                  Tensor x(Shape{2, 2, 4, 6});
                                  std::vector<std::size_t> order(x.numel());
                                  std::iota(order.begin(), order.end(), std::size_t{0});
                                  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
                                  for (std::size_t i = 0; i < order.size(); ++i) x[i] = 0.01 * static_cast<double>(order[i]) - 0.4;
                                  Tensor w = detail::random_tensor({2, 2, 2, 3}, rng);
                                  return grad_check([&](Graph& g) { return sum(mul(maxpool2d(g.param(x)), g.constant(w))); },
                                                    {&x}, o);
                              }});
    cases.push_back(op("channel_affine", {{2, 3, 2, 2}, {3}, {3}},
                       [](Graph&, V v) { return channel_affine(v[0], v[1], v[2]); }));
    cases.push_back(op("episode_loss", {{4, 3}}, [](Graph&, V v) { return episode_loss(v[0], {0, 2, 1, 1}); }));
    cases.push_back(op("bi_attention", {{2, 3, 2}, {2, 3, 2}},
                       [](Graph&, V v) { return bi_attention(v[0], v[1], 2.0).output; }));
    cases.push_back(SuiteCase{"multi_head+score_head", [](std::uint64_t s, const GradCheckOptions& o) {
                                  Rng rng(s);
                                  BiAttentionParams p(BiAttentionConfig{2, 8, 4, 0.0}, rng);
                                  Tensor qr = detail::random_tensor({3, 4, 8}, rng);
                                  Tensor cr = detail::random_tensor({3, 4, 8}, rng);
                                  std::vector<Tensor*> leaves = p.params().tensors();
                                  leaves.push_back(&qr);
                                  leaves.push_back(&cr);
                                  return grad_check(
                                      [&](Graph& g) {
                                          Var h = multi_head(g.param(qr), g.param(cr), p);
                                          return sum(score_head(h, p));
                                      },
                                      leaves, o);
                              }});
    cases.push_back(SuiteCase{"end_to_end_biattn", [](std::uint64_t s, const GradCheckOptions& o) {
                                  return detail::check_end_to_end(ComparatorKind::biattn, s, o);
                              }});
    cases.push_back(SuiteCase{"end_to_end_relation", [](std::uint64_t s, const GradCheckOptions& o) {
                                  return detail::check_end_to_end(ComparatorKind::relation, s, o);
                              }});
    cases.push_back(SuiteCase{"end_to_end_proto", [](std::uint64_t s, const GradCheckOptions& o) {
                                  return detail::check_end_to_end(ComparatorKind::proto, s, o);
                              }});
    return cases;
}

/// Runs every case over seeds_per_case seeds and keeps the worst error.
inline std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opt = {}) {
    std::vector<SuiteEntry> out;
    for (const SuiteCase& c : gradcheck_cases()) {
        SuiteEntry e{c.name, opt.seeds_per_case};
        for (std::size_t i = 0; i < opt.seeds_per_case; ++i) {
            const GradCheckReport r = c.run(derive_seed(opt.base_seed, c.name) + i, opt.check);
            e.max_rel_err = std::max(e.max_rel_err, r.max_rel_err);
            e.coords_checked += r.coords_checked;
            e.coords_skipped += r.coords_skipped;
            e.pass = e.pass && r.pass;
        }
        out.push_back(e);
    }
    return out;
}

}  // namespace biattn
