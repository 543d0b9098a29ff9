#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "biattn/backbone.hpp"
#include "biattn/pairing.hpp"
#include "oracles.hpp"

using namespace biattn;

TEST(Backbone, TinyShapeTrace) {
    Rng rng(1);
    BackboneConfig cfg{BackboneVariant::tiny, {16, 32, 64, 64}, 1, 32};
    EXPECT_EQ(cfg.l(), 64u);
    EXPECT_EQ(cfg.d(), 2u);
    Backbone bb(cfg, rng);
    Graph g;
    Var out = bb.forward(g, g.constant(oracle::random({3, 1, 32, 32}, rng, 0.0, 1.0)));
    EXPECT_EQ(out.shape(), (Shape{3, 64, 2, 2}));
    EXPECT_TRUE(out.value().all_finite());
    EXPECT_THROW(bb.forward(g, g.constant(Tensor({1, 1, 16, 16}))), ShapeError);
    EXPECT_THROW(bb.forward(g, g.constant(Tensor({1, 2, 32, 32}))), ShapeError);
    EXPECT_THROW(Backbone(BackboneConfig{BackboneVariant::tiny, {4, 4, 4, 4}, 1, 40}, rng), std::invalid_argument);
}

TEST(Backbone, ParameterNames) {
    Rng rng(2);
    Backbone tiny(BackboneConfig{BackboneVariant::tiny, {2, 3, 4, 4}, 1, 16}, rng);
    EXPECT_TRUE(tiny.params().contains("backbone/block1/conv/weight"));
    EXPECT_TRUE(tiny.params().contains("backbone/block4/affine/shift"));
    Backbone res(BackboneConfig{BackboneVariant::resnet12, {2, 3, 3, 4}, 1, 16}, rng);
    EXPECT_TRUE(res.params().contains("backbone/block1/conv3/weight"));
    EXPECT_TRUE(res.params().contains("backbone/block2/proj/weight"));
    EXPECT_FALSE(res.params().contains("backbone/block3/proj/weight"));
    EXPECT_EQ(res.params().get("backbone/block2/affine2/scale").data(), std::vector<double>(3, 1.0));
}

TEST(Backbone, FanInInitBounds) {
    Rng rng(3);
    Backbone bb(BackboneConfig{BackboneVariant::tiny, {8, 8, 8, 8}, 2, 16}, rng);
    const Tensor& w = bb.params().get("backbone/block2/conv/weight");
    const double bound = std::sqrt(6.0 / (8 * 9));
    for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Backbone, ZeroWeightsGiveZeroOutput) {
    Rng rng(4);
    for (auto variant : {BackboneVariant::tiny, BackboneVariant::resnet12}) {
        Backbone bb(BackboneConfig{variant, {4, 4, 8, 8}, 1, 32}, rng);
        for (const auto& name : bb.params().names()) {
            if (name.find("scale") == std::string::npos) {
                for (double& v : bb.params().get(name).data()) v = 0.0;
            }
        }
        Graph g;
        for (double v : bb.forward(g, g.constant(oracle::random({2, 1, 32, 32}, rng))).value().data()) {
            EXPECT_EQ(v, 0.0);
        }
    }
}

TEST(Backbone, IdenticalImagesGiveIdenticalSlices) {
    Rng rng(5);
    Backbone bb(BackboneConfig{BackboneVariant::resnet12, {4, 6, 8, 8}, 1, 32}, rng);
    Tensor one = oracle::random({1, 1, 32, 32}, rng, 0.0, 1.0);
    Tensor two({2, 1, 32, 32});
    std::copy(one.data().begin(), one.data().end(), two.data().begin());
    std::copy(one.data().begin(), one.data().end(), two.data().begin() + 1024);
    Graph g;
    const Tensor& out = bb.forward(g, g.constant(two)).value();
    const std::size_t half = out.numel() / 2;
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().begin() + half, out.data().begin() + half));
}

TEST(Backbone, ResidualIdentityReducesToPooledShortcut) {
    Rng rng(6);
    BackboneConfig cfg{BackboneVariant::resnet12, {3, 3, 5, 5}, 2, 16};
    Backbone bb(cfg, rng);
    for (const auto& name : bb.params().names()) {
        if (name.find("/conv") != std::string::npos) {
            for (double& v : bb.params().get(name).data()) v = 0.0;
        }
    }
    Tensor x = oracle::random({2, 2, 16, 16}, rng);
    Graph g;
    const Tensor out = bb.forward(g, g.constant(x)).value();

    Tensor ref = x;
    for (std::size_t b = 1; b <= 4; ++b) {
        const std::string proj = "backbone/block" + std::to_string(b) + "/proj/weight";
        if (bb.params().contains(proj)) ref = oracle::conv2d(ref, bb.params().get(proj));
        for (double& v : ref.data()) v = std::max(v, 0.0);
        ref = oracle::maxpool2d(ref);
    }
    ASSERT_EQ(out.shape(), ref.shape());
    for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(ClassEmbeddings, KOneAndCancellation) {
    Rng rng(7);
    Tensor e = oracle::random({3, 1, 2, 2, 2}, rng);
    Graph g;
    EXPECT_EQ(class_embeddings(g.constant(e)).value().data(), e.data());
    Tensor pm({1, 2, 2, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) {
        pm[i] = rng.uniform(-1, 1);
        pm[i + 8] = -pm[i];
    }
    for (double v : class_embeddings(g.constant(pm)).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(ClassEmbeddings, MatchesLoopSum) {
    Rng rng(8);
    Tensor e = oracle::random({4, 5, 3, 2, 2}, rng);
    Graph g;
    const Tensor c = class_embeddings(g.constant(e)).value();
    ASSERT_EQ(c.shape(), (Shape{4, 3, 2, 2}));
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t f = 0; f < 12; ++f) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 5; ++k) acc += e[(n * 5 + k) * 12 + f];
            EXPECT_NEAR(c[n * 12 + f], acc, 1e-12);
        }
}

namespace {

Tensor permute_shots(const Tensor& e, std::size_t k, Rng& rng) {
    const std::size_t n_way = e.dim(0), f = e.numel() / (n_way * k);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = k; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Tensor p = e;
    for (std::size_t n = 0; n < n_way; ++n)
        for (std::size_t s = 0; s < k; ++s) std::copy_n(e.raw() + (n * k + perm[s]) * f, f, p.raw() + (n * k + s) * f);
    return p;
}

}  // namespace

TEST(ClassEmbeddings, ShotPermutationInvariance) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(4);
        Tensor e = oracle::random({3, k, 2, 2, 2}, rng, -1e3, 1e3);
        Graph g;
        EXPECT_EQ(class_embeddings(g.constant(e)).value().data(),
                  class_embeddings(g.constant(permute_shots(e, k, rng))).value().data());
    }
}

TEST(ClassEmbeddings, MatchesPlainSumUpToRounding) {
    Rng rng(10);
    Tensor e = oracle::random({4, 5, 3, 2, 2}, rng);
    Graph g;
    const Tensor a = class_embeddings(g.constant(e)).value();
    const Tensor b = sum_axis(g.constant(e), 1).value();
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Pairing, SequenceLength) {
    EXPECT_EQ(sequence_length(64, 4, 128), 8u);
    EXPECT_EQ(sequence_length(64, 2, 128), 2u);
    try {
        sequence_length(3, 2, 8);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("3*2*2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("d_h = 8"), std::string::npos) << msg;
    }
}

TEST(Pairing, RowMapping) {
    Rng rng(10);
    Tensor q = oracle::random({2, 2, 2, 2}, rng), c = oracle::random({3, 2, 2, 2}, rng);
    Graph g;
    PairedRows p = pair_and_reshape(g.constant(c), g.constant(q), 4);
    EXPECT_EQ(p.query.shape(), (Shape{6, 2, 4}));
    EXPECT_EQ(p.l_h, 2u);
    EXPECT_EQ(p.index.pair(5), (std::pair<std::size_t, std::size_t>{1, 2}));
    EXPECT_EQ(p.index.row(1, 2), 5u);
    const Tensor& qv = p.query.value();
    const Tensor& cv = p.classes.value();
    for (std::size_t r = 0; r < 6; ++r) {
        const auto [j, n] = p.index.pair(r);
        for (std::size_t f = 0; f < 8; ++f) {
            EXPECT_EQ(qv[r * 8 + f], q[j * 8 + f]);
            EXPECT_EQ(cv[r * 8 + f], c[n * 8 + f]);
        }
    }
    for (std::size_t r : {1u, 2u}) EXPECT_TRUE(std::equal(qv.raw(), qv.raw() + 8, qv.raw() + r * 8));
    for (std::size_t r : {4u, 5u}) EXPECT_TRUE(std::equal(qv.raw() + 24, qv.raw() + 32, qv.raw() + r * 8));
}

TEST(Pairing, SinglePairAndInverse) {
    Rng rng(11);
    Tensor q = oracle::random({1, 4, 2, 2}, rng), c = oracle::random({1, 4, 2, 2}, rng);
    Graph g;
    PairedRows one = pair_and_reshape(g.constant(c), g.constant(q), 8);
    EXPECT_EQ(one.query.value().data(), q.data());
    EXPECT_EQ(one.classes.value().data(), c.data());

    Tensor qm = oracle::random({3, 4, 2, 2}, rng), cm = oracle::random({2, 4, 2, 2}, rng);
    PairedRows p = pair_and_reshape(g.constant(cm), g.constant(qm), 8);
    auto [q2, c2] = unpair(p.query.value(), p.classes.value(), p.index, Shape{4, 2, 2});
    EXPECT_EQ(q2.data(), qm.data());
    EXPECT_EQ(c2.data(), cm.data());
    EXPECT_EQ(q2.shape(), qm.shape());
}

TEST(Pairing, RowContentsIndependentOfMAndN) {
    Rng rng(12);
    Tensor q = oracle::random({3, 2, 2, 2}, rng), c = oracle::random({3, 2, 2, 2}, rng);
    Graph g;
    PairedRows full = pair_and_reshape(g.constant(c), g.constant(q), 4);
    Tensor q1(Shape{1, 2, 2, 2}, std::vector<double>(q.raw() + 16, q.raw() + 24));
    Tensor c1(Shape{1, 2, 2, 2}, std::vector<double>(c.raw() + 8, c.raw() + 16));
    PairedRows single = pair_and_reshape(g.constant(c1), g.constant(q1), 4);
    const std::size_t r = full.index.row(2, 1);
    EXPECT_TRUE(std::equal(single.query.value().raw(), single.query.value().raw() + 8, full.query.value().raw() + r * 8));
    EXPECT_TRUE(
        std::equal(single.classes.value().raw(), single.classes.value().raw() + 8, full.classes.value().raw() + r * 8));
}
