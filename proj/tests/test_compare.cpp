#include <gtest/gtest.h>

#include <numeric>

#include "biattn/baselines.hpp"
#include "biattn/bi_attention.hpp"
#include "oracles.hpp"

using namespace biattn;

namespace {

oracle::Mat to_mat(const Tensor& t, std::size_t row) {
    const std::size_t l = t.dim(1), d = t.dim(2);
    oracle::Mat m(l, std::vector<double>(d));
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < d; ++j) m[i][j] = t.at({row, i, j});
    return m;
}

oracle::BiAttnWeights weights_of(BiAttentionParams& p) {
    oracle::BiAttnWeights w;
    for (std::size_t i = 1; i <= p.config().heads; ++i) {
        w.wq.push_back(p.wq(i));
        w.wc.push_back(p.wc(i));
    }
    w.wo = p.wo();
    w.w1 = p.w1();
    w.w2 = p.w2();
    w.b1 = p.b1().item();
    w.b2 = p.b2().item();
    w.d_z = p.config().d_z();
    return w;
}

void randomize(ParameterStore& store, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (Tensor* t : store.tensors())
        for (double& v : t->data()) v = rng.uniform(lo, hi);
}

struct Instance {
    BiAttentionConfig cfg;
    std::size_t m, n, l, d;
};

// Random toy shape with M,N <= 3, l_h <= 4, d_h <= 8, h <= 2.
Instance random_instance(Rng& rng) {
    Instance in;
    in.cfg.heads = 1 + rng.below(2);
    in.cfg.hidden = in.cfg.heads * (1 + rng.below(8 / in.cfg.heads));
    in.cfg.seq_len = 1 + rng.below(4);
    in.m = 1 + rng.below(3);
    in.n = 1 + rng.below(3);
    // l*d*d = l_h*d_h with d in {1, 2}.
    const std::size_t f = in.cfg.seq_len * in.cfg.hidden;
    in.d = f % 4 == 0 && rng.below(2) ? 2 : 1;
    in.l = f / (in.d * in.d);
    return in;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t f = x.numel() / x.dim(0);
    Tensor y = x;
    for (std::size_t i = 0; i < perm.size(); ++i) std::copy_n(x.raw() + perm[i] * f, f, y.raw() + i * f);
    return y;
}

std::vector<std::size_t> random_perm(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

}  // namespace

TEST(BiAttention, ZeroClassGivesZero) {
    Rng rng(1);
    Graph g;
    for (double v : bi_attention(g.constant(oracle::random({2, 3, 2}, rng)), g.constant(Tensor({2, 3, 2})), 2.0)
                        .output.value()
                        .data())
        EXPECT_EQ(v, 0.0);
}

TEST(BiAttention, ZeroQueryAveragesClassRows) {
    Rng rng(2);
    Tensor c = oracle::random({1, 3, 2}, rng);
    Graph g;
    const Tensor out = bi_attention(g.constant(Tensor({1, 3, 2})), g.constant(c), 2.0).output.value();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < 2; ++t)
            EXPECT_NEAR(out.at({0, i, t}), (c.at({0, 0, t}) + c.at({0, 1, t}) + c.at({0, 2, t})) / 3.0, 1e-15);
}

TEST(BiAttention, MatchesLoopOracleAndRowsAreStochastic) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor q = oracle::random({2, 3, 2}, rng, -3, 3), c = oracle::random({2, 3, 2}, rng, -3, 3);
        const double d_z = rng.uniform(0.5, 4.0);
        Graph g;
        AttentionResult r = bi_attention(g.constant(q), g.constant(c), d_z);
        for (std::size_t row = 0; row < 2; ++row) {
            oracle::Mat w;
            const oracle::Mat ref = oracle::attention(to_mat(q, row), to_mat(c, row), d_z, &w);
            for (std::size_t i = 0; i < 3; ++i) {
                double total = 0.0;
                for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(r.output.value().at({row, i, t}), ref[i][t], 1e-12);
                for (std::size_t k = 0; k < 3; ++k) {
                    const double a = r.weights.value().at({row, i, k});
                    EXPECT_NEAR(a, w[i][k], 1e-12);
                    EXPECT_GT(a, 0.0);
                    total += a;
                }
                EXPECT_NEAR(total, 1.0, 1e-9);
            }
        }
    }
    Graph g;
    EXPECT_THROW(bi_attention(g.constant(Tensor({2, 3, 2})), g.constant(Tensor({2, 3, 3})), 1.0), ShapeError);
}

TEST(MultiHead, IdentityProjectionsReduceToBiAttention) {
    Rng rng(4);
    BiAttentionParams p(BiAttentionConfig{1, 3, 4, 0.0}, rng);
    for (Tensor* t : {&p.wq(1), &p.wc(1), &p.wo()}) {
        for (double& v : t->data()) v = 0.0;
        for (std::size_t i = 0; i < 3; ++i) t->at({i, i}) = 1.0;
    }
    Tensor q = oracle::random({2, 4, 3}, rng), c = oracle::random({2, 4, 3}, rng);
    Graph g;
    EXPECT_EQ(multi_head(g.constant(q), g.constant(c), p).value().data(),
              bi_attention(g.constant(q), g.constant(c), 3.0).output.value().data());
}

TEST(MultiHead, ZeroProjectionsGiveZero) {
    Rng rng(5);
    BiAttentionParams p(BiAttentionConfig{2, 4, 2, 0.0}, rng);
    for (Tensor* t : p.params().tensors()) std::fill(t->data().begin(), t->data().end(), 0.0);
    Graph g;
    for (double v : multi_head(g.constant(oracle::random({3, 2, 4}, rng)), g.constant(oracle::random({3, 2, 4}, rng)), p)
                        .value()
                        .data())
        EXPECT_EQ(v, 0.0);
}

TEST(MultiHead, TwoHeadsMatchPerHeadOracle) {
    Rng rng(6);
    BiAttentionParams p(BiAttentionConfig{2, 8, 4, 0.0}, rng);
    Tensor q = oracle::random({3, 4, 8}, rng), c = oracle::random({3, 4, 8}, rng);
    Graph g;
    std::vector<Var> att;
    const Tensor h = multi_head(g.constant(q), g.constant(c), p, &att).value();
    ASSERT_EQ(att.size(), 2u);
    for (std::size_t row = 0; row < 3; ++row) {
        oracle::Mat joined(4);
        for (std::size_t head = 1; head <= 2; ++head) {
            const oracle::Mat o = oracle::attention(oracle::project(to_mat(q, row), p.wq(head)),
                                                    oracle::project(to_mat(c, row), p.wc(head)), 4.0);
            for (std::size_t i = 0; i < 4; ++i) joined[i].insert(joined[i].end(), o[i].begin(), o[i].end());
        }
        const oracle::Mat ref = oracle::project(joined, p.wo());
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(h.at({row, i, t}), ref[i][t], 1e-12);
    }
}

TEST(ScoreHead, Examples) {
    Rng rng(7);
    BiAttentionParams p(BiAttentionConfig{2, 4, 3, 0.0}, rng);
    for (double& v : p.w2().data()) v = 0.0;
    p.b2()[0] = 0.5;
    Graph g;
    EXPECT_EQ(score_head(g.constant(Tensor({1, 3, 4})), p).value().item(), 0.5);

    randomize(p.params(), rng);
    p.b1()[0] = 30.0;
    Tensor h = oracle::random({2, 3, 4}, rng, -0.1, 0.1);
    const Tensor s = score_head(g.constant(h), p).value();
    const double expect = p.w2()[0] + p.w2()[1] + p.w2()[2] + p.b2()[0];
    EXPECT_NEAR(s[0], expect, 1e-9);
    EXPECT_NEAR(s[1], expect, 1e-9);
}

TEST(ScoreHead, MatchesScalarLoop) {
    Rng rng(8);
    BiAttentionParams p(BiAttentionConfig{2, 4, 3, 0.0}, rng);
    randomize(p.params(), rng);
    Tensor h = oracle::random({5, 3, 4}, rng);
    Graph g;
    const Tensor s = score_head(g.constant(h), p).value();
    for (std::size_t r = 0; r < 5; ++r) {
        double score = p.b2()[0];
        for (std::size_t i = 0; i < 3; ++i) {
            double u = p.b1()[0];
            for (std::size_t t = 0; t < 4; ++t) u += h.at({r, i, t}) * p.w1()[t];
            score += oracle::sigmoid(u) * p.w2()[i];
        }
        EXPECT_NEAR(s[r], score, 1e-12);
    }
}

TEST(Compare, SinglePairEqualsHeadOnThatPair) {
    Rng rng(9);
    BiAttentionParams p(BiAttentionConfig{2, 4, 2, 0.0}, rng);
    Tensor q = oracle::random({1, 2, 2, 2}, rng), c = oracle::random({1, 2, 2, 2}, rng);
    Graph g;
    const Tensor x = bi_attention_compare(g.constant(q), g.constant(c), p).value();
    ASSERT_EQ(x.shape(), (Shape{1, 1}));
    Var direct = score_head(multi_head(g.constant(q.reshaped({1, 2, 4})), g.constant(c.reshaped({1, 2, 4})), p), p);
    EXPECT_EQ(x.item(), direct.value().item());
}

TEST(Compare, MatchesStraightLoopOracle) {
    Rng rng(10);
    for (int trial = 0; trial < 40; ++trial) {
        const Instance in = random_instance(rng);
        BiAttentionParams p(in.cfg, rng);
        randomize(p.params(), rng);
        Tensor q = oracle::random({in.m, in.l, in.d, in.d}, rng), c = oracle::random({in.n, in.l, in.d, in.d}, rng);
        Graph g;
        const Tensor x = bi_attention_compare(g.constant(q), g.constant(c), p).value();
        const Tensor ref = oracle::compare(q, c, weights_of(p));
        ASSERT_EQ(x.shape(), ref.shape());
        for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(x[i], ref[i], 1e-10) << "trial " << trial;
    }
}

TEST(Compare, DuplicateClassGivesDuplicateColumn) {
    Rng rng(11);
    BiAttentionParams p(BiAttentionConfig{2, 4, 2, 0.0}, rng);
    Tensor q = oracle::random({3, 2, 2, 2}, rng), c = oracle::random({2, 2, 2, 2}, rng);
    std::copy_n(c.raw(), 8, c.raw() + 8);
    Graph g;
    const Tensor x = bi_attention_compare(g.constant(q), g.constant(c), p).value();
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(x.at({j, 0}), x.at({j, 1}));
}

TEST(Compare, ClassAndQueryPermutationEquivariance) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const Instance in = random_instance(rng);
        BiAttentionParams p(in.cfg, rng);
        randomize(p.params(), rng);
        Tensor q = oracle::random({in.m, in.l, in.d, in.d}, rng), c = oracle::random({in.n, in.l, in.d, in.d}, rng);
        const auto pc = random_perm(in.n, rng), pq = random_perm(in.m, rng);
        Graph g;
        const Tensor x = bi_attention_compare(g.constant(q), g.constant(c), p).value();
        const Tensor xc = bi_attention_compare(g.constant(q), g.constant(permute_rows(c, pc)), p).value();
        const Tensor xq = bi_attention_compare(g.constant(permute_rows(q, pq)), g.constant(c), p).value();
        for (std::size_t j = 0; j < in.m; ++j)
            for (std::size_t n = 0; n < in.n; ++n) {
                ASSERT_EQ(xc.at({j, n}), x.at({j, pc[n]})) << "trial " << trial;
                ASSERT_EQ(xq.at({j, n}), x.at({pq[j], n})) << "trial " << trial;
            }
    }
}

TEST(Compare, PairIndependence) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        Instance in = random_instance(rng);
        in.m = 2 + rng.below(2);
        in.n = 2 + rng.below(2);
        BiAttentionParams p(in.cfg, rng);
        randomize(p.params(), rng);
        Tensor q = oracle::random({in.m, in.l, in.d, in.d}, rng), c = oracle::random({in.n, in.l, in.d, in.d}, rng);
        const std::size_t j = rng.below(in.m), n = rng.below(in.n);
        Graph g;
        const double before = bi_attention_compare(g.constant(q), g.constant(c), p).value().at({j, n});
        const std::size_t fq = q.numel() / in.m, fc = c.numel() / in.n;
        Tensor q2 = q, c2 = c;
        for (std::size_t i = 0; i < q.numel(); ++i)
            if (i / fq != j) q2[i] = rng.uniform(-5, 5);
        for (std::size_t i = 0; i < c.numel(); ++i)
            if (i / fc != n) c2[i] = rng.uniform(-5, 5);
        const double after = bi_attention_compare(g.constant(q2), g.constant(c2), p).value().at({j, n});
        ASSERT_EQ(before, after) << "trial " << trial;
        // Row contents also do not depend on M and N.
        Tensor qj(Shape{1, in.l, in.d, in.d}, std::vector<double>(q.raw() + j * fq, q.raw() + (j + 1) * fq));
        Tensor cn(Shape{1, in.l, in.d, in.d}, std::vector<double>(c.raw() + n * fc, c.raw() + (n + 1) * fc));
        ASSERT_EQ(bi_attention_compare(g.constant(qj), g.constant(cn), p).value().item(), before);
    }
}

TEST(Compare, RejectsIndivisibleFeatures) {
    Rng rng(14);
    BiAttentionParams p(BiAttentionConfig{2, 8, 1, 0.0}, rng);
    Graph g;
    EXPECT_THROW(bi_attention_compare(g.constant(Tensor({1, 3, 1, 1})), g.constant(Tensor({1, 3, 1, 1})), p),
                 ShapeError);
}

TEST(Relation, ZeroParametersGiveOneHalf) {
    Rng rng(15);
    RelationParams rp(RelationConfig{3, 4, 4, 5}, rng);
    for (Tensor* t : rp.params().tensors()) std::fill(t->data().begin(), t->data().end(), 0.0);
    Graph g;
    for (double v :
         relation_cnn_score(g.constant(oracle::random({2, 3, 4, 4}, rng)), g.constant(oracle::random({3, 3, 4, 4}, rng)), rp)
             .value()
             .data())
        EXPECT_EQ(v, 0.5);
}

TEST(Relation, DuplicateClassesGiveDuplicateColumns) {
    Rng rng(16);
    RelationParams rp(RelationConfig{3, 4, 4, 5}, rng);
    Tensor q = oracle::random({2, 3, 4, 4}, rng), c = oracle::random({2, 3, 4, 4}, rng);
    std::copy_n(c.raw(), 48, c.raw() + 48);
    Graph g;
    const Tensor x = relation_cnn_score(g.constant(q), g.constant(c), rp).value();
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(x.at({j, 0}), x.at({j, 1}));
}

TEST(Relation, MatchesLoopOracle) {
    Rng rng(17);
    RelationParams rp(RelationConfig{2, 8, 3, 4}, rng);
    randomize(rp.params(), rng, -0.5, 0.5);
    Tensor q = oracle::random({2, 2, 8, 8}, rng), c = oracle::random({3, 2, 8, 8}, rng);
    Graph g;
    const Tensor x = relation_cnn_score(g.constant(q), g.constant(c), rp).value();
    auto& P = rp.params();
    for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t n = 0; n < 3; ++n) {
            Tensor in({1, 4, 8, 8});
            std::copy_n(q.raw() + j * 128, 128, in.raw());
            std::copy_n(c.raw() + n * 128, 128, in.raw() + 128);
            for (const std::string b : {"relation/block1/", "relation/block2/"}) {
                in = oracle::conv2d(in, P.get(b + "conv/weight"));
                const std::size_t hw = in.dim(2) * in.dim(3);
                for (std::size_t ch = 0; ch < 3; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) {
                        double& v = in[ch * hw + i];
                        v = std::max(0.0, v * P.get(b + "affine/scale")[ch] + P.get(b + "affine/shift")[ch]);
                    }
                in = oracle::maxpool2d(in);
            }
            double out = P.get("relation/fc2/bias")[0];
            for (std::size_t k = 0; k < 4; ++k) {
                double hk = P.get("relation/fc1/bias")[k];
                for (std::size_t i = 0; i < in.numel(); ++i) hk += in[i] * P.get("relation/fc1/weight").at({i, k});
                out += std::max(0.0, hk) * P.get("relation/fc2/weight")[k];
            }
            EXPECT_NEAR(x.at({j, n}), oracle::sigmoid(out), 1e-12);
        }
}

TEST(Relation, RequiresTwoPoolsOfSpace) {
    Rng rng(18);
    EXPECT_THROW(RelationParams(RelationConfig{3, 2, 4, 4}, rng), ShapeError);
    RelationParams rp(RelationConfig{3, 4, 4, 4}, rng);
    Graph g;
    EXPECT_THROW(relation_cnn_score(g.constant(Tensor({1, 3, 2, 2})), g.constant(Tensor({1, 3, 2, 2})), rp),
                 ShapeError);
}

TEST(Proto, Examples) {
    Rng rng(19);
    Tensor c = oracle::random({3, 2, 2, 2}, rng);
    Tensor q({1, 2, 2, 2});
    for (std::size_t i = 0; i < 8; ++i) q[i] = c[8 + i] / 2.0;
    Graph g;
    const Tensor x = proto_distance_score(g.constant(q), g.constant(c), 2).value();
    EXPECT_EQ(x.at({0, 1}), 0.0);
    EXPECT_LT(x.at({0, 0}), 0.0);
    EXPECT_LT(x.at({0, 2}), 0.0);

    Tensor two({2, 1, 1, 1}, std::vector<double>{1.0, -1.0});
    const Tensor tie = proto_distance_score(g.constant(Tensor({1, 1, 1, 1})), g.constant(two), 1).value();
    EXPECT_EQ(tie[0], tie[1]);
}

TEST(Proto, MatchesLoopDistances) {
    Rng rng(20);
    Tensor q = oracle::random({3, 2, 2, 2}, rng), c = oracle::random({2, 2, 2, 2}, rng);
    Graph g;
    const Tensor x = proto_distance_score(g.constant(q), g.constant(c), 3).value();
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t n = 0; n < 2; ++n) {
            double d = 0.0;
            for (std::size_t i = 0; i < 8; ++i) d += (q[j * 8 + i] - c[n * 8 + i] / 3.0) * (q[j * 8 + i] - c[n * 8 + i] / 3.0);
            EXPECT_NEAR(x.at({j, n}), -d, 1e-12);
        }
}

TEST(Comparators, ClassPermutationEquivarianceForBaselines) {
    Rng rng(21);
    RelationParams rp(RelationConfig{2, 4, 3, 4}, rng);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor q = oracle::random({2, 2, 4, 4}, rng), c = oracle::random({3, 2, 4, 4}, rng);
        const auto pc = random_perm(3, rng);
        Graph g;
        const Tensor r = relation_cnn_score(g.constant(q), g.constant(c), rp).value();
        const Tensor rpm = relation_cnn_score(g.constant(q), g.constant(permute_rows(c, pc)), rp).value();
        const Tensor d = proto_distance_score(g.constant(q), g.constant(c), 1).value();
        const Tensor dpm = proto_distance_score(g.constant(q), g.constant(permute_rows(c, pc)), 1).value();
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t n = 0; n < 3; ++n) {
                ASSERT_EQ(rpm.at({j, n}), r.at({j, pc[n]}));
                ASSERT_EQ(dpm.at({j, n}), d.at({j, pc[n]}));
            }
    }
}
