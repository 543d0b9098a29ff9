#include <gtest/gtest.h>

#include <cmath>

#include "biattn/grad_check.hpp"
#include "biattn/training.hpp"
#include "oracles.hpp"

using namespace biattn;

namespace {

// Straight scalar evaluation of the mean softmax cross-entropy.
double scalar_loss(const std::vector<std::vector<double>>& x, const std::vector<std::size_t>& y) {
    double total = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        double z = 0.0;
        for (double v : x[j]) z += std::exp(v);
        total += std::log(z) - x[j][y[j]];
    }
    return total / static_cast<double>(x.size());
}

double loss_of(const Tensor& x, const std::vector<std::size_t>& y) {
    Graph g;
    return episode_loss(g.constant(x), y).value().item();
}

ModelConfig small_model(ComparatorKind kind = ComparatorKind::biattn, std::size_t size = 32) {
    ModelConfig mc;
    mc.backbone = BackboneConfig{BackboneVariant::tiny, {4, 8, 8, 16}, 1, size};
    mc.comparator = kind;
    mc.heads = 2;
    mc.hidden = 16;
    mc.relation_channels = 4;
    mc.relation_hidden = 4;
    return mc;
}

const DatasetStore& store() {
    static const DatasetStore ds = generate_synthetic({100, 20, 32, 1, 3});
    return ds;
}

// The relation comparator pools twice more, so it needs 64 px inputs (d = 4).
const DatasetStore& store64() {
    static const DatasetStore ds = generate_synthetic({100, 6, 64, 1, 3});
    return ds;
}

TrainConfig quick_train(std::size_t epochs, std::size_t tasks) {
    TrainConfig tc;
    tc.n_way = 5;
    tc.k_shot = 1;
    tc.queries_per_class = 3;
    tc.epochs = epochs;
    tc.tasks_per_epoch = tasks;
    tc.val_tasks = 5;
    tc.seed = 17;
    return tc;
}

std::vector<std::vector<double>> snapshot(FewShotModel& m) {
    std::vector<std::vector<double>> out;
    for (Tensor* t : m.parameters()) out.push_back(t->data());
    return out;
}

}  // namespace

TEST(EpisodeLoss, HandExample) {
    const double expected = scalar_loss({{1, 0, 0}, {0, 2, 0}}, {0, 1});
    EXPECT_NEAR(expected, 0.395495, 1e-6);
    EXPECT_NEAR(loss_of(Tensor({2, 3}, std::vector<double>{1, 0, 0, 0, 2, 0}), {0, 1}), expected, 1e-12);
}

TEST(EpisodeLoss, UniformAndSaturated) {
    EXPECT_NEAR(loss_of(Tensor({3, 2}, 0.7), {0, 1, 1}), std::log(2.0), 1e-12);
    EXPECT_LT(loss_of(Tensor({1, 3}, std::vector<double>{0, 30, 0}), {1}), 1e-9);
    Graph g;
    EXPECT_THROW(episode_loss(g.constant(Tensor({1, 3})), {3}), std::out_of_range);
    EXPECT_THROW(episode_loss(g.constant(Tensor({2, 3})), {0}), ShapeError);
}

TEST(EpisodeLoss, MatchesScalarOnRandomInstancesAndIsShiftInvariant) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 1 + rng.below(6), n = 2 + rng.below(4);
        Tensor x = oracle::random({m, n}, rng, -5, 5);
        std::vector<std::size_t> y(m);
        std::vector<std::vector<double>> rows(m, std::vector<double>(n));
        for (std::size_t j = 0; j < m; ++j) {
            y[j] = rng.below(n);
            for (std::size_t k = 0; k < n; ++k) rows[j][k] = x.at({j, k});
        }
        EXPECT_NEAR(loss_of(x, y), scalar_loss(rows, y), 1e-12);
        Tensor shifted = x;
        for (std::size_t j = 0; j < m; ++j) {
            const double c = rng.uniform(-50, 50);
            for (std::size_t k = 0; k < n; ++k) shifted.at({j, k}) += c;
        }
        EXPECT_NEAR(loss_of(shifted, y), loss_of(x, y), 1e-9);
    }
}

TEST(EpisodeLoss, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    Tensor x = oracle::random({4, 3}, rng, -2, 2);
    const auto r = grad_check([&](Graph& g) { return episode_loss(g.param(x), {2, 0, 1, 1}); }, {&x});
    EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Argmax, TiesAndMonotoneTransforms) {
    EXPECT_EQ(argmax_rows(Tensor({2, 3}, std::vector<double>{1, 1, 0, 0, 2, 2})), (std::vector<std::size_t>{0, 1}));
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = oracle::random({4, 5}, rng, -3, 3);
        Tensor t = x;
        for (double& v : t.data()) v = std::exp(2.0 * v) + std::tanh(v);
        EXPECT_EQ(argmax_rows(x), argmax_rows(t));
    }
}

TEST(Sgd, Examples) {
    Tensor p({3}, std::vector<double>{1, -2, 3});
    p.set_requires_grad(true);
    SgdOptimizer plain(0.0);
    ASSERT_TRUE(plain.step({&p}, 0.5));
    EXPECT_EQ(p.data(), (std::vector<double>{1, -2, 3}));
    p.grad() = p.data();
    ASSERT_TRUE(plain.step({&p}, 1.0));
    EXPECT_EQ(p.data(), (std::vector<double>{0, 0, 0}));
}

TEST(Sgd, MomentumTwoStepsMatchHandUnroll) {
    Tensor p({2}, std::vector<double>{1.0, 2.0});
    p.set_requires_grad(true);
    SgdOptimizer opt(0.9);
    const double lr = 0.1;
    p.grad() = {0.5, -1.0};
    opt.step({&p}, lr);
    p.grad() = {0.25, 2.0};
    opt.step({&p}, lr);
    // v1 = g1; p1 = p0 - lr g1; v2 = 0.9 g1 + g2; p2 = p1 - lr v2.
    const double a = 1.0 - lr * 0.5 - lr * (0.9 * 0.5 + 0.25);
    const double b = 2.0 - lr * -1.0 - lr * (0.9 * -1.0 + 2.0);
    EXPECT_DOUBLE_EQ(p[0], a);
    EXPECT_DOUBLE_EQ(p[1], b);
}

TEST(Sgd, NonFiniteGradientAbortsWithoutChanges) {
    Tensor a({2}, 1.0), b({2}, 2.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    a.grad() = {1.0, 1.0};
    b.grad() = {NAN, 0.0};
    SgdOptimizer opt(0.9);
    EXPECT_FALSE(opt.step({&a, &b}, 0.1));
    EXPECT_EQ(a.data(), (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(b.data(), (std::vector<double>{2.0, 2.0}));
}

TEST(LrSchedule, HalvesEveryTenEpochs) {
    EXPECT_EQ(lr_at(0, 0.001, 10), 0.001);
    EXPECT_EQ(lr_at(9, 0.001, 10), 0.001);
    EXPECT_EQ(lr_at(10, 0.001, 10), 0.0005);
    EXPECT_EQ(lr_at(25, 0.001, 10), 0.00025);
    for (std::size_t e = 0; e < 120; ++e) EXPECT_EQ(lr_at(e, 0.001, 10), 0.001 / std::pow(2.0, e / 10));
}

TEST(Summary, Examples) {
    const EvalReport all = summarize({1, 1, 1});
    EXPECT_EQ(format_report(all), "acc = 100.00% +/- 0.00% (n=3)");
    const EvalReport r = summarize({1, 0, 1, 0});
    EXPECT_DOUBLE_EQ(r.mean, 0.5);
    EXPECT_NEAR(r.ci95, 1.96 * std::sqrt(1.0 / 3.0) / 2.0, 1e-15);
    EXPECT_EQ(format_report(r), "acc = 50.00% +/- 56.58% (n=4)");
}

TEST(Pretrain, ZeroPassesLeavesInitialization) {
    FewShotModel m(small_model(), 5);
    const auto before = snapshot(m);
    PretrainConfig pc;
    pc.passes = 0;
    pc.accuracy_samples = 64;
    const PretrainResult r = pretrain_backbone(m.backbone(), store(), default_manifest(100), pc);
    EXPECT_TRUE(r.pass_loss.empty());
    EXPECT_EQ(snapshot(m), before);
}

TEST(Pretrain, BeatsChanceAndRoundTrips) {
    FewShotModel m(small_model(), 6);
    PretrainConfig pc;
    pc.passes = 3;
    pc.accuracy_samples = 600;
    const PretrainResult r = pretrain_backbone(m.backbone(), store(), default_manifest(100), pc);
    EXPECT_EQ(r.num_classes, 60u);
    EXPECT_GT(r.train_accuracy, 1.0 / 60.0);
    EXPECT_LT(r.pass_loss.back(), r.pass_loss.front());
    const NamedTensors saved = to_named(m.backbone().params());
    const NamedTensors back = decode_checkpoint(encode_checkpoint(saved));
    ASSERT_EQ(back.size(), saved.size());
    for (std::size_t i = 0; i < saved.size(); ++i) {
        EXPECT_EQ(back[i].first, saved[i].first);
        EXPECT_EQ(back[i].second.data(), saved[i].second.data());
    }
}

TEST(Train, ZeroLearningRateIsIdentity) {
    for (auto kind : {ComparatorKind::biattn, ComparatorKind::relation, ComparatorKind::proto}) {
        const bool big = kind == ComparatorKind::relation;
        FewShotModel m(small_model(kind, big ? 64 : 32), 7);
        const auto before = snapshot(m);
        TrainConfig tc = quick_train(2, 3);
        tc.lr_initial = 0.0;
        tc.momentum = 0.9;
        train(m, big ? store64() : store(), default_manifest(100), tc);
        EXPECT_EQ(snapshot(m), before) << comparator_name(kind);
    }
}

TEST(Train, DeterministicLogAndEpisodes) {
    const auto run = [] {
        FewShotModel m(small_model(), 8);
        TrainResult r = train(m, store(), default_manifest(100), quick_train(2, 4));
        return std::make_pair(format_convergence_csv(r.log, false), r.episode_fingerprints);
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_EQ(a.second.size(), 8u);
}

TEST(Train, LossDecreasesOverTenEpochs) {
    FewShotModel m(small_model(), 9);
    TrainConfig tc = quick_train(10, 10);
    tc.lr_initial = 0.01;
    tc.momentum = 0.9;
    tc.val_tasks = 0;
    const TrainResult r = train(m, store(), default_manifest(100), tc);
    ASSERT_EQ(r.log.epochs.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(r.log.epochs[i].epoch, i + 1);
    EXPECT_LT(r.log.epochs[9].mean_loss, r.log.epochs[0].mean_loss);
}

TEST(Train, ConvergenceCsvFormat) {
    ConvergenceLog log;
    log.epochs.push_back({1, 1.5, 0.25, 2.0});
    EXPECT_EQ(format_convergence_csv(log), "epoch,mean_loss,val_acc,seconds\n1,1.500000000,0.250000,2.000\n");
}

TEST(Evaluate, PureFunctionOfSeed) {
    FewShotModel m(small_model(), 10);
    const EpisodeShape shape{5, 1, 3};
    const EvalReport a = evaluate(m, store(), default_manifest(100), Split::test, 12, 4, shape);
    const EvalReport b = evaluate(m, store(), default_manifest(100), Split::test, 12, 4, shape);
    EXPECT_EQ(a.task_accuracies, b.task_accuracies);
    EXPECT_EQ(format_report(a), format_report(b));
    const EvalReport c = evaluate(m, store(), default_manifest(100), Split::test, 6, 4, shape);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(c.task_accuracies[i], a.task_accuracies[i]);
    double total = 0.0;
    for (double v : a.task_accuracies) total += v;
    EXPECT_DOUBLE_EQ(a.mean, total / 12.0);
}
