#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/checkpoint.hpp"
#include "biattn/dataset.hpp"
#include "biattn/episode.hpp"
#include "biattn/evaluation.hpp"
#include "biattn/model.hpp"
#include "biattn/ops.hpp"

namespace biattn {

/// Mean negative log-likelihood of the true class after a softmax over each
/// query's N scores. X: [M, N], labels: M local labels.
inline Var episode_loss(Var scores, const std::vector<std::size_t>& labels) {
    const Shape& s = scores.shape();
    if (s.size() != 2 || s[0] != labels.size()) {
        throw ShapeError("episode_loss: scores " + to_string(s) + " for " + std::to_string(labels.size()) + " labels");
    }
    for (std::size_t y : labels) {
        if (y >= s[1]) {
            throw std::out_of_range("episode_loss: label " + std::to_string(y) + " outside 0.." +
                                    std::to_string(s[1] - 1));
        }
    }
    return scale(mean(pick(log_softmax(scores, 1), labels)), -1.0);
}

/// Learning rate after `epoch` completed epochs: initial * 0.5^floor(epoch / halve_every).
inline double lr_at(std::size_t epoch, double lr_initial, std::size_t halve_every) {
    if (halve_every == 0) return lr_initial;
    return lr_initial * std::pow(0.5, static_cast<double>(epoch / halve_every));
}

class NumericAbort : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SGD with optional momentum: v <- mu v + g; p <- p - lr v.
class SgdOptimizer {
public:
    explicit SgdOptimizer(double momentum = 0.0) : momentum_(momentum) {}

    /// Applies one update to every tensor from its grad buffer. If any gradient
    /// is non-finite nothing is modified and false is returned.
    bool step(const std::vector<Tensor*>& params, double lr) {
        for (const Tensor* p : params) {
            if (p->grad().size() != p->numel()) {
                throw ShapeError("sgd_step: gradient buffer does not match parameter shape " + to_string(p->shape()));
            }
            for (double g : p->grad()) {
                if (!std::isfinite(g)) return false;
            }
        }
        for (Tensor* p : params) {
            auto& v = velocity_[p];
            if (v.empty()) v.assign(p->numel(), 0.0);
            auto& data = p->data();
            const auto& grad = p->grad();
            for (std::size_t i = 0; i < data.size(); ++i) {
                v[i] = momentum_ * v[i] + grad[i];
                data[i] -= lr * v[i];
            }
        }
        return true;
    }

    double momentum() const noexcept { return momentum_; }

private:
    double momentum_;
    std::map<const Tensor*, std::vector<double>> velocity_;
};

// ---------------------------------------------------------------------------
// Backbone pretraining

struct PretrainConfig {
    std::size_t passes = 10;
    double lr = 0.01;
    std::size_t lr_halve_every = 10;
    double momentum = 0.0;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    std::size_t accuracy_samples = 1200;
};

struct PretrainResult {
    std::vector<double> pass_loss;
    /// Held-in accuracy of backbone + temporary head on train-split images.
    double train_accuracy = 0.0;
    std::size_t num_classes = 0;
};

/// Trains the backbone with a temporary linear head on classification of the
/// train-split classes, then discards the head.
inline PretrainResult pretrain_backbone(Backbone& backbone, const DatasetStore& store, const SplitManifest& manifest,
                                        const PretrainConfig& cfg) {
    const auto& classes = manifest.train_classes;
    if (classes.empty()) throw std::invalid_argument("pretraining needs a non-empty train split");
    if (cfg.batch == 0) throw std::invalid_argument("pretraining batch size must be positive");
    PretrainResult result;
    result.num_classes = classes.size();
    const std::size_t features = backbone.config().feature_size();
    Rng init_rng(derive_seed(cfg.seed, "pretrain/head"));
    ParameterStore head;
    head.add("pretrain/head/weight", fan_in_uniform(Shape{features, classes.size()}, features, init_rng));
    head.add("pretrain/head/bias", Tensor::zeros(Shape{classes.size()}));

    std::vector<ImageRef> items;
    std::vector<std::size_t> labels;
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        for (std::size_t s = 0; s < store.samples_per_class; ++s) {
            items.emplace_back(classes[ci], s);
            labels.push_back(ci);
        }
    }
    const auto logits_of = [&](Graph& g, const std::vector<ImageRef>& batch) {
        Var emb = backbone.forward(g, g.constant(images_to_tensor(store, batch)));
        Var flat = reshape(emb, Shape{batch.size(), features});
        return add(matmul(flat, g.param(head.get("pretrain/head/weight"))), g.param(head.get("pretrain/head/bias")));
    };

    std::vector<Tensor*> params = backbone.params().tensors();
    for (Tensor* t : head.tensors()) params.push_back(t);
    SgdOptimizer opt(cfg.momentum);
    Rng order_rng(derive_seed(cfg.seed, "pretrain/order"));
    for (std::size_t pass = 0; pass < cfg.passes; ++pass) {
        const double lr = lr_at(pass, cfg.lr, cfg.lr_halve_every);
        const auto perm = sample_without_replacement(items.size(), items.size(), order_rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < perm.size(); b0 += cfg.batch) {
            std::vector<ImageRef> batch;
            std::vector<std::size_t> y;
            for (std::size_t i = b0; i < std::min(perm.size(), b0 + cfg.batch); ++i) {
                batch.push_back(items[perm[i]]);
                y.push_back(labels[perm[i]]);
            }
            Graph g;
            Var loss = scale(mean(pick(log_softmax(logits_of(g, batch), 1), y)), -1.0);
            const double value = loss.value().item();
            if (!std::isfinite(value)) {
                throw NumericAbort("non-finite pretraining loss at pass " + std::to_string(pass + 1) + ", lr " +
                                   std::to_string(lr));
            }
            for (Tensor* t : params) t->zero_grad();
            g.backward(loss);
            if (!opt.step(params, lr)) {
                throw NumericAbort("non-finite pretraining gradient at pass " + std::to_string(pass + 1));
            }
            loss_sum += value;
            ++batches;
        }
        result.pass_loss.push_back(loss_sum / static_cast<double>(batches));
    }

    // Held-in accuracy on a fixed subsample of the train split.
    Rng acc_rng(derive_seed(cfg.seed, "pretrain/accuracy"));
    const std::size_t n_acc = std::min(cfg.accuracy_samples, items.size());
    const auto chosen = sample_without_replacement(items.size(), n_acc, acc_rng);
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < chosen.size(); b0 += 64) {
        std::vector<ImageRef> batch;
        std::vector<std::size_t> y;
        for (std::size_t i = b0; i < std::min(chosen.size(), b0 + 64); ++i) {
            batch.push_back(items[chosen[i]]);
            y.push_back(labels[chosen[i]]);
        }
        Graph g;
        const Tensor& logits = logits_of(g, batch).value();
        const auto pred = argmax_rows(logits);
        for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
    }
    result.train_accuracy = n_acc ? static_cast<double>(correct) / static_cast<double>(n_acc) : 0.0;
    for (Tensor* t : backbone.params().tensors()) t->zero_grad();
    return result;
}

// ---------------------------------------------------------------------------
// Episodic training

struct TrainConfig {
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t queries_per_class = 15;
    std::size_t epochs = 120;
    std::size_t tasks_per_epoch = 100;
    double lr_initial = 0.001;
    std::size_t lr_halve_every = 10;
    double momentum = 0.0;
    std::size_t val_tasks = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_way == 0 || k_shot == 0 || queries_per_class == 0 || epochs == 0 || tasks_per_epoch == 0) {
            throw std::invalid_argument("training counts must be positive");
        }
        if (!(lr_initial >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
    }

    EpisodeShape episode_shape() const { return {n_way, k_shot, queries_per_class}; }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double val_acc = 0.0;
    double seconds = 0.0;
};

struct ConvergenceLog {
    std::vector<EpochRecord> epochs;
};

inline std::string format_real(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

/// CSV with header "epoch,mean_loss,val_acc,seconds".
inline std::string format_convergence_csv(const ConvergenceLog& log, bool include_seconds = true) {
    std::ostringstream os;
    os << "epoch,mean_loss,val_acc,seconds\n";
    for (const auto& r : log.epochs) {
        os << r.epoch << ',' << format_real(r.mean_loss, 9) << ',' << format_real(r.val_acc, 6) << ','
           << (include_seconds ? format_real(r.seconds, 3) : std::string("0")) << '\n';
    }
    return os.str();
}

struct TrainResult {
    ConvergenceLog log;
    std::vector<std::uint64_t> episode_fingerprints;
};

/// Optional per-epoch callback, e.g. for progress output.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Episodic training of backbone and comparator jointly. Training episodes
/// come from one stream seeded by derive_seed(seed, "train/episodes");
/// validation reuses the same val tasks every epoch.
inline TrainResult train(FewShotModel& model, const DatasetStore& store, const SplitManifest& manifest,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    TrainResult result;
    Rng episodes(derive_seed(cfg.seed, "train/episodes"));
    SgdOptimizer opt(cfg.momentum);
    const auto params = model.parameters();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(epoch, cfg.lr_initial, cfg.lr_halve_every);
        double loss_sum = 0.0;
        for (std::size_t task = 0; task < cfg.tasks_per_epoch; ++task) {
            const Episode ep =
                sample_episode(store, manifest, Split::train, cfg.n_way, cfg.k_shot, cfg.queries_per_class, episodes);
            result.episode_fingerprints.push_back(ep.fingerprint());
            Graph g;
            Var loss = episode_loss(model.episode_scores(g, episode_tensors(store, ep), cfg.n_way, cfg.k_shot),
                                    ep.query_labels);
            const double value = loss.value().item();
            const auto where = [&] {
                return "epoch " + std::to_string(epoch + 1) + ", task " + std::to_string(task + 1) + ", lr " +
                       format_real(lr, 8);
            };
            if (!std::isfinite(value)) throw NumericAbort("non-finite training loss at " + where());
            model.zero_grad();
            g.backward(loss);
            if (!opt.step(params, lr)) throw NumericAbort("non-finite gradient at " + where());
            loss_sum += value;
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.mean_loss = loss_sum / static_cast<double>(cfg.tasks_per_epoch);
        rec.val_acc = cfg.val_tasks
                          ? evaluate(model, store, manifest, Split::val, cfg.val_tasks,
                                     derive_seed(cfg.seed, "train/val"), cfg.episode_shape())
                                .mean
                          : 0.0;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    model.zero_grad();
    return result;
}

}  // namespace biattn
