#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/backbone.hpp"
#include "biattn/dataset.hpp"
#include "biattn/model.hpp"
#include "biattn/training.hpp"

namespace biattn {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat "key = value" run configuration. Lines starting with '#' and text
/// after a '#' are comments. Every key has a default; unknown keys are
/// rejected.
class RunConfig {
public:
    RunConfig() : values_(defaults()) {}

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"dataset", "synthetic.fsds"},
            {"manifest", ""},
            {"variant", "tiny"},
            {"stage_channels", "16,32,64,64"},
            {"comparator", "biattn"},
            {"heads", "8"},
            {"hidden", "128"},
            {"scale_dim", "0"},
            {"relation_channels", "64"},
            {"relation_hidden", "64"},
            {"n_way", "5"},
            {"k_shot", "1"},
            {"queries_per_class", "15"},
            {"epochs", "120"},
            {"tasks_per_epoch", "100"},
            {"lr_initial", "0.001"},
            {"lr_halve_every", "10"},
            {"optimizer", "sgd"},
            {"momentum", "0.9"},
            {"val_tasks", "100"},
            {"eval_tasks", "600"},
            {"pretrain_passes", "10"},
            {"pretrain_lr", "0.01"},
            {"pretrain_batch", "32"},
            {"init_checkpoint", ""},
            {"checkpoint", ""},
            {"seed", "0"},
        };
        return d;
    }

    static RunConfig parse(const std::string& text) {
        RunConfig cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string body = trim(line);
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
            }
            cfg.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
        }
        cfg.check();
        return cfg;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return parse(os.str());
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    std::size_t count(const std::string& key) const {
        const std::string& v = get(key);
        std::size_t used = 0;
        unsigned long long n = 0;
        try {
            n = std::stoull(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != v.size() || v.empty() || v[0] == '-') {
            throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + v + "'");
        }
        return static_cast<std::size_t>(n);
    }

    double real(const std::string& key) const {
        const std::string& v = get(key);
        std::size_t used = 0;
        double x = 0.0;
        try {
            x = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != v.size() || v.empty()) {
            throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
        }
        return x;
    }

    std::uint64_t seed() const { return static_cast<std::uint64_t>(count("seed")); }

    /// Fully resolved config, one "key = value" line per key in sorted order.
    std::string echo() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
        return os.str();
    }

    friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.values_ == b.values_; }

    ModelConfig model_config(const DatasetStore& store) const {
        ModelConfig mc;
        mc.backbone.variant = parse_variant(get("variant"));
        mc.backbone.stage_channels = stage_channels();
        mc.backbone.in_channels = store.channels;
        if (store.height != store.width) throw ConfigError("dataset images must be square");
        mc.backbone.input_size = store.height;
        mc.comparator = parse_comparator(get("comparator"));
        mc.heads = count("heads");
        mc.hidden = count("hidden");
        mc.scale_dim = real("scale_dim");
        mc.relation_channels = count("relation_channels");
        mc.relation_hidden = count("relation_hidden");
        return mc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.n_way = count("n_way");
        tc.k_shot = count("k_shot");
        tc.queries_per_class = count("queries_per_class");
        tc.epochs = count("epochs");
        tc.tasks_per_epoch = count("tasks_per_epoch");
        tc.lr_initial = real("lr_initial");
        tc.lr_halve_every = count("lr_halve_every");
        tc.momentum = momentum();
        tc.val_tasks = count("val_tasks");
        tc.seed = seed();
        return tc;
    }

    PretrainConfig pretrain_config() const {
        PretrainConfig pc;
        pc.passes = count("pretrain_passes");
        pc.lr = real("pretrain_lr");
        pc.lr_halve_every = count("lr_halve_every");
        pc.momentum = momentum();
        pc.batch = count("pretrain_batch");
        pc.seed = seed();
        return pc;
    }

    EpisodeShape episode_shape() const { return {count("n_way"), count("k_shot"), count("queries_per_class")}; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    double momentum() const {
        const std::string& opt = get("optimizer");
        if (opt == "sgd") return 0.0;
        if (opt == "sgd_momentum") return real("momentum");
        throw ConfigError("optimizer must be sgd or sgd_momentum, got '" + opt + "'");
    }

    std::array<std::size_t, 4> stage_channels() const {
        std::array<std::size_t, 4> out{};
        std::istringstream in(get("stage_channels"));
        std::string tok;
        std::size_t i = 0;
        while (std::getline(in, tok, ',')) {
            tok = trim(tok);
            if (i >= 4 || tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
                throw ConfigError("stage_channels must be four comma-separated positive integers");
            }
            out[i++] = std::stoul(tok);
        }
        if (i != 4) throw ConfigError("stage_channels must be four comma-separated positive integers");
        return out;
    }

    // Validates typed fields eagerly so a bad config fails at parse time.
    void check() const {
        parse_variant(get("variant"));
        parse_comparator(get("comparator"));
        stage_channels();
        momentum();
        for (const char* k : {"heads", "hidden", "relation_channels", "relation_hidden", "n_way", "k_shot",
                              "queries_per_class", "epochs", "tasks_per_epoch", "lr_halve_every", "val_tasks",
                              "eval_tasks", "pretrain_passes", "pretrain_batch", "seed"}) {
            count(k);
        }
        for (const char* k : {"scale_dim", "lr_initial", "pretrain_lr"}) real(k);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace biattn
