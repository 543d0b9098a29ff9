// Command-line driver: dataset generation, pretraining, episodic training,
// evaluation, gradient checks and the paired comparator study.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "biattn/biattn.hpp"

namespace fs = std::filesystem;
using namespace biattn;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::string> comparator;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool need_out) {
    cmd->add_option("--config", f.config, "run config file (key = value)")->required();
    cmd->add_option("--seed", f.seed, "overrides the config seed");
    auto* out = cmd->add_option("--out", f.out, "output directory");
    if (need_out) out->required();
    cmd->add_option("--comparator", f.comparator, "biattn, relation or proto")
        ->check(CLI::IsMember({"biattn", "relation", "proto"}));
}

RunConfig resolve(const CommonFlags& f) {
    RunConfig cfg = RunConfig::load(f.config);
    if (f.seed) cfg.set("seed", std::to_string(*f.seed));
    if (f.comparator) cfg.set("comparator", *f.comparator);
    return cfg;
}

void ensure_parent(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

struct Data {
    DatasetStore store;
    SplitManifest manifest;
};

Data load_data(const RunConfig& cfg) {
    Data d{load_dataset(cfg.get("dataset")), {}};
    if (cfg.get("manifest").empty()) {
        d.manifest = default_manifest(d.store.num_classes);
    } else {
        std::ifstream in(cfg.get("manifest"));
        if (!in) throw ConfigError("cannot open manifest " + cfg.get("manifest"));
        std::ostringstream os;
        os << in.rdbuf();
        d.manifest = parse_manifest(os.str());
    }
    d.manifest.validate(d.store.num_classes);
    return d;
}

fs::path prepare_out(const std::string& dir, const RunConfig& cfg) {
    fs::path out(dir);
    fs::create_directories(out);
    write_text(out / "config.txt", cfg.echo());
    return out;
}

void print_epoch(const char* tag, const EpochRecord& r) {
    std::printf("[%s] epoch %zu  loss %.6f  val_acc %.4f  (%.1fs)\n", tag, r.epoch, r.mean_loss, r.val_acc, r.seconds);
    std::fflush(stdout);
}

int cmd_dataset_gen(std::uint32_t classes, std::uint32_t per_class, std::uint16_t size, std::uint16_t channels,
                    std::uint64_t seed, const std::string& out, const std::string& manifest_out) {
    const DatasetStore ds = generate_synthetic({classes, per_class, size, channels, seed});
    ensure_parent(out);
    write_dataset(out, ds);
    if (!manifest_out.empty()) ensure_parent(manifest_out);
    if (!manifest_out.empty()) write_text(manifest_out, format_manifest(default_manifest(classes)));
    std::printf("wrote %s: classes=%u per_class=%u size=%u channels=%u\n", out.c_str(), classes, per_class, size,
                channels);
    return 0;
}

int cmd_dataset_inspect(const std::string& file) {
    const DatasetStore ds = load_dataset(file);
    std::printf("classes=%u\nsamples_per_class=%u\nchannels=%u\nheight=%u\nwidth=%u\n", ds.num_classes,
                ds.samples_per_class, ds.channels, ds.height, ds.width);
    const auto means = class_pixel_means(ds);
    for (std::size_t c = 0; c < means.size(); ++c) std::printf("class %zu mean %.3f\n", c, means[c]);
    return 0;
}

int cmd_pretrain(const CommonFlags& f) {
    const RunConfig cfg = resolve(f);
    const Data data = load_data(cfg);
    const fs::path out = prepare_out(f.out, cfg);
    FewShotModel model(cfg.model_config(data.store), cfg.seed());
    const PretrainResult res = pretrain_backbone(model.backbone(), data.store, data.manifest, cfg.pretrain_config());
    std::ostringstream csv;
    csv << "pass,mean_loss\n";
    for (std::size_t i = 0; i < res.pass_loss.size(); ++i) {
        csv << i + 1 << ',' << format_real(res.pass_loss[i], 9) << '\n';
    }
    write_text(out / "pretrain.csv", csv.str());
    save_checkpoint((out / "backbone.fswt").string(), to_named(model.backbone().params()));
    std::printf("pretrain: %zu passes, train-split accuracy %.4f over %zu classes\n", res.pass_loss.size(),
                res.train_accuracy, res.num_classes);
    return 0;
}

void load_initial(FewShotModel& model, const RunConfig& cfg) {
    const std::string& init = cfg.get("init_checkpoint");
    if (init.empty()) return;
    const NamedTensors entries = load_checkpoint(init);
    load_into(model.backbone().params(), entries);
    bool has_comparator = !model.comparator_params().empty();
    for (const auto& name : model.comparator_params().names()) {
        bool found = false;
        for (const auto& e : entries) found = found || e.first == name;
        has_comparator = has_comparator && found;
    }
    if (has_comparator) load_into(model.comparator_params(), entries);
}

int cmd_train(const CommonFlags& f, std::optional<std::size_t> tasks) {
    const RunConfig cfg = resolve(f);
    const Data data = load_data(cfg);
    const fs::path out = prepare_out(f.out, cfg);
    FewShotModel model(cfg.model_config(data.store), cfg.seed());
    load_initial(model, cfg);
    const TrainResult res = train(model, data.store, data.manifest, cfg.train_config(),
                                  [&](const EpochRecord& r) { print_epoch(cfg.get("comparator").c_str(), r); });
    write_text(out / "convergence.csv", format_convergence_csv(res.log));
    save_checkpoint((out / "model.fswt").string(), model.named_tensors());
    const std::size_t n_eval = tasks.value_or(cfg.count("eval_tasks"));
    if (n_eval > 0) {
        const EvalReport rep =
            evaluate(model, data.store, data.manifest, Split::test, n_eval, cfg.seed(), cfg.episode_shape());
        const std::string line = format_report(rep);
        write_text(out / "report.txt", line + "\n");
        std::printf("%s\n", line.c_str());
    }
    return 0;
}

int cmd_eval(const CommonFlags& f, std::optional<std::size_t> tasks, const std::string& split,
             const std::string& checkpoint) {
    RunConfig cfg = resolve(f);
    if (!checkpoint.empty()) cfg.set("checkpoint", checkpoint);
    const Data data = load_data(cfg);
    FewShotModel model(cfg.model_config(data.store), cfg.seed());
    if (!cfg.get("checkpoint").empty()) {
        model.load(load_checkpoint(cfg.get("checkpoint")));
    } else {
        load_initial(model, cfg);
    }
    const EvalReport rep = evaluate(model, data.store, data.manifest, parse_split(split),
                                    tasks.value_or(cfg.count("eval_tasks")), cfg.seed(), cfg.episode_shape());
    const std::string line = format_report(rep);
    if (!f.out.empty()) {
        const fs::path out = prepare_out(f.out, cfg);
        write_text(out / "report.txt", line + "\n");
    }
    std::printf("%s\n", line.c_str());
    return 0;
}

int cmd_gradcheck(bool inject_bug, std::size_t seeds) {
    testing_hooks::flip_sigmoid_backward = inject_bug;
    SuiteOptions opt;
    opt.seeds_per_case = seeds;
    bool all = true;
    for (const SuiteEntry& e : run_gradcheck_suite(opt)) {
        std::printf("%-24s seeds=%zu checked=%zu skipped=%zu max_rel_err=%.3e %s\n", e.name.c_str(), e.seeds,
                    e.coords_checked, e.coords_skipped, e.max_rel_err, e.pass ? "PASS" : "FAIL");
        all = all && e.pass;
    }
    std::printf("%s\n", all ? "gradcheck: all passed" : "gradcheck: FAILURES");
    return all ? 0 : 1;
}

int cmd_compare_baselines(const CommonFlags& f) {
    RunConfig cfg = resolve(f);
    const Data data = load_data(cfg);
    const fs::path out = prepare_out(f.out, cfg);
    std::vector<std::uint64_t> reference;
    std::vector<ConvergenceLog> logs;
    const std::vector<std::string> kinds{"biattn", "relation", "proto"};
    for (const std::string& kind : kinds) {
        RunConfig run = cfg;
        run.set("comparator", kind);
        FewShotModel model(run.model_config(data.store), run.seed());
        load_initial(model, run);
        const TrainResult res = train(model, data.store, data.manifest, run.train_config(),
                                      [&](const EpochRecord& r) { print_epoch(kind.c_str(), r); });
        write_text(out / ("convergence_" + kind + ".csv"), format_convergence_csv(res.log));
        std::ostringstream hashes;
        for (std::uint64_t h : res.episode_fingerprints) hashes << std::hex << h << '\n';
        write_text(out / ("episodes_" + kind + ".txt"), hashes.str());
        if (reference.empty()) {
            reference = res.episode_fingerprints;
        } else if (reference != res.episode_fingerprints) {
            throw std::logic_error("episode streams differ between comparators");
        }
        logs.push_back(res.log);
    }
    std::printf("epoch");
    for (const auto& k : kinds) std::printf("  %12s", k.c_str());
    std::printf("\n");
    for (std::size_t e = 0; e < logs[0].epochs.size(); ++e) {
        std::printf("%5zu", e + 1);
        for (const auto& log : logs) std::printf("  %12.6f", log.epochs[e].mean_loss);
        std::printf("\n");
    }
    std::printf("episode streams identical across comparators (%zu episodes)\n", reference.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot classification with a bi-attention compare network"};
    app.require_subcommand(1);

    auto* dataset = app.add_subcommand("dataset", "generate or inspect FSDS datasets");
    dataset->require_subcommand(1);
    auto* gen = dataset->add_subcommand("gen", "write a synthetic dataset");
    std::uint32_t classes = 100, per_class = 120;
    std::uint16_t size = 32, channels = 1;
    std::uint64_t data_seed = 0;
    std::string data_out, manifest_out;
    gen->add_option("--classes", classes)->check(CLI::Range(10u, 1000000u));
    gen->add_option("--per-class", per_class)->check(CLI::PositiveNumber);
    gen->add_option("--size", size)->check(CLI::Range(16, 4096));
    gen->add_option("--channels", channels)->check(CLI::Range(1, 16));
    gen->add_option("--seed", data_seed);
    gen->add_option("--out", data_out, "dataset file to write")->required();
    gen->add_option("--manifest", manifest_out, "also write the default 60/20/20 class split");
    auto* inspect = dataset->add_subcommand("inspect", "print header and per-class pixel means");
    std::string inspect_file;
    inspect->add_option("file", inspect_file)->required();

    CommonFlags common;
    std::optional<std::size_t> tasks;
    std::string split = "test", checkpoint;

    auto* pretrain = app.add_subcommand("pretrain", "pretrain the backbone on train-split classification");
    add_common(pretrain, common, true);
    auto* train_cmd = app.add_subcommand("train", "episodic training, then test evaluation");
    add_common(train_cmd, common, true);
    train_cmd->add_option("--tasks", tasks, "test tasks after training (0 skips)");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, common, false);
    eval->add_option("--tasks", tasks, "number of tasks");
    eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--checkpoint", checkpoint, "FSWT checkpoint (overrides config)");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    bool inject_bug = false;
    std::size_t gc_seeds = 5;
    gradcheck->add_flag("--inject-bug", inject_bug, "flip the sign of one backward rule");
    gradcheck->add_option("--seeds", gc_seeds, "random seeds per case")->check(CLI::PositiveNumber);
    auto* compare = app.add_subcommand("compare-baselines", "paired convergence runs for all comparators");
    add_common(compare, common, true);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_dataset_gen(classes, per_class, size, channels, data_seed, data_out, manifest_out);
        if (inspect->parsed()) return cmd_dataset_inspect(inspect_file);
        if (pretrain->parsed()) return cmd_pretrain(common);
        if (train_cmd->parsed()) return cmd_train(common, tasks);
        if (eval->parsed()) return cmd_eval(common, tasks, split, checkpoint);
        if (gradcheck->parsed()) return cmd_gradcheck(inject_bug, gc_seeds);
        if (compare->parsed()) return cmd_compare_baselines(common);
    } catch (const NumericAbort& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    }
    return kExitConfig;
}
