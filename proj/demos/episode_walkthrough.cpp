// Samples one 5-way 1-shot episode from a small synthetic store, scores it
// with an untrained proto comparator and an untrained bi-attention
// comparator, and prints the score matrices and predictions.

#include <cstdio>

#include "biattn/biattn.hpp"

using namespace biattn;

static void print_scores(const char* title, const Tensor& x, const std::vector<std::size_t>& labels) {
    std::printf("%s\n", title);
    const auto pred = argmax_rows(x);
    for (std::size_t j = 0; j < x.dim(0); ++j) {
        std::printf("  q%-2zu", j);
        for (std::size_t n = 0; n < x.dim(1); ++n) std::printf(" %9.4f", x.at({j, n}));
        std::printf("   label %zu pred %zu\n", labels[j], pred[j]);
    }
    std::printf("  accuracy %.2f\n", episode_accuracy(x, labels));
}

int main() {
    SyntheticSpec spec;
    spec.samples_per_class = 20;
    spec.seed = 3;
    const DatasetStore store = generate_synthetic(spec);
    const SplitManifest manifest = default_manifest(store.num_classes);
    Rng rng(42);
    const Episode ep = sample_episode(store, manifest, Split::test, 5, 1, 2, rng);
    std::printf("classes:");
    for (auto c : ep.classes) std::printf(" %u", static_cast<unsigned>(c));
    std::printf("\n");
    const EpisodeTensors images = episode_tensors(store, ep);
    for (ComparatorKind kind : {ComparatorKind::proto, ComparatorKind::biattn}) {
        ModelConfig mc;
        mc.backbone = BackboneConfig{BackboneVariant::tiny, {16, 32, 64, 64}, 1, store.height};
        mc.comparator = kind;
        FewShotModel model(mc, 1);
        Graph g;
        const Var x = model.episode_scores(g, images, 5, 1);
        print_scores(comparator_name(kind), x.value(), ep.query_labels);
    }
}
