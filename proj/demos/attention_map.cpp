// Prints the per-head bi-attention matrices for one query/class pair built
// from two hand-made feature maps, so the row-stochastic weights can be read
// off directly.

#include <cmath>
#include <cstdio>

#include "biattn/biattn.hpp"

using namespace biattn;

int main() {
    const std::size_t l = 4, d = 2, hidden = 8, heads = 2;
    Rng rng(7);
    BiAttentionParams params(BiAttentionConfig{heads, hidden, sequence_length(l, d, hidden), 0.0}, rng);
    Tensor query({1, l, d, d}), cls({1, l, d, d});
    for (std::size_t i = 0; i < query.numel(); ++i) {
        query[i] = std::sin(0.7 * static_cast<double>(i));
        cls[i] = std::cos(0.3 * static_cast<double>(i));
    }
    Graph g;
    std::vector<Var> attention;
    const Var x = bi_attention_compare(g.constant(query), g.constant(cls), params, &attention);
    std::printf("l_h = %zu, d_h = %zu, heads = %zu\n", params.config().seq_len, hidden, heads);
    for (std::size_t h = 0; h < attention.size(); ++h) {
        const Tensor& a = attention[h].value();
        std::printf("head %zu\n", h + 1);
        for (std::size_t r = 0; r < a.dim(1); ++r) {
            double sum = 0.0;
            std::printf(" ");
            for (std::size_t c = 0; c < a.dim(2); ++c) {
                std::printf(" %.4f", a.at({0, r, c}));
                sum += a.at({0, r, c});
            }
            std::printf("   (row sum %.12f)\n", sum);
        }
    }
    std::printf("score = %.6f\n", x.value().item());
}
