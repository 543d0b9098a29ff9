#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "biattn/graph.hpp"
#include "biattn/ops.hpp"
#include "biattn/params.hpp"
#include "biattn/rng.hpp"

namespace biattn {

enum class BackboneVariant { resnet12, tiny };

inline const char* variant_name(BackboneVariant v) { return v == BackboneVariant::resnet12 ? "resnet12" : "tiny"; }

inline BackboneVariant parse_variant(const std::string& s) {
    if (s == "resnet12") return BackboneVariant::resnet12;
    if (s == "tiny") return BackboneVariant::tiny;
    throw std::invalid_argument("unknown backbone variant '" + s + "' (expected resnet12 or tiny)");
}

/// Four-stage convolutional feature extractor. Each stage halves the spatial
/// size, so an input of side S yields l = stage_channels[3] maps of side S/16.
struct BackboneConfig {
    BackboneVariant variant = BackboneVariant::tiny;
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 64};
    std::size_t in_channels = 1;
    std::size_t input_size = 32;

    std::size_t l() const noexcept { return stage_channels[3]; }
    std::size_t d() const noexcept { return input_size / 16; }
    std::size_t feature_size() const noexcept { return l() * d() * d(); }

    void validate() const {
        if (input_size == 0 || input_size % 16 != 0) {
            throw std::invalid_argument("backbone input size must be a positive multiple of 16, got " +
                                        std::to_string(input_size));
        }
        if (in_channels == 0) throw std::invalid_argument("backbone needs at least one input channel");
        for (std::size_t c : stage_channels) {
            if (c == 0) throw std::invalid_argument("backbone stage channels must be positive");
        }
    }

    static BackboneConfig resnet12_full(std::size_t in_channels, std::size_t input_size) {
        return {BackboneVariant::resnet12, {64, 128, 256, 512}, in_channels, input_size};
    }
};

/// Fan-in scaled uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

class Backbone {
public:
    Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
        config_.validate();
        std::size_t c_in = config_.in_channels;
        for (std::size_t b = 0; b < 4; ++b) {
            const std::size_t c_out = config_.stage_channels[b];
            const std::string pre = block_prefix(b);
            if (config_.variant == BackboneVariant::tiny) {
                add_conv(pre + "conv", c_out, c_in, 3, rng);
                add_affine(pre + "affine", c_out);
            } else {
                std::size_t cin = c_in;
                for (int j = 1; j <= 3; ++j) {
                    add_conv(pre + "conv" + std::to_string(j), c_out, cin, 3, rng);
                    add_affine(pre + "affine" + std::to_string(j), c_out);
                    cin = c_out;
                }
                if (c_in != c_out) add_conv(pre + "proj", c_out, c_in, 1, rng);
            }
            c_in = c_out;
        }
    }

    const BackboneConfig& config() const noexcept { return config_; }
    ParameterStore& params() noexcept { return params_; }
    const ParameterStore& params() const noexcept { return params_; }

    /// images [b, in_channels, S, S] -> embeddings [b, l, d, d].
    Var forward(Graph& g, Var images) {
        const Shape& s = images.shape();
        if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.input_size ||
            s[3] != config_.input_size) {
            throw ShapeError("backbone expects images [b," + std::to_string(config_.in_channels) + "," +
                             std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) +
                             "], got " + to_string(s));
        }
        Var x = images;
        for (std::size_t b = 0; b < 4; ++b) {
            const std::string pre = block_prefix(b);
            if (config_.variant == BackboneVariant::tiny) {
                x = maxpool2d(relu(conv_affine(g, x, pre + "conv", pre + "affine")));
                continue;
            }
            Var y = relu(conv_affine(g, x, pre + "conv1", pre + "affine1"));
            y = relu(conv_affine(g, y, pre + "conv2", pre + "affine2"));
            y = conv_affine(g, y, pre + "conv3", pre + "affine3");
            Var shortcut = params_.contains(pre + "proj/weight") ? conv2d(x, g.param(params_.get(pre + "proj/weight")))
                                                                  : x;
            x = maxpool2d(relu(add(y, shortcut)));
        }
        return x;
    }

    static std::string block_prefix(std::size_t b) { return "backbone/block" + std::to_string(b + 1) + "/"; }

private:
    void add_conv(const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) {
        params_.add(name + "/weight", fan_in_uniform(Shape{c_out, c_in, k, k}, c_in * k * k, rng));
    }
    void add_affine(const std::string& name, std::size_t c) {
        params_.add(name + "/scale", Tensor::ones(Shape{c}));
        params_.add(name + "/shift", Tensor::zeros(Shape{c}));
    }
    Var conv_affine(Graph& g, Var x, const std::string& conv, const std::string& affine) {
        Var y = conv2d(x, g.param(params_.get(conv + "/weight")));
        return channel_affine(y, g.param(params_.get(affine + "/scale")), g.param(params_.get(affine + "/shift")));
    }

    BackboneConfig config_;
    ParameterStore params_;
};

}  // namespace biattn
