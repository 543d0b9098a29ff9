#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "biattn/binary_io.hpp"
#include "biattn/rng.hpp"
#include "biattn/tensor.hpp"

namespace biattn {

/// Labeled image collection with a fixed number of samples per class.
/// Pixels are stored class-major, then sample-major, row-major per image.
struct DatasetStore {
    std::uint32_t num_classes = 0;
    std::uint32_t samples_per_class = 0;
    std::uint16_t channels = 0;
    std::uint16_t height = 0;
    std::uint16_t width = 0;
    std::vector<std::uint8_t> pixels;

    std::size_t image_size() const noexcept {
        return std::size_t{channels} * height * width;
    }
    std::size_t expected_pixels() const noexcept {
        return std::size_t{num_classes} * samples_per_class * image_size();
    }
    const std::uint8_t* image(std::size_t cls, std::size_t sample) const {
        return pixels.data() + (cls * samples_per_class + sample) * image_size();
    }

    friend bool operator==(const DatasetStore&, const DatasetStore&) = default;
};

inline constexpr char kDatasetMagic[] = "FSDS";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline Bytes encode_dataset(const DatasetStore& ds) {
    if (ds.pixels.size() != ds.expected_pixels()) {
        throw HeaderMismatchError("dataset pixel buffer does not match its header");
    }
    ByteWriter w;
    w.raw(std::string_view(kDatasetMagic, 4));
    w.u16(kDatasetVersion);
    w.u32(ds.num_classes);
    w.u32(ds.samples_per_class);
    w.u16(ds.channels);
    w.u16(ds.height);
    w.u16(ds.width);
    w.bytes(ds.pixels.data(), ds.pixels.size());
    return w.take();
}

inline DatasetStore decode_dataset(const Bytes& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.raw(4) != std::string_view(kDatasetMagic, 4)) {
        throw BadMagicError("not a dataset file (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != kDatasetVersion) {
        throw HeaderMismatchError("unsupported dataset version " + std::to_string(version));
    }
    DatasetStore ds;
    ds.num_classes = r.u32();
    ds.samples_per_class = r.u32();
    ds.channels = r.u16();
    ds.height = r.u16();
    ds.width = r.u16();
    if (ds.num_classes == 0 || ds.samples_per_class == 0 || ds.channels == 0 || ds.height == 0 || ds.width == 0) {
        throw HeaderMismatchError("dataset header has a zero dimension");
    }
    const std::size_t n = ds.expected_pixels();
    if (r.remaining() < n) {
        throw TruncatedError("dataset truncated: header declares " + std::to_string(n) + " pixel bytes, " +
                             std::to_string(r.remaining()) + " present");
    }
    if (r.remaining() > n) {
        throw HeaderMismatchError("dataset has " + std::to_string(r.remaining() - n) +
                                  " bytes beyond the declared pixel buffer");
    }
    const std::uint8_t* p = r.bytes(n);
    ds.pixels.assign(p, p + n);
    return ds;
}

inline void write_dataset(const std::string& path, const DatasetStore& ds) { write_file(path, encode_dataset(ds)); }
inline DatasetStore load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

/// Mean raw pixel value (0..255) of every class.
inline std::vector<double> class_pixel_means(const DatasetStore& ds) {
    std::vector<double> means(ds.num_classes, 0.0);
    const std::size_t per_class = std::size_t{ds.samples_per_class} * ds.image_size();
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        const std::uint8_t* p = ds.image(c, 0);
        double total = 0.0;
        for (std::size_t i = 0; i < per_class; ++i) total += p[i];
        means[c] = total / static_cast<double>(per_class);
    }
    return means;
}

/// Stacks the given (class, sample) images into a [b, c, h, w] tensor with
/// pixels scaled by 1/255.
inline Tensor images_to_tensor(const DatasetStore& ds, const std::vector<std::pair<std::size_t, std::size_t>>& items) {
    const std::size_t isz = ds.image_size();
    Tensor out(Shape{items.size(), ds.channels, ds.height, ds.width});
    for (std::size_t i = 0; i < items.size(); ++i) {
        const std::uint8_t* src = ds.image(items[i].first, items[i].second);
        for (std::size_t k = 0; k < isz; ++k) out[i * isz + k] = src[k] / 255.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
    std::uint32_t num_classes = 100;
    std::uint32_t samples_per_class = 120;
    std::uint16_t size = 32;
    std::uint16_t channels = 1;
    std::uint64_t seed = 0;
};

/// Procedural stand-in for a natural-image benchmark.
///
/// Class c is an oriented grating (10 orientations, 5 spatial frequencies)
/// overlaid with a Gaussian blob at one of 25 class-specific grid positions
/// whose polarity flips for c >= 50. Every sample redraws the grating phase,
/// shifts the whole pattern by up to 2 px in each axis and adds Gaussian
/// noise with sigma = 0.05 of the pixel range.
inline DatasetStore generate_synthetic(const SyntheticSpec& spec) {
    if (spec.size < 16) throw std::invalid_argument("synthetic images must be at least 16 px");
    if (spec.num_classes < 10) throw std::invalid_argument("synthetic dataset needs at least 10 classes");
    if (spec.samples_per_class == 0 || spec.channels == 0) {
        throw std::invalid_argument("synthetic dataset needs positive samples_per_class and channels");
    }
    DatasetStore ds;
    ds.num_classes = spec.num_classes;
    ds.samples_per_class = spec.samples_per_class;
    ds.channels = spec.channels;
    ds.height = spec.size;
    ds.width = spec.size;
    ds.pixels.resize(ds.expected_pixels());

    const double S = spec.size;
    const double pi = std::numbers::pi;
    Rng rng(derive_seed(spec.seed, "dataset/synthetic"));
    for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
        const double angle = pi * static_cast<double>(c % 10) / 10.0;
        const double cycles = 1.5 + static_cast<double>((c / 10) % 5);
        const std::uint32_t cell = (7 * c + c / 25) % 25;
        const double bx = S * (0.2 + 0.15 * (cell % 5));
        const double by = S * (0.2 + 0.15 * (cell / 5));
        const double polarity = (c / 50) % 2 == 0 ? 1.0 : -1.0;
        const double blob_sigma = S / 9.0;
        const double kx = 2.0 * pi * cycles / S * std::cos(angle);
        const double ky = 2.0 * pi * cycles / S * std::sin(angle);
        for (std::uint32_t s = 0; s < spec.samples_per_class; ++s) {
            const double phase = rng.uniform(0.0, 2.0 * pi);
            const double tx = static_cast<double>(rng.below(5)) - 2.0;
            const double ty = static_cast<double>(rng.below(5)) - 2.0;
            std::uint8_t* img = ds.pixels.data() + (std::size_t{c} * ds.samples_per_class + s) * ds.image_size();
            for (std::uint16_t ch = 0; ch < spec.channels; ++ch) {
                const double channel_gain = 1.0 - 0.15 * ch;
                for (std::uint16_t y = 0; y < spec.size; ++y) {
                    for (std::uint16_t x = 0; x < spec.size; ++x) {
                        const double u = x - tx, v = y - ty;
                        const double grating = std::cos(kx * u + ky * v + phase);
                        const double dx = u - bx, dy = v - by;
                        const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
                        double val = 0.5 + 0.2 * channel_gain * grating + 0.3 * polarity * blob;
                        val += 0.05 * rng.normal();
                        val = std::clamp(val, 0.0, 1.0);
                        img[(std::size_t{ch} * spec.size + y) * spec.size + x] =
                            static_cast<std::uint8_t>(std::lround(val * 255.0));
                    }
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Class splits

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SplitManifest {
    std::vector<std::uint32_t> train_classes;
    std::vector<std::uint32_t> val_classes;
    std::vector<std::uint32_t> test_classes;

    const std::vector<std::uint32_t>& classes(Split s) const {
        switch (s) {
            case Split::train: return train_classes;
            case Split::val: return val_classes;
            case Split::test: return test_classes;
        }
        return train_classes;
    }

    /// Throws ManifestError unless the splits are pairwise disjoint and within
    /// [0, num_classes).
    void validate(std::uint32_t num_classes) const {
        std::set<std::uint32_t> seen;
        for (Split s : {Split::train, Split::val, Split::test}) {
            for (std::uint32_t c : classes(s)) {
                if (c >= num_classes) {
                    throw ManifestError(std::string("class ") + std::to_string(c) + " in split " + split_name(s) +
                                        " is out of range for " + std::to_string(num_classes) + " classes");
                }
                if (!seen.insert(c).second) {
                    throw ManifestError("class " + std::to_string(c) + " appears in more than one split");
                }
            }
        }
    }

    friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

/// Contiguous 60/20/20 split (by percentage) of the class range.
inline SplitManifest default_manifest(std::uint32_t num_classes) {
    SplitManifest m;
    const std::uint32_t n_train = num_classes * 3 / 5;
    const std::uint32_t n_val = num_classes / 5;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        if (c < n_train) {
            m.train_classes.push_back(c);
        } else if (c < n_train + n_val) {
            m.val_classes.push_back(c);
        } else {
            m.test_classes.push_back(c);
        }
    }
    return m;
}

inline std::string format_manifest(const SplitManifest& m) {
    std::ostringstream os;
    for (Split s : {Split::train, Split::val, Split::test}) {
        os << split_name(s) << ":";
        const auto& cls = m.classes(s);
        for (std::size_t i = 0; i < cls.size(); ++i) os << (i ? "," : " ") << cls[i];
        os << "\n";
    }
    return os.str();
}

inline SplitManifest parse_manifest(const std::string& text) {
    SplitManifest m;
    bool have[3] = {false, false, false};
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos) throw ManifestError("manifest line without ':' : " + line);
        std::string key = line.substr(0, colon);
        key.erase(0, key.find_first_not_of(" \t"));
        key.erase(key.find_last_not_of(" \t") + 1);
        Split s;
        try {
            s = parse_split(key);
        } catch (const std::invalid_argument&) {
            throw ManifestError("unknown manifest section '" + key + "'");
        }
        if (have[static_cast<int>(s)]) throw ManifestError("duplicate manifest section '" + key + "'");
        have[static_cast<int>(s)] = true;
        auto& dst = s == Split::train ? m.train_classes : s == Split::val ? m.val_classes : m.test_classes;
        std::istringstream items(line.substr(colon + 1));
        std::string tok;
        while (std::getline(items, tok, ',')) {
            tok.erase(0, tok.find_first_not_of(" \t"));
            tok.erase(tok.find_last_not_of(" \t") + 1);
            if (tok.empty()) continue;
            std::size_t used = 0;
            unsigned long v = 0;
            try {
                v = std::stoul(tok, &used);
            } catch (const std::exception&) {
                throw ManifestError("bad class index '" + tok + "'");
            }
            if (used != tok.size()) throw ManifestError("bad class index '" + tok + "'");
            dst.push_back(static_cast<std::uint32_t>(v));
        }
    }
    if (!have[0] || !have[1] || !have[2]) throw ManifestError("manifest needs train:, val: and test: lines");
    m.validate(UINT32_MAX);
    return m;
}

}  // namespace biattn
