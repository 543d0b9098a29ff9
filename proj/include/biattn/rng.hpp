#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string_view>

namespace biattn {

/// 64-bit FNV-1a over the bytes of a name.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named component: fnv1a64(name) xor seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view component) noexcept {
    return fnv1a64(component) ^ seed;
}

/// Portable random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard distributions are implementation-defined, so every
/// draw below is derived from raw 64-bit outputs with fixed formulas:
///   uniform()  = (u >> 11) * 2^-53
///   below(n)   = rejection sampling on u against the largest multiple of n
///   normal()   = Box-Muller on two uniform() draws (no cached second value)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below requires n > 0");
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
        std::uint64_t u;
        do {
            u = engine_();
        } while (u >= limit);
        return u % n;
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace biattn
