#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace nnfi {

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Counter-based generator: output i of a stream is a pure function of
/// (key, i), where the key is derived from (seed, trial, stream name).
/// Streams for different layers or trials never share state, so the order in
/// which they are consumed does not matter.
class Rng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

    Rng() = default;
    explicit Rng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}
    Rng(std::uint64_t seed, std::uint64_t trial, std::string_view stream)
        : key_(mix64(seed + kGolden) ^ mix64(mix64(trial + 2 * kGolden) ^ fnv1a(stream))) {}

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * kGolden);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Unbiased uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) noexcept {
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Standard normal via Box-Muller (one variate per call, two draws).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t key_ = mix64(kGolden);
    std::uint64_t counter_ = 0;
};

} // namespace nnfi
