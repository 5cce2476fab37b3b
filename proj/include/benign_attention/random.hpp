#pragma once

// Counter-based random streams (Philox4x32-10) keyed by (seed, purpose tag).
// Gaussians come from Box-Muller so draws are identical on every platform.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace battn {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (splitmix64(b) + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
}

class Philox4x32 {
public:
    using Block = std::array<std::uint32_t, 4>;

    explicit Philox4x32(std::uint64_t key) : key_{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)} {}

    Block operator()(std::uint64_t counter) const {
        Block c{static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32), 0u, 0u};
        std::uint32_t k0 = key_[0];
        std::uint32_t k1 = key_[1];
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
            const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const auto lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const auto lo1 = static_cast<std::uint32_t>(p1);
            c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return c;
    }

private:
    std::array<std::uint32_t, 2> key_;
};

/// A named, seekable stream of uniform and Gaussian variates.
class RandomStream {
public:
    RandomStream(std::uint64_t base_seed, std::string_view tag)
        : key_(hash_combine(splitmix64(base_seed), fnv1a64(tag))), gen_(key_) {}

    /// Independent child stream; the parent is not advanced.
    [[nodiscard]] RandomStream split(std::string_view tag) const { return RandomStream(key_, tag); }
    [[nodiscard]] RandomStream split(std::uint64_t index) const {
        return RandomStream(hash_combine(key_, index), "index");
    }

    std::uint32_t next_u32() {
        if (lane_ == 4) {
            block_ = gen_(counter_++);
            lane_ = 0;
        }
        return block_[lane_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform on the open interval (0, 1).
    double uniform() {
        const std::uint64_t bits = next_u64() >> 11;
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double stddev) { return stddev * normal(); }

    bool bernoulli(double prob) { return uniform() < prob; }

    /// +1 or -1 with equal probability.
    int sign() { return (next_u32() & 1u) ? 1 : -1; }

    /// Uniform integer in [0, bound).
    std::uint32_t below(std::uint32_t bound) {
        return static_cast<std::uint32_t>((static_cast<std::uint64_t>(next_u32()) * bound) >> 32);
    }

    [[nodiscard]] std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
    Philox4x32 gen_;
    std::uint64_t counter_ = 0;
    Philox4x32::Block block_{};
    int lane_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace battn
