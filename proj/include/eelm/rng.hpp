#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace eelm {

// splitmix64, used for seeding and for deriving per-sample / per-stage seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t splitmix64_once(uint64_t seed) {
    return splitmix64(seed);
}

// Per-sample seed: one splitmix64 step over (global_seed, index).
inline uint64_t derive_seed(uint64_t global_seed, uint64_t index) {
    uint64_t s = global_seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    return splitmix64(s);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stage-scoped seed for CLI subcommands and pipeline phases.
inline uint64_t stage_seed(uint64_t global_seed, std::string_view stage) {
    uint64_t s = global_seed ^ fnv1a64(stage);
    return splitmix64(s);
}

// xoshiro256** seeded via splitmix64. Fixed algorithm so that identical seeds
// give identical draw sequences on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
        has_spare_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1), 53-bit resolution.
    double next_f64() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float next_f32() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    // Unbiased-enough integer in [0, n) via 128-bit multiply-shift.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller; caches the second value of each pair.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_f64();
        double u2 = next_f64();
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace eelm
