#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace hpdm {

// Counter-based splittable generator. Every draw is a pure function of
// (key, counter), so parallel workers fork disjoint streams and any stream
// can be reconstructed from scratch (training resume relies on this).
// Core mixer is splitmix64; normal variates come from an explicit
// Box-Muller so results do not depend on the platform's libstdc++.
struct Rng {
    uint64_t key = 0;
    uint64_t ctr = 0;

    explicit Rng(uint64_t seed = 0) : key(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Child stream with an independent counter. fork(a).fork(b) != fork(b).fork(a).
    Rng fork(uint64_t tag) const {
        Rng child(0);
        child.key = mix(key ^ mix(tag ^ 0xd1b54a32d192ed03ull));
        child.ctr = 0;
        return child;
    }

    Rng fork(std::string_view tag) const {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return fork(h);
    }

    uint64_t next_u64() { return mix(key + 0x632be59bd9b4e019ull * ++ctr); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Standard normal via Box-Muller; computed in double, one value per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }
};

}  // namespace hpdm
