#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "lab/common.hpp"

namespace lab {

// Deterministic, splittable pseudo-random source. Every place the project
// draws randomness takes one of these explicitly; there is no global RNG.
// xoshiro256++ core seeded through splitmix64, with a hand-rolled Box-Muller
// normal so draws are identical across standard libraries.
class Rng {
   public:
    explicit Rng(uint64_t seed) : base_seed_(seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi], inclusive. Modulo bias is < 2^-53 at the
    // ranges used here (timesteps, indices) and keeping the draw a single
    // next_u64() keeps streams easy to reason about.
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw Error("Rng::uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Standard normal via Box-Muller, one spare cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    float normal_f() { return static_cast<float>(normal()); }

    // Independent child stream; depends only on (construction seed, tag),
    // never on how many draws this stream has made.
    Rng child(uint64_t tag) const {
        uint64_t mix = base_seed_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull));
        uint64_t s = mix;
        return Rng(splitmix64(s));
    }

    Rng child(const std::string& label) const { return child(fnv1a64(label)); }

    uint64_t base_seed() const { return base_seed_; }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

   private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_;
    uint64_t base_seed_;
    double spare_;
    bool has_spare_;
};

}  // namespace lab
