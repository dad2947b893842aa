#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "c2fa/common.hpp"

namespace c2fa {

// Deterministic, portable pseudo-random generator: xoshiro256++ seeded through
// splitmix64. The engine and both distributions below are fixed algorithms, so
// identical seeds produce identical streams on every platform. State is four
// 64-bit words, which keeps checkpointing trivial.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    // Independent stream derived from (seed, tag). Streams with distinct tags
    // never share state even for equal seeds.
    static Rng substream(uint64_t seed, uint64_t tag) {
        return Rng(seed ^ (tag * 0x9E3779B97F4A7C15ULL + 0x6A09E667F3BCC909ULL));
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

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (no cached second value, so the state is
    // exactly the four engine words).
    double next_gaussian() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    // Uniform integer in [0, n) via rejection, bias-free.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw DomainError("Rng::next_below: n must be positive");
        const uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static constexpr double kPi = 3.141592653589793238462643383279502884;

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9E3779B97F4A7C15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

}  // namespace c2fa
