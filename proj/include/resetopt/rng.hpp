#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "resetopt/common.hpp"

// Deterministic random streams. Every consumer derives its own named stream
// from (seed, stream name[, counter]), so toggling one feature never shifts
// the draws seen by another. Generators are implemented here rather than via
// <random> distributions so that output is bit-stable across standard library
// versions.

namespace resetopt::rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a, used only to hash stream names into seed material.
inline std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// xoshiro256++ (Blackman & Vigna), state seeded through splitmix64.
class Stream {
  public:
    Stream() : Stream(0, 0, 0) {}

    Stream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0) {
        std::uint64_t sm = seed;
        sm ^= 0x6a09e667f3bcc909ULL;
        sm += splitmix64(sm) ^ stream_id;
        sm += splitmix64(sm) ^ counter;
        for (auto& word : s_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1]; safe as a log() argument.
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
    // so the stream position is a pure function of the draw count.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Unbiased integer on [0, bound) by masked rejection.
    std::uint64_t below(std::uint64_t bound) {
        require(bound > 0, "rng: bound must be positive");
        if (bound == 1) return 0;
        std::uint64_t mask = ~std::uint64_t{0} >> __builtin_clzll(bound - 1);
        for (;;) {
            std::uint64_t v = next_u64() & mask;
            if (v < bound) return v;
        }
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4];
};

inline Stream derive(std::uint64_t seed, std::string_view name, std::uint64_t counter = 0) {
    return Stream(seed, hash_name(name), counter);
}

}  // namespace resetopt::rng
