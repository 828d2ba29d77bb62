#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace depthc {

// splitmix64 finalizer; used to derive independent sub-seeds.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stable per-component seed: construction order of one component never
// shifts the initialization of another.
inline uint64_t seed_for(uint64_t base, std::string_view tag) {
    return mix64(base ^ fnv1a(tag));
}

inline uint64_t seed_for(uint64_t base, uint64_t index) {
    return mix64(base ^ mix64(index));
}

// Uniform double in [0,1). std::uniform_real_distribution is
// implementation-defined, so map the raw 64-bit draw ourselves.
inline double rng_unit(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double rng_range(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * rng_unit(g);
}

}  // namespace depthc
