#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>

namespace editlab {

// Deterministic RNG used everywhere. Gaussian and index sampling are spelled
// out by hand so streams do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes two uniforms per call.
    double normal() {
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform integer in [0, n) by rejection.
    size_t index(size_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<size_t>(x % n);
    }

private:
    std::mt19937_64 gen_;
};

// Splitmix-style seed derivation so submodules get decorrelated streams.
inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
    uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// 64-bit FNV-1a, used for content fingerprints.
class Fnv1a {
public:
    void update(const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
    }
    void update_u64(uint64_t v) { update(&v, sizeof v); }
    uint64_t digest() const { return h_; }

private:
    uint64_t h_ = 0xcbf29ce484222325ull;
};

inline std::string hex_u64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace editlab
