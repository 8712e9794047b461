#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace voladapter {

/// Deterministic RNG. Wraps mt19937_64 but generates floating-point draws and
/// integer ranges by hand: std::*_distribution output is implementation
/// defined and would break byte-identical reruns across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(splitmix(seed)) {}

    uint64_t u64() { return eng_(); }

    /// Uniform double in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    int64_t uniform_int(int64_t n) {
        auto v = static_cast<int64_t>(uniform() * static_cast<double>(n));
        return v >= n ? n - 1 : v;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Independent child stream; deterministic in (parent seed, label).
    Rng fork(std::string_view label) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
            h *= 0x100000001b3ull;
        }
        return Rng(splitmix(seed_ ^ h));
    }

    Rng fork(uint64_t label) const { return Rng(splitmix(seed_ ^ splitmix(label))); }

    uint64_t seed() const { return seed_; }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t seed_;
    std::mt19937_64 eng_;
};

}  // namespace voladapter
