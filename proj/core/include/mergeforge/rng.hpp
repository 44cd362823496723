#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mergeforge {

// 64-bit FNV-1a over a byte string.
uint64_t fnv1a64(std::string_view bytes, uint64_t state = 0xcbf29ce484222325ull);

// Seeded random stream. Every consumer derives its own named substream from
// the single run-level seed, so adding a consumer never perturbs the draws
// seen by the others.
class Rng {
public:
    explicit Rng(uint64_t seed);

    // Derives an independent substream keyed by (seed, name).
    Rng fork(std::string_view name) const;

    uint64_t seed() const { return seed_; }
    std::mt19937_64& engine() { return engine_; }

    double uniform();                               // [0, 1)
    double normal(double mean = 0.0, double stddev = 1.0);
    int64_t uniform_int(int64_t lo, int64_t hi);    // inclusive bounds

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace mergeforge
