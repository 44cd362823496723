#include "mergeforge/rng.hpp"

#include <string>

namespace mergeforge {

uint64_t fnv1a64(std::string_view bytes, uint64_t state) {
    uint64_t h = state;
    for (unsigned char c : bytes) {
        h ^= static_cast<uint64_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

namespace {

uint64_t mix_seed(uint64_t seed, std::string_view name) {
    char raw[8];
    for (int i = 0; i < 8; ++i) raw[i] = static_cast<char>((seed >> (8 * i)) & 0xff);
    uint64_t h = fnv1a64(std::string_view(raw, 8));
    h = fnv1a64(name, h);
    // splitmix64 finalizer to spread low-entropy names
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

Rng Rng::fork(std::string_view name) const {
    return Rng(mix_seed(seed_, name));
}

double Rng::uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

double Rng::normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
}

}  // namespace mergeforge
