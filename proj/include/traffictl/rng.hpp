#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "traffictl/matrix.hpp"

namespace traffictl {

/// splitmix64 step; used to derive independent seed streams so that work
/// split across threads stays reproducible regardless of scheduling.
inline uint64_t mix_seed(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Stream keyed by (seed, tag, index), e.g. tag per pipeline stage and
/// index per cluster / candidate.
inline std::mt19937_64 make_rng(uint64_t seed, uint64_t tag = 0, uint64_t index = 0) {
    uint64_t s = mix_seed(seed ^ mix_seed(tag ^ mix_seed(index)));
    return std::mt19937_64(s);
}

inline Matrix uniform_matrix(int rows, int cols, double lo, double hi, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : m.values()) v = dist(rng);
    return m;
}

/// Glorot-style uniform init for a rows x cols weight matrix.
inline Matrix glorot_matrix(int rows, int cols, std::mt19937_64& rng) {
    const double s = std::sqrt(6.0 / (rows + cols));
    return uniform_matrix(rows, cols, -s, s, rng);
}

/// k distinct values drawn uniformly from [0, n), in draw order.
inline std::vector<int> sample_without_replacement(int n, int k, std::mt19937_64& rng) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k && i < n; ++i) {
        std::uniform_int_distribution<int> dist(i, n - 1);
        std::swap(pool[i], pool[dist(rng)]);
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace traffictl
