#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace paleorec::rng {

// splitmix64 finalizer. Used to derive well-separated substream seeds from a
// master seed, so parallel units can each own an independent generator while
// the overall run stays reproducible for a fixed master seed.
inline std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) {
    return mix(mix(master) ^ mix(index + 1));
}

// Fisher-Yates permutation of {0, ..., n-1}. Written out rather than calling
// std::shuffle so the permutation depends only on the seed, not on the
// standard library's unspecified shuffle algorithm.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 gen(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(gen() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace paleorec::rng
