#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sparsemap {

// splitmix64 step, used to derive independent child seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d4a33085fecf5cULL;
    return z ^ (z >> 31);
}

// Deterministic child seed for a named stream. Keeps scene generation, weight
// init, shuffling and jitter on independent sequences so adding draws to one
// never shifts another.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = master ^ 0x2545f4914f6cdd1dULL;
    for (char c : tag) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    h ^= index + 0x632be59bd9b4e019ULL;
    return splitmix64(h);
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(master, tag, index));
}

} // namespace sparsemap
