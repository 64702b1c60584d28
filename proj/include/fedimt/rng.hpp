#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedimt {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed from a master seed and a tuple of tags.
/// Tags identify the consumer (e.g. {stream::select, round}), so adding a new
/// consumer never perturbs the draws of an existing one.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = mix64(master);
    for (auto t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

namespace stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t train_data = 2;
inline constexpr std::uint64_t test_data = 3;
inline constexpr std::uint64_t partition = 4;
inline constexpr std::uint64_t auxiliary = 5;
inline constexpr std::uint64_t select = 6;
inline constexpr std::uint64_t local_shuffle = 7;
inline constexpr std::uint64_t cluster_means = 8;
}  // namespace stream

}  // namespace fedimt
