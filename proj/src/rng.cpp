#include "facm/rng.hpp"

namespace facm {

std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

Rng Rng::stream(std::uint64_t seed, std::string_view label, std::uint64_t a, std::uint64_t b) {
    // FNV-1a over the label keeps stream ids stable across builds.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return Rng(mix64(mix64(mix64(seed ^ h) + a) + b));
}

std::size_t Rng::index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

}  // namespace facm
