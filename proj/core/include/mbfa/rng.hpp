#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mbfa {

// All randomness in the workbench flows from one root seed through named
// sub-streams, so adding a stage never perturbs the draws of earlier ones.
// mt19937_64 has a fully specified sequence, and the draw functions below
// avoid std::*_distribution (whose output is implementation-defined), so a
// given (seed, stream) pair reproduces bit-identically everywhere.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// FNV-1a over the stream name, then mixed with the root seed and index.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (spare cached).
    double normal();

    // Uniform integer in [0,n), unbiased (rejection sampling).
    std::uint32_t uniform_int(std::uint32_t n);

    // Index drawn from an unnormalised non-negative weight vector.
    std::size_t categorical(std::span<const double> weights);

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mbfa
