#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mbfa/tokens.hpp"

namespace mbfa::manybody {

// Configuration of an order-p joint over token sequences. The interaction
// tensors are never materialised: they are defined through `rank` shared
// factor vectors per side,
//   J_{i1..ip} = sum_q j^q_{i1} * ... * j^q_{ip}        (positions)
//   U_{a1..ap} = sum_r u^r_{a1} * ... * u^r_{ap}        (tokens)
// which makes them symmetric by construction. The joint is
//   p(s) = exp(-E(s)) / Z,
//   E(s) = scale * sum_{q,r} ( sum_i j^q_i * u^r_{s_i} )^p,
// the rank-factored form of contracting J and U against one-hot tokens over
// every p-tuple of positions (repeated positions included).
//
// `scale` is an inverse-temperature knob on the energy. Raw Bernoulli factors
// produce energies that grow like L^p * rank^2, which pins the joint to a
// handful of states; experiment recipes set scale ~ c / (rank^2 * L^(p-1)) to
// keep single-site conditionals at order-one sharpness.
struct CouplingConfig {
    std::uint32_t order = 2;       // p >= 2
    std::uint32_t rank = 0;        // number of factor vectors per side, >= 0
    double bernoulli_rate = 0.8;   // P(factor entry = 1)
    std::uint32_t length = 0;      // L
    std::uint32_t vocab = 0;       // V
    std::uint64_t seed = 0;
    double scale = 1.0;

    void validate() const;  // throws std::invalid_argument
};

struct ManyBodyDistribution {
    CouplingConfig config;
    std::vector<double> pos_factors;  // rank x L, factor q at offset q*L
    std::vector<double> tok_factors;  // rank x V, factor r at offset r*V

    const double* pos_factor(std::uint32_t q) const { return pos_factors.data() + std::size_t(q) * config.length; }
    const double* tok_factor(std::uint32_t r) const { return tok_factors.data() + std::size_t(r) * config.vocab; }

    // Single entries of the implicit symmetric tensors, recomputed from the
    // factors; `idx` holds p indices (0-based).
    double coupling_j(std::span<const std::uint32_t> idx) const;
    double coupling_u(std::span<const std::uint32_t> idx) const;
};

ManyBodyDistribution build_random_couplings(const CouplingConfig& config);

// E(s) in the rank-factored form; seq must be fully unmasked.
double energy(const ManyBodyDistribution& dist, std::span<const std::uint32_t> seq);

// Pre-softmax logits of p(s_i = a | s_{!= i}). seq must be masked exactly at
// position i. For each candidate token the logit collects every energy term
// that touches site i (all multiplicities of i in the position tuple):
//   l_a = -scale * sum_{q,r} [ (b_qr + j^q_i u^r_a)^p - b_qr^p ],
//   b_qr = sum_{j != i} j^q_j u^r_{s_j}.
std::vector<double> conditional_logits(const ManyBodyDistribution& dist,
                                       std::span<const std::uint32_t> seq, std::uint32_t i);

// softmax of conditional_logits; sums to one.
std::vector<double> exact_conditional(const ManyBodyDistribution& dist,
                                      std::span<const std::uint32_t> seq, std::uint32_t i);

// Exhaustive probability table over all V^L states. State index encodes
// position 0 as the least significant digit: idx = sum_k (s_k - 1) * V^k.
struct JointTable {
    std::uint32_t length = 0, vocab = 0;
    std::vector<double> prob;  // normalised
    double log_z = 0.0;        // log sum_s exp(-E(s))

    double z() const;
    std::size_t state_index(std::span<const std::uint32_t> seq) const;
    void state_tokens(std::size_t index, std::span<std::uint32_t> out) const;
};

JointTable enumerate_joint(const ManyBodyDistribution& dist, std::size_t state_cap = 1000000);

// Systematic-scan Gibbs sampling of M sequences. Kept rows are spread over
// `chains` independent chains (seeded from `seed` by chain index, so the
// result is reproducible and independent of the worker count); each chain
// discards `burnin` sweeps, then emits one row every `thinning` sweeps.
TokenDataset gibbs_sample(const ManyBodyDistribution& dist, std::uint64_t m,
                          std::uint32_t burnin, std::uint32_t thinning, std::uint64_t seed,
                          std::uint32_t chains = 8);

// Binary format "MBDJ": magic, version, config fields, factor arrays (f64).
void save_distribution(const std::filesystem::path& path, const ManyBodyDistribution& dist);
ManyBodyDistribution load_distribution(const std::filesystem::path& path);

}  // namespace mbfa::manybody
