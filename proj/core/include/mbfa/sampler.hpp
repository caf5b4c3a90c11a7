#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mbfa/factored.hpp"
#include "mbfa/linalg.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/tokens.hpp"

namespace mbfa::sampler {

// Sequence score under a masked model: E(s) = -sum_i h_i . s_i, where h_i are
// the logits with position i masked and s_i picks the realised token's entry.
// Costs L forward passes. The Metropolis-Hastings target is exp(-E)/Z.
double score(const model::FactoredStack& stack, std::span<const std::uint32_t> seq,
             model::Workspace& ws);

struct MHChain {
    TokenSequence state;
    double score = 0.0;
    std::uint64_t sweeps_done = 0;
    std::uint64_t accepted = 0, proposed = 0;
    Rng rng;

    MHChain() : rng(0) {}
};

MHChain make_chain(const model::FactoredStack& stack, std::span<const std::uint32_t> seed_row,
                   std::uint64_t seed, model::Workspace& ws);

// One systematic sweep: at each position, propose from the model conditional
// p_mlm(. | s_{!=i}) and accept with the proposal-corrected ratio
//   min(1, exp(E - E') * q(s_i | ctx) / q(s_i' | ctx)),
// which targets exp(-E) exactly (both proposal factors condition on the same
// context, so they use the same conditional).
void mh_sweep(const model::FactoredStack& stack, MHChain& chain, model::Workspace& ws);

struct CloneResult {
    TokenDataset data;                        // provenance = clone
    std::vector<double> mean_score;           // index t = after t sweeps (0 = seeds)
    std::vector<double> acceptance_rate;      // per sweep
};

// One chain per seed row, `sweeps` sweeps each, deterministic per seed.
CloneResult generate_clone(const model::FactoredStack& stack, const TokenDataset& seeds,
                           std::uint32_t sweeps, std::uint64_t seed);

// CSV: sweep,mean_score,acceptance_rate (acceptance empty for sweep 0).
void write_score_trace_csv(const std::filesystem::path& path, const CloneResult& result);

// Sidecar metadata for a clone dataset (structured text, key = value).
void write_clone_metadata(const std::filesystem::path& path, std::uint64_t checkpoint_hash,
                          std::uint64_t seed_dataset_hash, std::uint32_t sweeps,
                          std::uint64_t seed);

// Compatibility check for a pair of two-variable conditional tables
// a[i][j] = P(X = x_i | Y = y_j) (columns sum to 1) and
// b[i][j] = P(Y = y_j | X = x_i) (rows sum to 1): marginals tau, eta exist
// with tau_i b_ij = eta_j a_ij iff the pair comes from a joint.
struct ConsistencyVerdict {
    bool compatible = false;
    double residual = 0.0;
    std::vector<double> tau, eta;  // recovered marginals (meaningful when compatible)
};
ConsistencyVerdict check_conditional_consistency(const Mat& a, const Mat& b, double tol = 1e-8);

}  // namespace mbfa::sampler
