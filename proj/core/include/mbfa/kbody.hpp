#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "mbfa/manybody.hpp"
#include "mbfa/tokens.hpp"

namespace mbfa::training {

// Rank/unrank of multisets (sorted tuples) of size k over an alphabet of n
// symbols, in colexicographic order: rank(a_0 <= ... <= a_{k-1}) =
// sum_m C(a_m + m, m + 1). Used as the packed storage scheme for fully
// symmetric tensors.
struct SymmetricIndex {
    std::uint32_t n = 0, k = 0;

    SymmetricIndex() = default;
    SymmetricIndex(std::uint32_t n_, std::uint32_t k_);

    std::uint64_t binom(std::uint32_t a, std::uint32_t b) const;
    std::uint64_t size() const;
    std::uint64_t rank(std::span<const std::uint32_t> sorted) const;
    void unrank(std::uint64_t r, std::span<std::uint32_t> out) const;

    // Number of ordered arrangements of a sorted tuple: k! / prod(count!).
    static double multiplicity(std::span<const std::uint32_t> sorted);

  private:
    std::vector<std::uint64_t> table_;  // C(a, b) for a <= n + k, b <= k + 1
    std::uint32_t stride_ = 0;
};

// Trainable model whose prediction at a masked site is the exact conditional
// of an order-k joint q(s) ~ exp(-sum over k-tuples J U), with J and U full
// symmetric tensors stored in packed form. Training it to convergence on a
// dataset gives the best-k-body loss bound.
struct KBodyBaseline {
    std::uint32_t k = 0, length = 0, vocab = 0;
    SymmetricIndex jindex, uindex;
    std::vector<double> j;  // packed position tensor, jindex.size() values
    std::vector<double> u;  // packed token tensor, uindex.size() values

    std::uint64_t parameter_count() const { return j.size() + u.size(); }
};

KBodyBaseline make_kbody(std::uint32_t k, std::uint32_t length, std::uint32_t vocab,
                         std::uint64_t packed_cap = 50000000);

// Copies the ground-truth couplings of a rank-factored distribution into
// packed form (the energy scale is folded into J). The resulting baseline's
// conditionals equal the distribution's exact conditionals.
KBodyBaseline kbody_from_distribution(const manybody::ManyBodyDistribution& dist);

struct KBodyGrads;

// Scratch for conditional evaluation/backward, reusable across calls. init()
// builds per-site expansion tables for the model's (k, L, V); a workspace must
// only be used with models of that shape.
struct KBodyWorkspace {
    std::vector<double> logits;

    void init(const KBodyBaseline& model);
    void eval(const KBodyBaseline& model, std::span<const std::uint32_t> row, std::uint32_t pos,
              const double* dlogits, KBodyGrads* grads);

    std::vector<double> ja;              // accumulated J weights per (m, context multiset)
    std::vector<double> ub;              // accumulated dlogit-weighted U contractions
    std::vector<std::uint32_t> touched;  // occupied slots, for sparse reset
    std::vector<std::uint32_t> scratch;  // per-entry slot codes
    std::vector<char> visited_;
    std::shared_ptr<const void> tables_;
};

// Pre-softmax logits of the baseline's conditional at site pos of an
// unmasked row: l_a = -sum_{tuples T containing pos} mult(T) J_T U_{W(s_a,T)}.
std::span<const double> kbody_logits(const KBodyBaseline& model,
                                     std::span<const std::uint32_t> row, std::uint32_t pos,
                                     KBodyWorkspace& ws);

struct KBodyGrads {
    std::vector<double> j, u;
    void init_like(const KBodyBaseline& model);
    void zero();
    void add(const KBodyGrads& other);
};

struct KBodySample {
    const std::uint32_t* row;
    std::uint32_t pos;
};

// Accumulates summed cross-entropy gradients over the batch into grads;
// returns summed loss, optionally counting argmax hits.
double kbody_backward_batch(const KBodyBaseline& model, std::span<const KBodySample> batch,
                            KBodyGrads& grads, KBodyWorkspace& ws,
                            std::uint64_t* correct = nullptr);

// Binary format "MBKB" for baseline checkpoints.
void save_kbody(const std::filesystem::path& path, const KBodyBaseline& model);
KBodyBaseline load_kbody(const std::filesystem::path& path);

}  // namespace mbfa::training
