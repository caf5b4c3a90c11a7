#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mbfa/tokens.hpp"

namespace mbfa::model {

// One layer of factored attention: input-independent mixing weights A (L x L)
// and a value matrix acting on the token dimension, either dense (V x V) or a
// finite-rank product value_p (V x r) * value_q (r x V).
struct FactoredLayer {
    std::vector<double> attention;          // L x L
    std::vector<double> value;              // V x V when dense, else empty
    std::vector<double> value_p, value_q;   // V x r and r x V when rank > 0

    bool low_rank() const { return value.empty(); }
};

struct StackConfig {
    std::uint32_t layers = 1;      // n >= 1
    std::uint32_t length = 0;      // L
    std::uint32_t vocab = 0;       // V
    std::uint32_t value_rank = 0;  // 0 = dense value matrices
    bool skip_connections = true;
    bool layer_norm = false;       // normalise activations between layers

    void validate() const;
};

// n stacked factored-attention layers with x^2 activation. Hidden layers add
// their activated output to their input (skip connection); the final layer is
// applied linearly and its masked-row output is the logit vector. Tokens are
// embedded as one-hot vectors, the mask as the zero vector, so masked sites
// drop out of every sum.
struct FactoredStack {
    StackConfig config;
    std::vector<FactoredLayer> layers;

    std::uint64_t max_interaction_order() const;
    std::uint64_t parameter_count() const;
};

// Highest interaction order expressible by n layers: 2^(n-1) + 1.
std::uint64_t max_order(std::uint32_t n_layers);

FactoredStack make_stack(const StackConfig& config);  // all weights zero

// Gaussian init: std scale/sqrt(L) for attention, scale/sqrt(V) for dense
// values; low-rank factors are scaled so the product matches the dense std.
void init_gaussian(FactoredStack& stack, std::uint64_t seed, double scale = 1.0);

// Scratch buffers for forward/backward; reusable across calls, one per thread.
struct Workspace {
    std::vector<std::vector<double>> x;       // x[0] input, x[l] output of layer l (L x V)
    std::vector<std::vector<double>> g;       // value-transformed input per layer (L x V)
    std::vector<std::vector<double>> h;       // attention-mixed per layer (L x V)
    std::vector<std::vector<double>> r;       // low-rank intermediate per layer (L x rank)
    std::vector<std::vector<double>> ln_mean, ln_rstd, ln_hat;  // layer-norm caches per row
    std::vector<double> logits;               // V
    std::vector<double> dx, dg, dh, dr, dz;   // backward scratch

    void init(const StackConfig& config);
};

// Logits at row `pos` of the final layer for an arbitrary real input matrix
// x_in (L x V, row-major). This is the full forward map; one-hot inputs are a
// special case.
void forward_embedded(const FactoredStack& stack, const double* x_in, std::uint32_t pos,
                      Workspace& ws, double* logits_out);

// Forward for a sequence masked exactly at position pos (mask id 0).
std::vector<double> forward_masked(const FactoredStack& stack,
                                   std::span<const std::uint32_t> seq, std::uint32_t pos,
                                   Workspace& ws);

// Forward for an unmasked row with position pos treated as masked. Writes the
// logits into ws.logits and returns a view of them.
std::span<const double> forward_masked_at(const FactoredStack& stack,
                                          std::span<const std::uint32_t> row, std::uint32_t pos,
                                          Workspace& ws);

struct LayerGrads {
    std::vector<double> attention, value, value_p, value_q;
};

struct Gradients {
    std::vector<LayerGrads> layers;

    void init_like(const FactoredStack& stack);
    void zero();
    void add(const Gradients& other);
};

// One masked prediction task: an unmasked row, the masked position, and the
// training target (the row's own token at that position).
struct MaskedSample {
    const std::uint32_t* row;
    std::uint32_t pos;
};

// Accumulates d(mean cross-entropy)/d(theta) * batch_size into grads (callers
// divide by the batch size at the optimiser step). Returns summed loss;
// `correct` (optional) counts argmax hits.
double backward_batch(const FactoredStack& stack, std::span<const MaskedSample> batch,
                      Gradients& grads, Workspace& ws, std::uint64_t* correct = nullptr);

// Effective three-body couplings of a two-layer stack:
//   Jt_{ikl} = sum_j A2_{ij} A1_{jk} A1_{jl}, Ut_{agm} = sum_b V2_{ab} V1_{bg} V1_{bm};
// the quadratic part of the logits is their double contraction with the
// context one-hots.
struct ThreeBodyTensors {
    std::uint32_t length = 0, vocab = 0;
    std::vector<double> j;  // L x L x L, index (i*L + k)*L + l
    std::vector<double> u;  // V x V x V, index (a*V + g)*V + m
};
ThreeBodyTensors effective_three_body(const FactoredStack& stack);

// Checkpoint format "FACT": magic, version, n, L, V, r (0 = dense), flags,
// then per-layer f64 arrays. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const FactoredStack& stack);
FactoredStack load_checkpoint(const std::filesystem::path& path);

}  // namespace mbfa::model
