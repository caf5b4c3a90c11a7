#pragma once

// Test-only oracles: independent, brute-force implementations used to freeze
// expected values. Everything here recomputes results from first definitions
// and stays off the library's fast paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mbfa/factored.hpp"
#include "mbfa/manybody.hpp"

namespace oracles {

// Energy by explicit contraction of the materialised tensors: loops over all
// p-tuples of positions, multiplying J (from the factors) against U at the
// realised tokens.
inline double energy_bruteforce(const mbfa::manybody::ManyBodyDistribution& dist,
                                std::span<const std::uint32_t> seq) {
    const auto& cfg = dist.config;
    const std::uint32_t p = cfg.order, length = cfg.length;
    std::vector<std::uint32_t> pos_idx(p, 0), tok_idx(p, 0);
    double total = 0.0;
    while (true) {
        for (std::uint32_t m = 0; m < p; ++m) tok_idx[m] = seq[pos_idx[m]] - 1;
        total += dist.coupling_j(pos_idx) * dist.coupling_u(tok_idx);
        std::uint32_t d = 0;
        while (d < p && ++pos_idx[d] == length) pos_idx[d++] = 0;
        if (d == p) break;
    }
    return cfg.scale * total;
}

// Conditional at site i from a full joint table: restrict the table to the
// states matching seq away from i and normalise over the token at i.
inline std::vector<double> conditional_from_table(const mbfa::manybody::JointTable& table,
                                                  std::span<const std::uint32_t> seq,
                                                  std::uint32_t i) {
    std::vector<std::uint32_t> state(seq.begin(), seq.end());
    std::vector<double> probs(table.vocab, 0.0);
    double total = 0.0;
    for (std::uint32_t a = 1; a <= table.vocab; ++a) {
        state[i] = a;
        probs[a - 1] = table.prob[table.state_index(state)];
        total += probs[a - 1];
    }
    for (double& v : probs) v /= total;
    return probs;
}

inline double total_variation(std::span<const double> a, std::span<const double> b) {
    double tv = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) tv += std::abs(a[k] - b[k]);
    return 0.5 * tv;
}

// Logits of a two-layer stack evaluated by literally expanding the two-layer
// conditional as written: linear skip term plus the squared first-layer sum,
// with independent nested loops and dense value matrices.
inline std::vector<double> two_layer_logits_bruteforce(const mbfa::model::FactoredStack& stack,
                                                       std::span<const std::uint32_t> seq,
                                                       std::uint32_t i) {
    const auto& cfg = stack.config;
    const std::uint32_t length = cfg.length, vocab = cfg.vocab;
    const auto& a1 = stack.layers[0].attention;
    const auto& v1 = stack.layers[0].value;
    const auto& a2 = stack.layers[1].attention;
    const auto& v2 = stack.layers[1].value;

    auto onehot = [&](std::uint32_t j, std::uint32_t beta) -> double {
        if (j == i || seq[j] == mbfa::kMaskId) return 0.0;
        return seq[j] - 1 == beta ? 1.0 : 0.0;
    };

    std::vector<double> logits(vocab, 0.0);
    for (std::uint32_t alpha = 0; alpha < vocab; ++alpha) {
        double linear = 0.0;
        for (std::uint32_t j = 0; j < length; ++j)
            for (std::uint32_t beta = 0; beta < vocab; ++beta)
                linear += a2[i * length + j] * v2[alpha * vocab + beta] * onehot(j, beta);
        double quad = 0.0;
        for (std::uint32_t j = 0; j < length; ++j)
            for (std::uint32_t beta = 0; beta < vocab; ++beta) {
                double first = 0.0, second = 0.0;
                for (std::uint32_t k = 0; k < length; ++k)
                    for (std::uint32_t g = 0; g < vocab; ++g)
                        first += a1[j * length + k] * v1[beta * vocab + g] * onehot(k, g);
                for (std::uint32_t l = 0; l < length; ++l)
                    for (std::uint32_t m = 0; m < vocab; ++m)
                        second += a1[j * length + l] * v1[beta * vocab + m] * onehot(l, m);
                quad += a2[i * length + j] * v2[alpha * vocab + beta] * first * second;
            }
        logits[alpha] = linear + quad;
    }
    return logits;
}

// Central finite differences of a scalar function over a parameter vector.
inline std::vector<double> finite_difference_gradient(std::span<double> params,
                                                      const std::function<double()>& f,
                                                      double step = 1e-4) {
    std::vector<double> grad(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double saved = params[k];
        params[k] = saved + step;
        const double up = f();
        params[k] = saved - step;
        const double down = f();
        params[k] = saved;
        grad[k] = (up - down) / (2.0 * step);
    }
    return grad;
}

}  // namespace oracles
