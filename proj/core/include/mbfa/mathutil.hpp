#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace mbfa {

inline double ipow(double x, std::uint32_t p) {
    double r = 1.0;
    while (p) {
        if (p & 1u) r *= x;
        x *= x;
        p >>= 1u;
    }
    return r;
}

inline double logsumexp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// softmax(logits) written into probs (may alias logits).
inline void softmax(std::span<const double> logits, std::span<double> probs) {
    double m = logits[0];
    for (double x : logits) m = std::max(m, x);
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp(logits[i] - m);
        s += probs[i];
    }
    const double inv = 1.0 / s;
    for (double& p : probs) p *= inv;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    softmax(logits, p);
    return p;
}

// Cross-entropy -log softmax(logits)[target], numerically stable.
inline double cross_entropy(std::span<const double> logits, std::size_t target) {
    return logsumexp(logits) - logits[target];
}

inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace mbfa
