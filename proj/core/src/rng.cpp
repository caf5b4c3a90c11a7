#include "mbfa/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mbfa {

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return splitmix64(splitmix64(root ^ h) + index);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0,1] so the log is finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint32_t Rng::uniform_int(std::uint32_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t span = n;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / span * span;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::uint32_t>(x % span);
}

std::size_t Rng::categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: weights must sum to > 0");
    double target = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
        cum += weights[i];
        if (target < cum) return i;
    }
    return weights.size() - 1;
}

}  // namespace mbfa
