#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "mbfa/manybody.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "support/oracles.hpp"

using namespace mbfa;
using namespace mbfa::manybody;

namespace {

CouplingConfig make_config(std::uint32_t p, std::uint32_t rank, std::uint32_t length,
                           std::uint32_t vocab, std::uint64_t seed, double scale = 1.0) {
    CouplingConfig cfg;
    cfg.order = p;
    cfg.rank = rank;
    cfg.length = length;
    cfg.vocab = vocab;
    cfg.seed = seed;
    cfg.scale = scale;
    return cfg;
}

TokenSequence random_sequence(std::uint32_t length, std::uint32_t vocab, Rng& rng) {
    TokenSequence seq(length);
    for (auto& t : seq) t = rng.uniform_int(vocab) + 1;
    return seq;
}

}  // namespace

TEST_SUITE_BEGIN("manybody");

TEST_CASE("config validation") {
    CHECK_THROWS(build_random_couplings(make_config(1, 2, 3, 2, 0)));  // p < 2
    auto bad_rate = make_config(2, 2, 3, 2, 0);
    bad_rate.bernoulli_rate = 1.5;
    CHECK_THROWS(build_random_couplings(bad_rate));
}

TEST_CASE("materialised couplings are permutation symmetric") {
    // order-4 instance at the synthetic-experiment shape
    const auto dist = build_random_couplings(make_config(4, 200, 20, 10, 7));
    // check a 3x3x3x3 sub-block of J against all index permutations
    std::uint32_t idx[4];
    for (idx[0] = 0; idx[0] < 3; ++idx[0])
        for (idx[1] = 0; idx[1] < 3; ++idx[1])
            for (idx[2] = 0; idx[2] < 3; ++idx[2])
                for (idx[3] = 0; idx[3] < 3; ++idx[3]) {
                    const double base = dist.coupling_j({idx, 4});
                    std::uint32_t perm[4] = {idx[1], idx[3], idx[0], idx[2]};
                    CHECK(dist.coupling_j({perm, 4}) == doctest::Approx(base).epsilon(1e-14));
                    std::uint32_t perm2[4] = {idx[3], idx[2], idx[1], idx[0]};
                    CHECK(dist.coupling_j({perm2, 4}) == doctest::Approx(base).epsilon(1e-14));
                }
}

TEST_CASE("couplings are deterministic in the seed and Bernoulli valued") {
    const auto a = build_random_couplings(make_config(3, 5, 6, 4, 42));
    const auto b = build_random_couplings(make_config(3, 5, 6, 4, 42));
    CHECK(a.pos_factors == b.pos_factors);
    CHECK(a.tok_factors == b.tok_factors);
    for (double v : a.pos_factors) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("zero rank means zero couplings and zero energy") {
    const auto dist = build_random_couplings(make_config(2, 0, 4, 3, 0));
    Rng rng(1);
    for (int t = 0; t < 5; ++t) {
        const auto seq = random_sequence(4, 3, rng);
        CHECK(energy(dist, seq) == 0.0);
    }
}

TEST_CASE("explicit factor sum reproduces a J entry") {
    const auto dist = build_random_couplings(make_config(3, 2, 3, 2, 1));
    const std::uint32_t idx[3] = {0, 1, 2};
    double direct = 0.0;
    for (std::uint32_t q = 0; q < 2; ++q)
        direct += dist.pos_factor(q)[0] * dist.pos_factor(q)[1] * dist.pos_factor(q)[2];
    CHECK(dist.coupling_j({idx, 3}) == doctest::Approx(direct).epsilon(1e-15));
}

TEST_CASE("all-ones rank-1 pair energy is (1+1)^2") {
    auto dist = build_random_couplings(make_config(2, 1, 2, 2, 0));
    std::fill(dist.pos_factors.begin(), dist.pos_factors.end(), 1.0);
    std::fill(dist.tok_factors.begin(), dist.tok_factors.end(), 1.0);
    const TokenSequence seq{1, 2};
    CHECK(energy(dist, seq) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(oracles::energy_bruteforce(dist, seq) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("rank-factored energy equals brute-force tensor contraction") {
    Rng rng(9);
    for (const auto& [p, rank, length, vocab] :
         {std::tuple{4u, 3u, 3u, 2u}, std::tuple{2u, 4u, 4u, 3u}, std::tuple{3u, 2u, 4u, 2u}}) {
        const auto dist = build_random_couplings(make_config(p, rank, length, vocab, 17, 0.3));
        for (int t = 0; t < 3; ++t) {
            const auto seq = random_sequence(length, vocab, rng);
            CHECK(energy(dist, seq) ==
                  doctest::Approx(oracles::energy_bruteforce(dist, seq)).epsilon(1e-10));
        }
    }
}

TEST_CASE("energy rejects masked input") {
    const auto dist = build_random_couplings(make_config(2, 2, 3, 2, 0));
    CHECK_THROWS(energy(dist, TokenSequence{1, 0, 2}));
}

TEST_CASE("zero couplings give a uniform conditional") {
    const auto dist = build_random_couplings(make_config(2, 0, 3, 4, 0));
    const auto probs = exact_conditional(dist, TokenSequence{2, 0, 3}, 1);
    for (double v : probs) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("conditional demands exactly one mask at the queried site") {
    const auto dist = build_random_couplings(make_config(2, 2, 3, 2, 0));
    CHECK_THROWS(exact_conditional(dist, TokenSequence{1, 1, 2}, 1));  // no mask
    CHECK_THROWS(exact_conditional(dist, TokenSequence{0, 0, 2}, 1));  // two masks
    CHECK_THROWS(exact_conditional(dist, TokenSequence{0, 1, 2}, 1));  // mask elsewhere
}

TEST_CASE("conditional matches full enumeration, two-body") {
    const auto dist = build_random_couplings(make_config(2, 3, 3, 2, 5, 0.5));
    const auto table = enumerate_joint(dist);
    TokenSequence seq{1, 0, 2};
    for (std::uint32_t ctx1 = 1; ctx1 <= 2; ++ctx1)
        for (std::uint32_t ctx2 = 1; ctx2 <= 2; ++ctx2) {
            seq[0] = ctx1;
            seq[2] = ctx2;
            const auto fast = exact_conditional(dist, seq, 1);
            const auto slow = oracles::conditional_from_table(table, seq, 1);
            for (std::uint32_t a = 0; a < 2; ++a)
                CHECK(fast[a] == doctest::Approx(slow[a]).epsilon(1e-12));
        }
}

TEST_CASE("conditional matches full enumeration, four-body") {
    const auto dist = build_random_couplings(make_config(4, 2, 4, 3, 11, 0.05));
    const auto table = enumerate_joint(dist);
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
        auto seq = random_sequence(4, 3, rng);
        const auto i = rng.uniform_int(4);
        seq[i] = kMaskId;
        const auto fast = exact_conditional(dist, seq, i);
        const auto slow = oracles::conditional_from_table(table, seq, i);
        for (std::uint32_t a = 0; a < 3; ++a)
            CHECK(fast[a] == doctest::Approx(slow[a]).epsilon(1e-10));
    }
}

TEST_CASE("enumerated table of zero couplings is uniform with Z = V^L") {
    const auto dist = build_random_couplings(make_config(2, 0, 3, 2, 0));
    const auto table = enumerate_joint(dist);
    CHECK(table.prob.size() == 8);
    for (double v : table.prob) CHECK(v == doctest::Approx(0.125).epsilon(1e-14));
    CHECK(table.z() == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("enumerated entries are proportional to exp(-energy)") {
    const auto dist = build_random_couplings(make_config(2, 2, 2, 2, 3, 0.7));
    const auto table = enumerate_joint(dist);
    std::vector<std::uint32_t> seq(2);
    for (std::size_t idx = 0; idx < table.prob.size(); ++idx) {
        table.state_tokens(idx, seq);
        const double expected = std::exp(-oracles::energy_bruteforce(dist, seq)) / table.z();
        CHECK(table.prob[idx] == doctest::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("enumeration cap is enforced") {
    const auto dist = build_random_couplings(make_config(2, 1, 12, 4, 0));
    CHECK_THROWS(enumerate_joint(dist, 1000000));  // 4^12 = 16.7M states
}

TEST_CASE("gibbs on zero couplings is uniform") {
    const auto dist = build_random_couplings(make_config(2, 0, 2, 2, 0));
    const auto ds = gibbs_sample(dist, 100000, 5, 1, 21);
    CHECK(ds.rows() == 100000);
    CHECK(ds.provenance == Provenance::gibbs);
    // per-state frequencies within 3 standard errors of 1/4
    std::vector<std::uint64_t> counts(4, 0);
    for (std::uint64_t r = 0; r < ds.rows(); ++r) {
        const auto row = ds.row(r);
        ++counts[(row[0] - 1) * 2 + (row[1] - 1)];
    }
    const double se = std::sqrt(0.25 * 0.75 / 100000.0);
    for (auto c : counts) CHECK(std::abs(c / 100000.0 - 0.25) < 3.0 * se);
}

TEST_CASE("long gibbs chain approaches the enumerated joint") {
    const auto dist = build_random_couplings(make_config(2, 3, 4, 3, 13, 0.04));
    const auto table = enumerate_joint(dist);
    const auto ds = gibbs_sample(dist, 1000000, 20, 1, 31, 8);
    std::vector<double> freq(table.prob.size(), 0.0);
    for (std::uint64_t r = 0; r < ds.rows(); ++r)
        freq[table.state_index(ds.row(r))] += 1.0 / double(ds.rows());
    CHECK(oracles::total_variation(freq, table.prob) < 0.02);
}

TEST_CASE("gibbs is deterministic for a fixed seed") {
    const auto dist = build_random_couplings(make_config(3, 2, 5, 3, 19, 0.1));
    const auto a = gibbs_sample(dist, 200, 10, 3, 77, 4);
    const auto b = gibbs_sample(dist, 200, 10, 3, 77, 4);
    CHECK(a.tokens == b.tokens);
    const auto c = gibbs_sample(dist, 200, 10, 3, 78, 4);
    CHECK(a.tokens != c.tokens);
}

TEST_CASE("distribution file round trip") {
    const auto dist = build_random_couplings(make_config(4, 3, 5, 4, 23, 0.125));
    const auto path = std::filesystem::temp_directory_path() / "mbfa_test_dist.mbdj";
    save_distribution(path, dist);
    const auto loaded = load_distribution(path);
    CHECK(loaded.config.order == 4);
    CHECK(loaded.config.scale == 0.125);
    CHECK(loaded.pos_factors == dist.pos_factors);
    CHECK(loaded.tok_factors == dist.tok_factors);
    std::filesystem::remove(path);
}

TEST_SUITE_END();
