#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "mbfa/kbody.hpp"
#include "mbfa/manybody.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "support/oracles.hpp"

using namespace mbfa;
using namespace mbfa::training;

TEST_SUITE_BEGIN("kbody");

TEST_CASE("multiset ranking is a bijection onto [0, size)") {
    for (const auto& [n, k] : {std::pair{4u, 3u}, std::pair{6u, 2u}, std::pair{3u, 4u}}) {
        SymmetricIndex idx(n, k);
        std::vector<char> seen(idx.size(), 0);
        std::vector<std::uint32_t> tuple(k, 0);
        std::uint64_t count = 0;
        while (true) {
            const auto r = idx.rank(tuple);
            REQUIRE(r < idx.size());
            CHECK(!seen[r]);
            seen[r] = 1;
            std::vector<std::uint32_t> decoded(k);
            idx.unrank(r, decoded);
            CHECK(decoded == tuple);
            ++count;
            std::uint32_t d = k;
            while (d > 0 && tuple[d - 1] == n - 1) --d;
            if (d == 0) break;
            const std::uint32_t v = ++tuple[d - 1];
            for (std::uint32_t t = d; t < k; ++t) tuple[t] = v;
        }
        CHECK(count == idx.size());
    }
}

TEST_CASE("multiplicity counts ordered arrangements") {
    CHECK(SymmetricIndex::multiplicity(std::vector<std::uint32_t>{0, 1, 2}) == 6.0);
    CHECK(SymmetricIndex::multiplicity(std::vector<std::uint32_t>{1, 1, 2}) == 3.0);
    CHECK(SymmetricIndex::multiplicity(std::vector<std::uint32_t>{2, 2, 2}) == 1.0);
    CHECK(SymmetricIndex::multiplicity(std::vector<std::uint32_t>{0, 0, 1, 1}) == 6.0);
}

TEST_CASE("ground-truth baseline reproduces the generating conditionals") {
    Rng rng(3);
    for (const auto& [p, rank, length, vocab] :
         {std::tuple{2u, 3u, 4u, 3u}, std::tuple{3u, 2u, 4u, 3u}, std::tuple{4u, 2u, 5u, 3u}}) {
        manybody::CouplingConfig cc;
        cc.order = p;
        cc.rank = rank;
        cc.length = length;
        cc.vocab = vocab;
        cc.seed = 7 + p;
        cc.scale = 0.02;
        const auto dist = manybody::build_random_couplings(cc);
        const auto baseline = kbody_from_distribution(dist);
        KBodyWorkspace ws;
        ws.init(baseline);
        for (int t = 0; t < 10; ++t) {
            std::vector<std::uint32_t> row(length);
            for (auto& v : row) v = rng.uniform_int(vocab) + 1;
            const auto pos = rng.uniform_int(length);
            const auto fast = kbody_logits(baseline, row, pos, ws);
            auto masked = row;
            masked[pos] = kMaskId;
            const auto probs_model = softmax(fast);
            const auto probs_exact = manybody::exact_conditional(dist, masked, pos);
            for (std::uint32_t a = 0; a < vocab; ++a)
                CHECK(probs_model[a] == doctest::Approx(probs_exact[a]).epsilon(1e-9));
        }
    }
}

TEST_CASE("baseline gradients match central finite differences") {
    auto model = make_kbody(3, 4, 3);
    Rng rng(11);
    for (auto& v : model.j) v = 0.3 * rng.normal();
    for (auto& v : model.u) v = 0.3 * rng.normal();

    std::vector<std::vector<std::uint32_t>> storage;
    std::vector<KBodySample> batch;
    for (int s = 0; s < 5; ++s) {
        std::vector<std::uint32_t> row(4);
        for (auto& t : row) t = rng.uniform_int(3) + 1;
        storage.push_back(row);
    }
    for (int s = 0; s < 5; ++s) batch.push_back({storage[s].data(), rng.uniform_int(4)});

    KBodyWorkspace ws;
    ws.init(model);
    KBodyGrads grads;
    grads.init_like(model);
    kbody_backward_batch(model, batch, grads, ws);

    auto loss = [&] {
        KBodyWorkspace w2;
        w2.init(model);
        double total = 0.0;
        for (const auto& s : batch) {
            auto logits = kbody_logits(model, {s.row, 4}, s.pos, w2);
            total += cross_entropy(logits, s.row[s.pos] - 1);
        }
        return total / 5.0;
    };
    for (auto* pair : {&model.j, &model.u}) {
        const auto& g = pair == &model.j ? grads.j : grads.u;
        const auto fd = oracles::finite_difference_gradient(*pair, loss);
        for (std::size_t k = 0; k < fd.size(); ++k) {
            const double analytic = g[k] / 5.0;
            CHECK(std::abs(analytic - fd[k]) / std::max(1.0, std::abs(fd[k])) < 1e-6);
        }
    }
}

TEST_CASE("packed size cap is enforced") {
    CHECK_THROWS(make_kbody(4, 20, 10, 1000));
    CHECK_NOTHROW(make_kbody(4, 20, 10));
    CHECK_THROWS(make_kbody(1, 4, 3));  // below the supported order range
}

TEST_CASE("baseline file round trip") {
    auto model = make_kbody(2, 3, 4);
    Rng rng(5);
    for (auto& v : model.j) v = rng.normal();
    for (auto& v : model.u) v = rng.normal();
    const auto path = std::filesystem::temp_directory_path() / "mbfa_test_baseline.mbkb";
    save_kbody(path, model);
    const auto loaded = load_kbody(path);
    CHECK(loaded.k == 2);
    CHECK(loaded.j == model.j);
    CHECK(loaded.u == model.u);
    std::filesystem::remove(path);
}

TEST_SUITE_END();
