#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "mbfa/factored.hpp"
#include "mbfa/manybody.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "support/oracles.hpp"

using namespace mbfa;
using namespace mbfa::model;

namespace {

StackConfig make_config(std::uint32_t n, std::uint32_t length, std::uint32_t vocab,
                        std::uint32_t rank = 0, bool ln = false, bool skip = true) {
    StackConfig cfg;
    cfg.layers = n;
    cfg.length = length;
    cfg.vocab = vocab;
    cfg.value_rank = rank;
    cfg.layer_norm = ln;
    cfg.skip_connections = skip;
    return cfg;
}

FactoredStack random_stack(const StackConfig& cfg, std::uint64_t seed, double scale = 1.0) {
    auto stack = make_stack(cfg);
    init_gaussian(stack, seed, scale);
    return stack;
}

std::vector<MaskedSample> random_batch(std::vector<std::vector<std::uint32_t>>& storage,
                                       std::uint32_t count, std::uint32_t length,
                                       std::uint32_t vocab, Rng& rng) {
    storage.clear();
    storage.reserve(count);
    std::vector<MaskedSample> batch;
    for (std::uint32_t s = 0; s < count; ++s) {
        std::vector<std::uint32_t> row(length);
        for (auto& t : row) t = rng.uniform_int(vocab) + 1;
        storage.push_back(std::move(row));
        batch.push_back({storage.back().data(), rng.uniform_int(length)});
    }
    return batch;
}

// mean cross-entropy of the stack over a batch, via the public forward only
double batch_loss(const FactoredStack& stack, std::span<const MaskedSample> batch) {
    Workspace ws;
    ws.init(stack.config);
    double loss = 0.0;
    for (const auto& s : batch) {
        auto logits = forward_masked_at(stack, {s.row, stack.config.length}, s.pos, ws);
        loss += cross_entropy(logits, s.row[s.pos] - 1);
    }
    return loss / double(batch.size());
}

struct ParamView {
    std::vector<double>* params;
    const std::vector<double>* grads;
};

std::vector<ParamView> param_views(FactoredStack& stack, const Gradients& grads) {
    std::vector<ParamView> views;
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
        views.push_back({&stack.layers[l].attention, &grads.layers[l].attention});
        if (!stack.layers[l].low_rank()) {
            views.push_back({&stack.layers[l].value, &grads.layers[l].value});
        } else {
            views.push_back({&stack.layers[l].value_p, &grads.layers[l].value_p});
            views.push_back({&stack.layers[l].value_q, &grads.layers[l].value_q});
        }
    }
    return views;
}

double max_rel_gradient_error(FactoredStack& stack, std::span<const MaskedSample> batch,
                              double step = 1e-4) {
    Gradients grads;
    grads.init_like(stack);
    Workspace ws;
    ws.init(stack.config);
    const double batch_n = double(batch.size());
    backward_batch(stack, batch, grads, ws);

    double worst = 0.0;
    for (auto& view : param_views(stack, grads)) {
        const auto fd = oracles::finite_difference_gradient(
            *view.params, [&] { return batch_loss(stack, batch); }, step);
        for (std::size_t k = 0; k < fd.size(); ++k) {
            const double analytic = (*view.grads)[k] / batch_n;
            const double err = std::abs(analytic - fd[k]) / std::max(1.0, std::abs(fd[k]));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace

TEST_SUITE_BEGIN("factored");

TEST_CASE("max order by depth") {
    CHECK(max_order(1) == 2);
    CHECK(max_order(2) == 3);
    CHECK(max_order(4) == 9);
    CHECK(max_order(6) == 33);
    CHECK_THROWS(max_order(0));
}

TEST_CASE("zero weights produce zero logits and a uniform prediction") {
    const auto stack = make_stack(make_config(2, 4, 3));
    Workspace ws;
    ws.init(stack.config);
    const auto logits = forward_masked(stack, TokenSequence{1, 0, 3, 2}, 1, ws);
    for (double v : logits) CHECK(v == 0.0);
    const auto probs = softmax(logits);
    for (double v : probs) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("forward rejects malformed masked input") {
    const auto stack = make_stack(make_config(1, 3, 2));
    Workspace ws;
    ws.init(stack.config);
    CHECK_THROWS(forward_masked(stack, TokenSequence{1, 1, 2}, 1, ws));  // no mask
    CHECK_THROWS(forward_masked(stack, TokenSequence{0, 1, 2}, 1, ws));  // mask elsewhere
    CHECK_THROWS(forward_masked(stack, TokenSequence{1, 0}, 1, ws));     // wrong length
}

TEST_CASE("one-layer stack loaded with two-body couplings reproduces the exact conditional") {
    // Token factors chosen so every token has the same self-coupling
    // (constant U diagonal); the attention form has no bias term, so this is
    // the family where the map onto (attention, value) can be exact. The
    // mapping fixes sign and multiplicity: A = -p * scale * J, V = U.
    manybody::CouplingConfig cc;
    cc.order = 2;
    cc.rank = 3;
    cc.length = 3;
    cc.vocab = 3;
    cc.seed = 4;
    cc.scale = 0.35;
    auto dist = manybody::build_random_couplings(cc);
    const double toks[3][3] = {{1, 1, 0}, {0, 1, 1}, {1, 0, 1}};
    for (std::uint32_t r = 0; r < 3; ++r)
        for (std::uint32_t a = 0; a < 3; ++a) dist.tok_factors[r * 3 + a] = toks[r][a];

    auto stack = make_stack(make_config(1, 3, 3));
    for (std::uint32_t i = 0; i < 3; ++i)
        for (std::uint32_t j = 0; j < 3; ++j) {
            const std::uint32_t idx[2] = {i, j};
            stack.layers[0].attention[i * 3 + j] = -2.0 * cc.scale * dist.coupling_j({idx, 2});
        }
    for (std::uint32_t a = 0; a < 3; ++a)
        for (std::uint32_t b = 0; b < 3; ++b) {
            const std::uint32_t idx[2] = {a, b};
            stack.layers[0].value[a * 3 + b] = dist.coupling_u({idx, 2});
        }

    Workspace ws;
    ws.init(stack.config);
    TokenSequence seq(3);
    for (std::uint32_t i = 0; i < 3; ++i)
        for (std::uint32_t c1 = 1; c1 <= 3; ++c1)
            for (std::uint32_t c2 = 1; c2 <= 3; ++c2) {
                std::uint32_t k = 0;
                for (std::uint32_t j = 0; j < 3; ++j)
                    seq[j] = j == i ? kMaskId : (k++ == 0 ? c1 : c2);
                const auto model_probs = softmax(forward_masked(stack, seq, i, ws));
                const auto exact = manybody::exact_conditional(dist, seq, i);
                for (std::uint32_t a = 0; a < 3; ++a)
                    CHECK(model_probs[a] == doctest::Approx(exact[a]).epsilon(1e-10));
            }
}

TEST_CASE("two-layer forward matches the nested-loop expansion") {
    const auto stack = random_stack(make_config(2, 3, 2), 8);
    Workspace ws;
    ws.init(stack.config);
    Rng rng(14);
    for (int t = 0; t < 8; ++t) {
        TokenSequence seq{rng.uniform_int(2) + 1, rng.uniform_int(2) + 1, rng.uniform_int(2) + 1};
        const auto i = rng.uniform_int(3);
        seq[i] = kMaskId;
        const auto fast = forward_masked(stack, seq, i, ws);
        const auto slow = oracles::two_layer_logits_bruteforce(stack, seq, i);
        for (std::uint32_t a = 0; a < 2; ++a)
            CHECK(fast[a] == doctest::Approx(slow[a]).epsilon(1e-12));
    }
}

TEST_CASE("logits ignore the token formerly at the masked position") {
    const auto stack = random_stack(make_config(3, 5, 4), 21);
    Workspace ws;
    ws.init(stack.config);
    std::vector<std::uint32_t> row{1, 2, 3, 4, 2};
    const auto base = forward_masked_at(stack, row, 2, ws);
    std::vector<double> saved(base.begin(), base.end());
    row[2] = 4;
    const auto changed = forward_masked_at(stack, row, 2, ws);
    for (std::uint32_t a = 0; a < 4; ++a) CHECK(saved[a] == changed[a]);
}

TEST_CASE("gradients at a zero stack match finite differences (both vanish)") {
    auto stack = make_stack(make_config(2, 3, 2));
    Rng rng(5);
    std::vector<std::vector<std::uint32_t>> storage;
    const auto batch = random_batch(storage, 4, 3, 2, rng);
    CHECK(max_rel_gradient_error(stack, batch) < 1e-6);
}

TEST_CASE("analytic gradients match central differences across configurations") {
    Rng rng(33);
    const StackConfig configs[] = {
        make_config(1, 4, 3),
        make_config(2, 4, 3),
        make_config(3, 4, 3),
        make_config(2, 4, 4, 2),                 // low-rank values
        make_config(3, 4, 3, 0, true),           // layer norm
        make_config(2, 4, 3, 0, false, false),   // no skip connections
        make_config(3, 5, 3, 2, true),           // low-rank + layer norm
    };
    for (const auto& cfg : configs) {
        auto stack = random_stack(cfg, rng.next_u64(), 0.8);
        std::vector<std::vector<std::uint32_t>> storage;
        const auto batch = random_batch(storage, 6, cfg.length, cfg.vocab, rng);
        // layer norm has large third derivatives (1/sigma^3 terms); a finer
        // step keeps the central-difference truncation below the gate
        const double step = cfg.layer_norm ? 3e-6 : 1e-4;
        CHECK(max_rel_gradient_error(stack, batch, step) < 1e-5);
    }
}

TEST_CASE("duplicated batch rows leave the mean gradient unchanged") {
    auto stack = random_stack(make_config(2, 4, 3), 9);
    Rng rng(6);
    std::vector<std::vector<std::uint32_t>> storage;
    auto batch = random_batch(storage, 5, 4, 3, rng);
    Gradients single, doubled;
    single.init_like(stack);
    doubled.init_like(stack);
    Workspace ws;
    ws.init(stack.config);
    backward_batch(stack, batch, single, ws);
    std::vector<MaskedSample> twice(batch.begin(), batch.end());
    twice.insert(twice.end(), batch.begin(), batch.end());
    backward_batch(stack, twice, doubled, ws);
    for (std::size_t l = 0; l < single.layers.size(); ++l)
        for (std::size_t k = 0; k < single.layers[l].attention.size(); ++k) {
            const double mean_single = single.layers[l].attention[k] / 5.0;
            const double mean_double = doubled.layers[l].attention[k] / 10.0;
            CHECK(mean_single == doctest::Approx(mean_double).epsilon(1e-12));
        }
}

TEST_CASE("effective three-body tensor: zero first layer gives zero") {
    auto stack = make_stack(make_config(2, 3, 2));
    init_gaussian(stack, 3);
    for (auto& v : stack.layers[0].attention) v = 0.0;
    const auto tensors = effective_three_body(stack);
    for (double v : tensors.j) CHECK(v == 0.0);
}

TEST_CASE("effective three-body tensor: identity-row second layer") {
    auto stack = random_stack(make_config(2, 3, 2), 10);
    auto& a2 = stack.layers[1].attention;
    std::fill(a2.begin(), a2.end(), 0.0);
    a2[0 * 3 + 0] = 1.0;  // row 0 of the second layer picks j = 0
    const auto tensors = effective_three_body(stack);
    const auto& a1 = stack.layers[0].attention;
    for (std::uint32_t k = 0; k < 3; ++k)
        for (std::uint32_t l = 0; l < 3; ++l)
            CHECK(tensors.j[(0 * 3 + k) * 3 + l] ==
                  doctest::Approx(a1[0 * 3 + k] * a1[0 * 3 + l]).epsilon(1e-14));
}

TEST_CASE("quadratic part of the logits equals the tensor contraction") {
    // Pre-softmax logits of a 2-layer stack are quadratic in the inputs, so
    // second differences extract the coefficient of x_{kg} x_{lm} exactly.
    const std::uint32_t length = 3, vocab = 2;
    const auto stack = random_stack(make_config(2, length, vocab), 12);
    const auto tensors = effective_three_body(stack);
    Workspace ws;
    ws.init(stack.config);
    const std::uint32_t pos = 1;
    Rng rng(18);
    std::vector<double> base(length * vocab);
    for (auto& v : base) v = 0.3 * rng.normal();

    auto logit_at = [&](const std::vector<double>& x, std::uint32_t alpha) {
        std::vector<double> out(vocab);
        forward_embedded(stack, x.data(), pos, ws, out.data());
        return out[alpha];
    };

    const double delta = 0.5;
    for (std::uint32_t alpha = 0; alpha < vocab; ++alpha)
        for (std::uint32_t k = 0; k < length; ++k)
            for (std::uint32_t g = 0; g < vocab; ++g)
                for (std::uint32_t l = 0; l < length; ++l)
                    for (std::uint32_t m = 0; m < vocab; ++m) {
                        const std::size_t e1 = k * vocab + g, e2 = l * vocab + m;
                        double second;
                        auto x = base;
                        if (e1 == e2) {
                            const double f0 = logit_at(x, alpha);
                            x[e1] = base[e1] + delta;
                            const double fp = logit_at(x, alpha);
                            x[e1] = base[e1] - delta;
                            const double fm = logit_at(x, alpha);
                            second = (fp - 2.0 * f0 + fm) / (delta * delta);
                        } else {
                            x[e1] = base[e1] + delta;
                            x[e2] = base[e2] + delta;
                            const double fpp = logit_at(x, alpha);
                            x[e2] = base[e2] - delta;
                            const double fpm = logit_at(x, alpha);
                            x[e1] = base[e1] - delta;
                            x[e2] = base[e2] + delta;
                            const double fmp = logit_at(x, alpha);
                            x[e2] = base[e2] - delta;
                            const double fmm = logit_at(x, alpha);
                            second = (fpp - fpm - fmp + fmm) / (4.0 * delta * delta);
                        }
                        const double expected =
                            2.0 * tensors.j[(pos * length + k) * length + l] *
                            tensors.u[(alpha * vocab + g) * vocab + m];
                        CHECK(second == doctest::Approx(expected).epsilon(1e-9).scale(1.0));
                    }
}

TEST_CASE("effective three-body requires two layers") {
    const auto stack = random_stack(make_config(3, 3, 2), 1);
    CHECK_THROWS(effective_three_body(stack));
}

TEST_CASE("low-rank pair (dense, identity) reproduces the dense forward") {
    const std::uint32_t length = 4, vocab = 3;
    const auto dense = random_stack(make_config(2, length, vocab), 19);
    auto low = make_stack(make_config(2, length, vocab, vocab));
    for (std::uint32_t l = 0; l < 2; ++l) {
        low.layers[l].attention = dense.layers[l].attention;
        low.layers[l].value_p = dense.layers[l].value;  // V x r with r = V
        for (std::uint32_t t = 0; t < vocab; ++t) low.layers[l].value_q[t * vocab + t] = 1.0;
    }
    Workspace wd, wl;
    wd.init(dense.config);
    wl.init(low.config);
    Rng rng(44);
    for (int t = 0; t < 6; ++t) {
        TokenSequence seq(length);
        for (auto& v : seq) v = rng.uniform_int(vocab) + 1;
        const auto i = rng.uniform_int(length);
        seq[i] = kMaskId;
        const auto a = forward_masked(dense, seq, i, wd);
        const auto b = forward_masked(low, seq, i, wl);
        for (std::uint32_t v = 0; v < vocab; ++v)
            CHECK(a[v] == doctest::Approx(b[v]).epsilon(1e-12));
    }
}

TEST_CASE("checkpoints round trip bit-exactly") {
    for (const auto rank : {0u, 2u}) {
        auto cfg = make_config(3, 5, 4, rank, rank == 0, false);
        const auto stack = random_stack(cfg, 77);
        const auto path = std::filesystem::temp_directory_path() / "mbfa_test_stack.fact";
        save_checkpoint(path, stack);
        const auto loaded = load_checkpoint(path);
        CHECK(loaded.config.layers == cfg.layers);
        CHECK(loaded.config.layer_norm == cfg.layer_norm);
        CHECK(loaded.config.skip_connections == cfg.skip_connections);
        for (std::uint32_t l = 0; l < cfg.layers; ++l) {
            CHECK(loaded.layers[l].attention == stack.layers[l].attention);
            CHECK(loaded.layers[l].value == stack.layers[l].value);
            CHECK(loaded.layers[l].value_p == stack.layers[l].value_p);
            CHECK(loaded.layers[l].value_q == stack.layers[l].value_q);
        }
        std::filesystem::remove(path);
    }
}

TEST_SUITE_END();
