#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "mbfa/factored.hpp"
#include "mbfa/kbody.hpp"
#include "mbfa/manybody.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/io.hpp"
#include "mbfa/trainer.hpp"

using namespace mbfa;
using namespace mbfa::training;

namespace {

manybody::ManyBodyDistribution tiny_distribution(std::uint32_t p, double scale,
                                                 std::uint32_t length = 4,
                                                 std::uint32_t vocab = 3) {
    manybody::CouplingConfig cc;
    cc.order = p;
    cc.rank = 3;
    cc.length = length;
    cc.vocab = vocab;
    cc.seed = 100 + p;
    cc.scale = scale;
    return manybody::build_random_couplings(cc);
}

TokenDataset uniform_dataset(std::uint64_t rows, std::uint32_t length, std::uint32_t vocab,
                             std::uint64_t seed) {
    TokenDataset ds;
    ds.length = length;
    ds.vocab = vocab;
    ds.tokens.resize(rows * length);
    Rng rng(seed);
    for (auto& t : ds.tokens) t = rng.uniform_int(vocab) + 1;
    return ds;
}

TrainConfig quick_config(std::uint32_t epochs, std::uint64_t seed = 1) {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = 64;
    tc.learning_rate = 0.1;
    tc.seed = seed;
    return tc;
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("uniform prediction scores exactly ln V") {
    const auto ds = uniform_dataset(50, 5, 4, 9);
    const auto stack = model::make_stack([] {
        model::StackConfig sc;
        sc.layers = 2;
        sc.length = 5;
        sc.vocab = 4;
        return sc;
    }());
    CHECK(mlm_loss(stack, ds) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    const auto res = evaluate(stack, ds);
    // argmax over equal logits picks the first token; on balanced data that
    // hits about 1/V of the time
    CHECK(std::abs(res.accuracy - 0.25) < 3.0 * std::sqrt(0.25 * 0.75 / (50.0 * 5.0)));
}

TEST_CASE("ground-truth baseline achieves the conditional entropy exactly") {
    const auto dist = tiny_distribution(3, 0.05);
    const auto table = manybody::enumerate_joint(dist);
    const auto baseline = kbody_from_distribution(dist);
    const double model_loss = population_loss(baseline, table);
    const double entropy = conditional_entropy(table);
    CHECK(model_loss == doctest::Approx(entropy).epsilon(1e-10));
    // any other model does worse: cross entropy >= conditional entropy
    auto perturbed = baseline;
    perturbed.j[0] += 0.5;
    CHECK(population_loss(perturbed, table) > entropy);
}

TEST_CASE("duplicating dataset rows leaves the loss unchanged") {
    const auto dist = tiny_distribution(2, 0.1);
    auto ds = manybody::gibbs_sample(dist, 40, 10, 2, 3);
    auto stack = model::make_stack([] {
        model::StackConfig sc;
        sc.layers = 1;
        sc.length = 4;
        sc.vocab = 3;
        return sc;
    }());
    model::init_gaussian(stack, 8);
    const double single = mlm_loss(stack, ds);
    TokenDataset doubled = ds;
    doubled.tokens.insert(doubled.tokens.end(), ds.tokens.begin(), ds.tokens.end());
    CHECK(mlm_loss(stack, doubled) == doctest::Approx(single).epsilon(1e-13));
}

TEST_CASE("evaluation is side-effect free") {
    const auto ds = uniform_dataset(30, 4, 3, 4);
    auto stack = model::make_stack([] {
        model::StackConfig sc;
        sc.layers = 2;
        sc.length = 4;
        sc.vocab = 3;
        return sc;
    }());
    model::init_gaussian(stack, 5);
    const auto a = evaluate(stack, ds);
    const auto b = evaluate(stack, ds);
    CHECK(a.loss == b.loss);
    CHECK(a.accuracy == b.accuracy);
}

TEST_CASE("zero epochs return the model untouched with only the initial evaluation") {
    const auto ds = uniform_dataset(20, 4, 3, 2);
    auto stack = model::make_stack([] {
        model::StackConfig sc;
        sc.layers = 2;
        sc.length = 4;
        sc.vocab = 3;
        return sc;
    }());
    model::init_gaussian(stack, 3);
    const auto before = stack;
    auto cfg = quick_config(0);
    const auto log = train(stack, ds, ds, cfg);
    for (std::uint32_t l = 0; l < 2; ++l) {
        CHECK(stack.layers[l].attention == before.layers[l].attention);
        CHECK(stack.layers[l].value == before.layers[l].value);
    }
    CHECK(log.rows.size() == 1);
    CHECK(log.rows[0].split == "test");
    CHECK(log.rows[0].epoch == 0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto dist = tiny_distribution(2, 0.1);
    const auto train_ds = manybody::gibbs_sample(dist, 100, 10, 2, 5);
    const auto test_ds = manybody::gibbs_sample(dist, 50, 10, 2, 6);
    auto run = [&] {
        auto stack = model::make_stack([] {
            model::StackConfig sc;
            sc.layers = 2;
            sc.length = 4;
            sc.vocab = 3;
            return sc;
        }());
        model::init_gaussian(stack, 11);
        return train(stack, train_ds, test_ds, quick_config(3, 42));
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t r = 0; r < a.rows.size(); ++r) {
        CHECK(a.rows[r].loss == b.rows[r].loss);
        CHECK(a.rows[r].accuracy == b.rows[r].accuracy);
        CHECK(a.rows[r].msd == b.rows[r].msd);
    }
}

TEST_CASE("training reduces the loss on structured data") {
    const auto dist = tiny_distribution(2, 0.2);
    const auto train_ds = manybody::gibbs_sample(dist, 600, 20, 2, 5);
    const auto test_ds = manybody::gibbs_sample(dist, 200, 20, 2, 6);
    auto stack = model::make_stack([] {
        model::StackConfig sc;
        sc.layers = 1;
        sc.length = 4;
        sc.vocab = 3;
        return sc;
    }());
    model::init_gaussian(stack, 1);
    const auto log = train(stack, train_ds, test_ds, quick_config(12));
    const auto losses = log.split_losses("test");
    CHECK(losses.back() < losses.front() - 0.01);
}

TEST_CASE("trained baseline approaches the conditional entropy on its own order") {
    // infinite-data proxy: a large sample of a tiny instance
    const auto dist = tiny_distribution(2, 0.15);
    const auto table = manybody::enumerate_joint(dist);
    const auto train_ds = manybody::gibbs_sample(dist, 4000, 30, 2, 7);
    const auto test_ds = manybody::gibbs_sample(dist, 1000, 30, 2, 8);
    auto cfg = quick_config(60, 3);
    cfg.batch_size = 128;
    const auto result = train_kbody_baseline(2, train_ds, test_ds, cfg);
    const double entropy = conditional_entropy(table);
    const double model_population_loss = population_loss(result.model, table);
    CHECK(model_population_loss < entropy * 1.01);
    CHECK(model_population_loss >= entropy - 1e-9);
}

TEST_CASE("baseline on unstructured data converges to ln V") {
    const auto ds = uniform_dataset(2000, 4, 3, 12);
    const auto test = uniform_dataset(500, 4, 3, 13);
    auto cfg = quick_config(30, 4);
    cfg.batch_size = 128;
    const auto result = train_kbody_baseline(2, ds, test, cfg);
    CHECK(std::abs(result.final_test_loss - std::log(3.0)) < 0.02);
}

TEST_CASE("msd is zero for unchanged weights and exact for a unit shift") {
    model::StackConfig sc;
    sc.layers = 1;
    sc.length = 20;
    sc.vocab = 10;
    auto stack = model::make_stack(sc);
    model::init_gaussian(stack, 2);
    const auto snapshot = stack;
    CHECK(msd_all(stack, snapshot) == std::vector<double>{0.0});
    for (auto& v : stack.layers[0].attention) v += 1.0;
    // ||A - A0||^2 / L^2 = 400 / 400, value part unchanged
    CHECK(msd_all(stack, snapshot)[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("msd onset finds the first crossing of the final-value fraction") {
    const std::vector<double> series{0.0, 0.001, 0.002, 0.2, 0.5, 1.0};
    CHECK(msd_onset_epoch(series, 0.05) == 3);
    CHECK(msd_onset_epoch(std::vector<double>{0.0, 0.0}, 0.05) == 2);
}

TEST_CASE("plateau detection flags flat stretches with their level") {
    std::vector<double> losses;
    for (int e = 0; e < 5; ++e) losses.push_back(2.0 - 0.1 * e);       // falling
    for (int e = 0; e < 8; ++e) losses.push_back(1.6 + 1e-4 * (e % 2));  // flat
    for (int e = 0; e < 4; ++e) losses.push_back(1.5 - 0.1 * e);       // falling again
    for (int e = 0; e < 6; ++e) losses.push_back(1.2);                  // flat tail
    const auto plateaus = detect_plateaus(losses, 0.002, 5);
    REQUIRE(plateaus.size() == 2);
    CHECK(plateaus[0].level == doctest::Approx(1.6).epsilon(1e-3));
    CHECK(plateaus[1].level == doctest::Approx(1.2).epsilon(1e-6));
    CHECK(plateaus[0].last_epoch - plateaus[0].first_epoch + 1 >= 5);
}

TEST_CASE("metric log CSV has the contract columns") {
    MetricLog log;
    log.n_layers = 2;
    log.rows.push_back({0, 0, "test", 1.5, 0.25, {0.0, 0.0}});
    log.rows.push_back({10, 1, "train", 1.2, 0.33, {0.1, 0.2}});
    const auto path = std::filesystem::temp_directory_path() / "mbfa_test_metrics.csv";
    log.write_csv(path);
    const auto text = read_file_text(path);
    CHECK(text.rfind("step,epoch,split,loss,accuracy,msd_1,msd_2\n", 0) == 0);
    CHECK(text.find("10,1,train,") != std::string::npos);
    std::filesystem::remove(path);
}

TEST_SUITE_END();
