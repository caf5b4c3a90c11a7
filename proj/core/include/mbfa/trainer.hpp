#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mbfa/factored.hpp"
#include "mbfa/kbody.hpp"
#include "mbfa/manybody.hpp"
#include "mbfa/tokens.hpp"

namespace mbfa::training {

enum class Masking : std::uint8_t { cyclic, random_fraction };
enum class Schedule : std::uint8_t { constant, cosine };

struct TrainConfig {
    double learning_rate = 0.1;
    Schedule schedule = Schedule::constant;
    std::uint32_t batch_size = 256;
    std::uint32_t epochs = 1;
    Masking masking = Masking::cyclic;
    double mask_fraction = 0.15;  // used by random_fraction
    double weight_decay = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct MetricRow {
    std::uint64_t step = 0;    // optimiser steps taken so far
    std::uint32_t epoch = 0;   // epochs completed
    std::string split;         // "train", "test", or an extra eval tag
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> msd;   // per layer, empty for baselines
};

struct MetricLog {
    std::uint32_t n_layers = 0;  // msd column count
    std::vector<MetricRow> rows;

    // CSV contract: step,epoch,split,loss,accuracy,msd_1..msd_n
    void write_csv(const std::filesystem::path& path) const;
    // per-epoch losses of one split, ordered by epoch
    std::vector<double> split_losses(std::string_view split) const;
    double final_loss(std::string_view split) const;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

struct EvalSet {
    std::string name;
    const TokenDataset* data = nullptr;
};

// Cyclic-masking evaluation: every position of every row once.
EvalResult evaluate(const model::FactoredStack& stack, const TokenDataset& data);
EvalResult evaluate(const KBodyBaseline& model, const TokenDataset& data);

double mlm_loss(const model::FactoredStack& stack, const TokenDataset& data);
double mlm_loss(const KBodyBaseline& model, const TokenDataset& data);

// Expected per-prediction loss under an enumerated joint (tiny instances):
// sum_s pi(s) (1/L) sum_i CE(model conditional at i, s_i).
double population_loss(const model::FactoredStack& stack, const manybody::JointTable& table);
double population_loss(const KBodyBaseline& model, const manybody::JointTable& table);
// Conditional entropy of the enumerated joint itself (the loss floor).
double conditional_entropy(const manybody::JointTable& table);

// Minibatch SGD on the masked-prediction loss. Logs an initial evaluation at
// epoch 0, then one row per split per epoch. extra_evals are evaluated next
// to the test split each epoch. Deterministic for a fixed config (sample
// shuffling, chunked gradient reduction and init all derive from the seed).
MetricLog train(model::FactoredStack& stack, const TokenDataset& train_data,
                const TokenDataset& test_data, const TrainConfig& config,
                std::span<const EvalSet> extra_evals = {});

MetricLog train(KBodyBaseline& model, const TokenDataset& train_data,
                const TokenDataset& test_data, const TrainConfig& config,
                std::span<const EvalSet> extra_evals = {});

// Convenience wrapper used for the dashed-line bounds: trains a fresh k-body
// baseline until the per-epoch test-loss change stays below rel_tol (or
// config.epochs is hit) and returns the converged test loss.
struct BaselineResult {
    KBodyBaseline model;
    MetricLog log;
    double final_test_loss = 0.0;
};
BaselineResult train_kbody_baseline(std::uint32_t k, const TokenDataset& train_data,
                                    const TokenDataset& test_data, TrainConfig config,
                                    double rel_tol = 5e-4, std::uint32_t patience = 3);

// Mean square displacement of one layer from its snapshot:
// ||A - A0||^2 / L^2 + ||Veff - Veff0||^2 / V^2.
double msd(const model::FactoredLayer& now, const model::FactoredLayer& at_start,
           std::uint32_t length, std::uint32_t vocab, std::uint32_t value_rank);
std::vector<double> msd_all(const model::FactoredStack& now, const model::FactoredStack& at_start);

// First epoch index at which a per-epoch MSD series crosses `fraction` of its
// final value; returns the series size if it never does.
std::size_t msd_onset_epoch(std::span<const double> msd_series, double fraction = 0.05);

// Plateau: >= min_epochs consecutive epochs whose relative loss change stays
// below rel_change. `level` is the mean loss over the interval.
struct Plateau {
    std::uint32_t first_epoch = 0, last_epoch = 0;
    double level = 0.0;
};
std::vector<Plateau> detect_plateaus(std::span<const double> per_epoch_loss,
                                     double rel_change = 0.002, std::uint32_t min_epochs = 5);

}  // namespace mbfa::training
