#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbfa/manybody.hpp"
#include "mbfa/trainer.hpp"

namespace mbfa::expt {

// Configuration problems (bad keys, missing files, invalid values).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage failed after validation passed.
struct StageError : std::runtime_error {
    StageError(const std::string& stage, const std::string& message)
        : std::runtime_error("[" + stage + "] " + message), stage_name(stage) {}
    std::string stage_name;
};

struct ModelSpec {
    std::string name;
    bool is_factored = true;
    std::uint32_t layers_or_k = 1;
    std::uint32_t value_rank = 0;
    bool skip_connections = true;
    bool layer_norm = false;
    double init_scale = 1.0;
    std::uint32_t epochs = 0;  // 0 = experiment default
    double lr = 0.0;           // 0 = experiment default
};

struct CloneSpec {
    std::string name;
    std::string model;       // a factored model trained in this experiment
    std::uint32_t sweeps = 20;
    std::uint64_t seeds = 620;  // rows taken from the start of the test set
};

struct CrossEvalSpec {
    std::uint32_t layers = 0;  // 0 = no cross-eval stage
    std::uint32_t value_rank = 0;
    std::uint32_t epochs = 0;
    double lr = 0.0;
    double init_scale = 1.0;
    std::vector<std::string> datasets;  // clone names evaluated next to "test"
};

// Parsed experiment recipe: `key = value` lines, '#' comments. The documented
// schema lives in the README.
struct ExperimentConfig {
    std::string source_text;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;

    // data source (exactly one):
    std::optional<manybody::CouplingConfig> dist;  // + gibbs below
    std::uint64_t gibbs_train_rows = 0, gibbs_test_rows = 0;
    std::uint32_t gibbs_burnin = 100, gibbs_thinning = 10, gibbs_chains = 64;

    std::filesystem::path corpus_input;  // whitespace corpus file
    std::uint32_t corpus_cap = 0, corpus_length = 0;
    double corpus_test_fraction = 0.1;

    std::filesystem::path data_train, data_test;  // pre-built MBTK files

    training::TrainConfig train_defaults;
    std::vector<ModelSpec> models;
    std::vector<CloneSpec> clones;
    CrossEvalSpec crosseval;

    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);
};

// Executes generate -> train -> clone -> cross-eval as configured, writing
// artifacts and a manifest under out_dir. With dry_run, prints the plan and
// touches nothing. Throws ConfigError / StageError; on stage failure a FAILED
// marker is left next to the partial outputs.
void run_experiment(const ExperimentConfig& config, bool dry_run, std::ostream& log);

}  // namespace mbfa::expt
