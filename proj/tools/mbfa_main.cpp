// Command-line front end for the many-body factored-attention workbench.
//
// Subcommands mirror the library stages; `run` executes a whole recipe file.
// Exit codes: 0 success, 2 configuration/usage error, 3 stage failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "mbfa/experiment.hpp"
#include "mbfa/factored.hpp"
#include "mbfa/flow.hpp"
#include "mbfa/ingest.hpp"
#include "mbfa/io.hpp"
#include "mbfa/kbody.hpp"
#include "mbfa/manybody.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/sampler.hpp"
#include "mbfa/tokens.hpp"
#include "mbfa/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

mbfa::training::TrainConfig make_train_config(double lr, const std::string& schedule,
                                           std::uint32_t batch, std::uint32_t epochs,
                                           const std::string& masking, double rho, double wd,
                                           std::uint64_t seed) {
    mbfa::training::TrainConfig tc;
    tc.learning_rate = lr;
    tc.batch_size = batch;
    tc.epochs = epochs;
    tc.mask_fraction = rho;
    tc.weight_decay = wd;
    tc.seed = seed;
    if (schedule == "constant") {
        tc.schedule = mbfa::training::Schedule::constant;
    } else if (schedule == "cosine") {
        tc.schedule = mbfa::training::Schedule::cosine;
    } else {
        throw mbfa::expt::ConfigError("schedule must be constant or cosine");
    }
    if (masking == "cyclic") {
        tc.masking = mbfa::training::Masking::cyclic;
    } else if (masking == "random") {
        tc.masking = mbfa::training::Masking::random_fraction;
    } else {
        throw mbfa::expt::ConfigError("masking must be cyclic or random");
    }
    tc.validate();
    return tc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"many-body factored-attention workbench"};
    app.require_subcommand(1);

    // ---- genmodel ----
    auto* genmodel = app.add_subcommand("genmodel", "build a random many-body distribution");
    std::uint32_t gm_order = 4, gm_rank = 200, gm_length = 20, gm_vocab = 10;
    double gm_rate = 0.8, gm_scale = 0.0, gm_scale_c = 1.0;
    std::uint64_t gm_seed = 0;
    std::string gm_out;
    genmodel->add_option("--order", gm_order, "interaction order p >= 2");
    genmodel->add_option("--rank", gm_rank, "number of factor vectors per side");
    genmodel->add_option("--rate", gm_rate, "Bernoulli rate of factor entries");
    genmodel->add_option("-L,--length", gm_length, "sequence length");
    genmodel->add_option("-V,--vocab", gm_vocab, "vocabulary size");
    genmodel->add_option("--seed", gm_seed, "factor seed");
    genmodel->add_option("--scale", gm_scale, "raw energy scale (overrides --scale-c)");
    genmodel->add_option("--scale-c", gm_scale_c,
                         "normalised energy scale c: scale = c / (rank^2 L^(p-1))");
    genmodel->add_option("-o,--out", gm_out, "output .mbdj path")->required();

    // ---- sample-gibbs ----
    auto* gibbs = app.add_subcommand("sample-gibbs", "draw a dataset from a distribution");
    std::string gb_dist, gb_out;
    std::uint64_t gb_rows = 1000, gb_seed = 0;
    std::uint32_t gb_burnin = 100, gb_thinning = 10, gb_chains = 64;
    gibbs->add_option("--dist", gb_dist, "input .mbdj distribution")->required();
    gibbs->add_option("-M,--rows", gb_rows, "number of sequences");
    gibbs->add_option("--burnin", gb_burnin, "sweeps discarded per chain");
    gibbs->add_option("--thinning", gb_thinning, "sweeps between kept rows");
    gibbs->add_option("--chains", gb_chains, "independent chains");
    gibbs->add_option("--seed", gb_seed, "sampler seed");
    gibbs->add_option("-o,--out", gb_out, "output .mbtk path")->required();

    // ---- shared training options ----
    std::string tr_data, tr_test, tr_out_prefix, tr_masking = "cyclic", tr_schedule = "constant";
    std::uint32_t tr_layers = 1, tr_rank = 0, tr_epochs = 10, tr_batch = 256, tr_k = 2;
    double tr_lr = 0.1, tr_rho = 0.15, tr_wd = 0.0, tr_init = 1.0;
    std::uint64_t tr_seed = 0;
    bool tr_ln = false, tr_noskip = false;

    auto add_train_options = [&](CLI::App* cmd) {
        cmd->add_option("--data", tr_data, "training .mbtk")->required();
        cmd->add_option("--test", tr_test, "held-out .mbtk")->required();
        cmd->add_option("--epochs", tr_epochs, "training epochs");
        cmd->add_option("--lr", tr_lr, "learning rate");
        cmd->add_option("--schedule", tr_schedule, "constant | cosine");
        cmd->add_option("--batch", tr_batch, "minibatch size");
        cmd->add_option("--masking", tr_masking, "cyclic | random");
        cmd->add_option("--mask-fraction", tr_rho, "masked fraction for random masking");
        cmd->add_option("--weight-decay", tr_wd, "L2 weight decay");
        cmd->add_option("--seed", tr_seed, "training seed");
        cmd->add_option("-o,--out-prefix", tr_out_prefix, "artifact prefix")->required();
    };

    auto* train_cmd = app.add_subcommand("train", "train a factored-attention stack");
    add_train_options(train_cmd);
    train_cmd->add_option("-n,--layers", tr_layers, "number of layers");
    train_cmd->add_option("--value-rank", tr_rank, "low-rank value factorisation (0 = dense)");
    train_cmd->add_flag("--layer-norm", tr_ln, "normalise activations between layers");
    train_cmd->add_flag("--no-skip", tr_noskip, "disable skip connections");
    train_cmd->add_option("--init-scale", tr_init, "multiplier on the init std");

    auto* baseline_cmd = app.add_subcommand("train-baseline", "train a k-body baseline");
    add_train_options(baseline_cmd);
    baseline_cmd->add_option("-k,--order", tr_k, "interaction order of the baseline");

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_model, ev_data;
    eval_cmd->add_option("--model", ev_model, ".fact or .mbkb checkpoint")->required();
    eval_cmd->add_option("--data", ev_data, ".mbtk dataset")->required();

    // ---- clone ----
    auto* clone_cmd = app.add_subcommand("clone", "sample a clone dataset via Metropolis-Hastings");
    std::string cl_model, cl_seeds, cl_out_prefix;
    std::uint32_t cl_sweeps = 20;
    std::uint64_t cl_rows = 620, cl_seed = 0;
    clone_cmd->add_option("--model", cl_model, ".fact checkpoint")->required();
    clone_cmd->add_option("--seeds", cl_seeds, "seed .mbtk dataset")->required();
    clone_cmd->add_option("--rows", cl_rows, "seed rows used (from the start)");
    clone_cmd->add_option("--sweeps", cl_sweeps, "MH sweeps per chain");
    clone_cmd->add_option("--seed", cl_seed, "sampler seed");
    clone_cmd->add_option("-o,--out-prefix", cl_out_prefix, "artifact prefix")->required();

    // ---- flow ----
    auto* flow_cmd = app.add_subcommand("flow", "integrate the two-layer gradient flow");
    std::string fl_stats, fl_out, fl_a1_init = "zero";
    double fl_dt = 1e-3, fl_time = 10.0, fl_ridge = 0.0, fl_eps = 1e-2;
    std::uint32_t fl_record = 100;
    std::uint64_t fl_seed = 0;
    flow_cmd->add_option("--stats", fl_stats, "statistics text file")->required();
    flow_cmd->add_option("--dt", fl_dt, "integration step");
    flow_cmd->add_option("-T,--time", fl_time, "total time");
    flow_cmd->add_option("--ridge", fl_ridge, "L2 regularisation strength");
    flow_cmd->add_option("--a1-init", fl_a1_init, "zero | diag | gauss");
    flow_cmd->add_option("--a1-eps", fl_eps, "size of the A1 initialisation");
    flow_cmd->add_option("--record-every", fl_record, "steps between recorded points");
    flow_cmd->add_option("--seed", fl_seed, "seed for gauss init");
    flow_cmd->add_option("-o,--out", fl_out, "trajectory CSV path")->required();

    // ---- ingest ----
    auto* ingest_cmd = app.add_subcommand("ingest", "tokenise a text corpus into a dataset");
    std::string in_input, in_out, in_vocab_out;
    std::uint32_t in_cap = 1000, in_length = 16;
    ingest_cmd->add_option("-i,--input", in_input, "corpus text file")->required();
    ingest_cmd->add_option("--cap", in_cap, "vocabulary cap (including mask and unknown)");
    ingest_cmd->add_option("-L,--length", in_length, "sequence length");
    ingest_cmd->add_option("-o,--out", in_out, "output .mbtk path")->required();
    ingest_cmd->add_option("--vocab-out", in_vocab_out, "vocabulary table path");

    // ---- run ----
    auto* run_cmd = app.add_subcommand("run", "execute an experiment recipe");
    std::string rn_config;
    bool rn_dry = false;
    run_cmd->add_option("-c,--config", rn_config, "recipe file")->required();
    run_cmd->add_flag("--dry-run", rn_dry, "validate and print the plan only");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*genmodel) {
            mbfa::manybody::CouplingConfig cc;
            cc.order = gm_order;
            cc.rank = gm_rank;
            cc.bernoulli_rate = gm_rate;
            cc.length = gm_length;
            cc.vocab = gm_vocab;
            cc.seed = gm_seed;
            cc.scale = gm_scale != 0.0
                           ? gm_scale
                           : gm_scale_c / (double(gm_rank) * gm_rank *
                                           mbfa::ipow(double(gm_length), gm_order - 1));
            try {
                cc.validate();
            } catch (const std::exception& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return kExitConfig;
            }
            const auto dist = mbfa::manybody::build_random_couplings(cc);
            mbfa::manybody::save_distribution(gm_out, dist);
            std::cout << "wrote " << gm_out << " (order " << cc.order << ", rank " << cc.rank
                      << ", scale " << cc.scale << ")\n";
        } else if (*gibbs) {
            const auto dist = mbfa::manybody::load_distribution(gb_dist);
            const auto ds = mbfa::manybody::gibbs_sample(dist, gb_rows, gb_burnin, gb_thinning,
                                                         gb_seed, gb_chains);
            mbfa::save_dataset(gb_out, ds);
            std::cout << "wrote " << gb_out << " (" << ds.rows() << " rows)\n";
        } else if (*train_cmd) {
            const auto data = mbfa::load_dataset(tr_data);
            const auto test = mbfa::load_dataset(tr_test);
            const auto tc = make_train_config(tr_lr, tr_schedule, tr_batch, tr_epochs, tr_masking,
                                              tr_rho, tr_wd, tr_seed);
            mbfa::model::StackConfig sc;
            sc.layers = tr_layers;
            sc.length = data.length;
            sc.vocab = data.vocab;
            sc.value_rank = tr_rank;
            sc.layer_norm = tr_ln;
            sc.skip_connections = !tr_noskip;
            auto stack = mbfa::model::make_stack(sc);
            mbfa::model::init_gaussian(stack, mbfa::derive_seed(tr_seed, "init"), tr_init);
            auto metrics = mbfa::training::train(stack, data, test, tc);
            metrics.write_csv(tr_out_prefix + ".metrics.csv");
            mbfa::model::save_checkpoint(tr_out_prefix + ".fact", stack);
            std::cout << "final test loss " << metrics.final_loss("test") << "; wrote "
                      << tr_out_prefix << ".fact\n";
        } else if (*baseline_cmd) {
            const auto data = mbfa::load_dataset(tr_data);
            const auto test = mbfa::load_dataset(tr_test);
            const auto tc = make_train_config(tr_lr, tr_schedule, tr_batch, tr_epochs, tr_masking,
                                              tr_rho, tr_wd, tr_seed);
            auto result = mbfa::training::train_kbody_baseline(tr_k, data, test, tc);
            result.log.write_csv(tr_out_prefix + ".metrics.csv");
            mbfa::training::save_kbody(tr_out_prefix + ".mbkb", result.model);
            std::cout << "converged test loss " << result.final_test_loss << "; wrote "
                      << tr_out_prefix << ".mbkb\n";
        } else if (*eval_cmd) {
            const auto data = mbfa::load_dataset(ev_data);
            mbfa::training::EvalResult res;
            if (ev_model.size() >= 5 && ev_model.substr(ev_model.size() - 5) == ".mbkb") {
                res = mbfa::training::evaluate(mbfa::training::load_kbody(ev_model), data);
            } else {
                res = mbfa::training::evaluate(mbfa::model::load_checkpoint(ev_model), data);
            }
            std::cout << "loss " << res.loss << " accuracy " << res.accuracy << "\n";
        } else if (*clone_cmd) {
            const auto stack = mbfa::model::load_checkpoint(cl_model);
            auto seeds = mbfa::load_dataset(cl_seeds);
            const auto rows = std::min<std::uint64_t>(cl_rows, seeds.rows());
            seeds.tokens.resize(rows * seeds.length);
            auto result = mbfa::sampler::generate_clone(stack, seeds, cl_sweeps, cl_seed);
            mbfa::save_dataset(cl_out_prefix + ".mbtk", result.data);
            mbfa::sampler::write_score_trace_csv(cl_out_prefix + ".trace.csv", result);
            mbfa::sampler::write_clone_metadata(cl_out_prefix + ".meta",
                                                mbfa::fnv1a64_file(cl_model),
                                                mbfa::fnv1a64_file(cl_seeds), cl_sweeps, cl_seed);
            std::cout << "wrote " << cl_out_prefix << ".mbtk (" << result.data.rows()
                      << " rows, final mean score " << result.mean_score.back() << ")\n";
        } else if (*flow_cmd) {
            const auto stats = mbfa::flow::load_statistics(fl_stats);
            auto state = mbfa::flow::FlowState::zeros(stats.length);
            if (fl_a1_init == "diag") {
                for (std::uint32_t i = 0; i < stats.length; ++i) state.a1(i, i) = fl_eps;
            } else if (fl_a1_init == "gauss") {
                mbfa::Rng rng(mbfa::derive_seed(fl_seed, "flow.a1"));
                for (double& v : state.a1.data) v = fl_eps * rng.normal();
            } else if (fl_a1_init != "zero") {
                std::cerr << "config error: --a1-init must be zero, diag or gauss\n";
                return kExitConfig;
            }
            const auto rhs = mbfa::flow::make_gaussian_rhs(stats);
            const auto traj =
                mbfa::flow::integrate_flow(state, rhs, fl_dt, fl_time, fl_ridge, fl_record);
            mbfa::flow::write_trajectory_csv(fl_out, traj, stats);
            std::cout << "wrote " << fl_out << " (" << traj.size() << " points)\n";
        } else if (*ingest_cmd) {
            const auto corpus = mbfa::read_file_text(in_input);
            auto [ds, vocab] = mbfa::text::ingest_corpus(corpus, in_cap, in_length);
            mbfa::save_dataset(in_out, ds);
            if (!in_vocab_out.empty()) mbfa::text::save_vocabulary(in_vocab_out, vocab);
            std::cout << "wrote " << in_out << " (" << ds.rows() << " rows, vocab "
                      << ds.vocab << ")\n";
        } else if (*run_cmd) {
            mbfa::expt::ExperimentConfig config;
            try {
                config = mbfa::expt::ExperimentConfig::load(rn_config);
            } catch (const mbfa::expt::ConfigError& e) {
                std::cerr << "config error: " << e.what() << "\n";
                return kExitConfig;
            }
            mbfa::expt::run_experiment(config, rn_dry, std::cout);
        }
    } catch (const mbfa::expt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
    return kExitOk;
}
