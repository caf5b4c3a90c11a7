#include "mbfa/sampler.hpp"

#include <cmath>
#include <stdexcept>

#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/threads.hpp"

namespace mbfa::sampler {

double score(const model::FactoredStack& stack, std::span<const std::uint32_t> seq,
             model::Workspace& ws) {
    const auto& cfg = stack.config;
    validate_sequence(seq, cfg.length, cfg.vocab, 0);
    double e = 0.0;
    for (std::uint32_t i = 0; i < cfg.length; ++i) {
        auto logits = model::forward_masked_at(stack, seq, i, ws);
        e -= logits[seq[i] - 1];
    }
    return e;
}

MHChain make_chain(const model::FactoredStack& stack, std::span<const std::uint32_t> seed_row,
                   std::uint64_t seed, model::Workspace& ws) {
    MHChain chain;
    chain.state.assign(seed_row.begin(), seed_row.end());
    chain.rng = Rng(seed);
    chain.score = score(stack, chain.state, ws);
    return chain;
}

void mh_sweep(const model::FactoredStack& stack, MHChain& chain, model::Workspace& ws) {
    const auto& cfg = stack.config;
    std::vector<double> probs(cfg.vocab);
    for (std::uint32_t i = 0; i < cfg.length; ++i) {
        ++chain.proposed;
        auto logits = model::forward_masked_at(stack, chain.state, i, ws);
        softmax(logits, probs);
        const std::uint32_t current = chain.state[i];
        const auto proposal =
            static_cast<std::uint32_t>(chain.rng.categorical(probs)) + 1;
        if (proposal == current) {  // ratio is exactly 1
            ++chain.accepted;
            continue;
        }
        chain.state[i] = proposal;
        const double proposed_score = score(stack, chain.state, ws);
        if (!std::isfinite(proposed_score))
            throw std::runtime_error("mh_sweep: non-finite score (model diverged?)");
        const double log_ratio = (chain.score - proposed_score) +
                                 std::log(probs[current - 1]) - std::log(probs[proposal - 1]);
        const double u = chain.rng.uniform();
        if (std::log(std::max(u, 1e-300)) < log_ratio) {
            ++chain.accepted;
            chain.score = proposed_score;
        } else {
            chain.state[i] = current;
        }
    }
    ++chain.sweeps_done;
}

CloneResult generate_clone(const model::FactoredStack& stack, const TokenDataset& seeds,
                           std::uint32_t sweeps, std::uint64_t seed) {
    const auto& cfg = stack.config;
    if (cfg.length != seeds.length || cfg.vocab != seeds.vocab)
        throw std::invalid_argument("generate_clone: seed dataset does not match model shape");
    const std::uint64_t n_chains = seeds.rows();
    if (n_chains == 0) throw std::invalid_argument("generate_clone: empty seed dataset");

    std::vector<MHChain> chains(n_chains);
    std::vector<double> sweep_scores(n_chains, 0.0);
    CloneResult out;
    out.mean_score.reserve(sweeps + 1);
    out.acceptance_rate.reserve(sweeps);

    parallel_chunks(n_chains, 4, [&](std::size_t, std::size_t begin, std::size_t end) {
        model::Workspace ws;
        ws.init(cfg);
        for (std::size_t c = begin; c < end; ++c) {
            chains[c] = make_chain(stack, seeds.row(c), derive_seed(seed, "mh.chain", c), ws);
            sweep_scores[c] = chains[c].score;
        }
    });
    double mean0 = 0.0;
    for (double s : sweep_scores) mean0 += s;
    out.mean_score.push_back(mean0 / double(n_chains));

    std::uint64_t accepted_prev = 0;
    const std::uint64_t proposals_per_sweep = n_chains * cfg.length;
    for (std::uint32_t t = 0; t < sweeps; ++t) {
        parallel_chunks(n_chains, 4, [&](std::size_t, std::size_t begin, std::size_t end) {
            model::Workspace ws;
            ws.init(cfg);
            for (std::size_t c = begin; c < end; ++c) {
                mh_sweep(stack, chains[c], ws);
                sweep_scores[c] = chains[c].score;
            }
        });
        double mean = 0.0;
        std::uint64_t accepted = 0;
        for (std::size_t c = 0; c < n_chains; ++c) {
            mean += sweep_scores[c];
            accepted += chains[c].accepted;  // counters are cumulative
        }
        out.mean_score.push_back(mean / double(n_chains));
        out.acceptance_rate.push_back(double(accepted - accepted_prev) /
                                      double(proposals_per_sweep));
        accepted_prev = accepted;
    }

    out.data.length = seeds.length;
    out.data.vocab = seeds.vocab;
    out.data.provenance = Provenance::clone;
    out.data.tokens.resize(n_chains * seeds.length);
    for (std::size_t c = 0; c < n_chains; ++c)
        std::copy(chains[c].state.begin(), chains[c].state.end(),
                  out.data.tokens.begin() + c * seeds.length);
    return out;
}

void write_score_trace_csv(const std::filesystem::path& path, const CloneResult& result) {
    std::string out = "sweep,mean_score,acceptance_rate\n";
    char buf[80];
    for (std::size_t t = 0; t < result.mean_score.size(); ++t) {
        if (t == 0) {
            std::snprintf(buf, sizeof buf, "0,%.17g,\n", result.mean_score[0]);
        } else {
            std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", t, result.mean_score[t],
                          result.acceptance_rate[t - 1]);
        }
        out += buf;
    }
    write_file_text(path, out);
}

void write_clone_metadata(const std::filesystem::path& path, std::uint64_t checkpoint_hash,
                          std::uint64_t seed_dataset_hash, std::uint32_t sweeps,
                          std::uint64_t seed) {
    std::string out;
    out += "checkpoint_hash = " + hex64(checkpoint_hash) + "\n";
    out += "seed_dataset_hash = " + hex64(seed_dataset_hash) + "\n";
    out += "sweeps = " + std::to_string(sweeps) + "\n";
    out += "seed = " + std::to_string(seed) + "\n";
    write_file_text(path, out);
}

ConsistencyVerdict check_conditional_consistency(const Mat& a, const Mat& b, double tol) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("conditional tables must have matching shapes");
    const std::size_t m = a.rows, n = a.cols;
    for (std::size_t j = 0; j < n; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < m; ++i) col += a(i, j);
        if (std::abs(col - 1.0) > 1e-6)
            throw std::invalid_argument("table A columns must sum to 1");
    }
    for (std::size_t i = 0; i < m; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += b(i, j);
        if (std::abs(row - 1.0) > 1e-6)
            throw std::invalid_argument("table B rows must sum to 1");
    }

    // Unknowns x = (tau_0..tau_{m-1}, eta_0..eta_{n-1}).
    // Equations: tau_i b_ij - eta_j a_ij = 0 for all (i,j), plus the two
    // normalisations sum tau = 1, sum eta = 1.
    Mat sys(m * n + 2, m + n);
    std::vector<double> rhs(m * n + 2, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            sys(i * n + j, i) = b(i, j);
            sys(i * n + j, m + j) = -a(i, j);
        }
    for (std::size_t i = 0; i < m; ++i) sys(m * n, i) = 1.0;
    for (std::size_t j = 0; j < n; ++j) sys(m * n + 1, m + j) = 1.0;
    rhs[m * n] = 1.0;
    rhs[m * n + 1] = 1.0;

    auto x = least_squares(sys, rhs);

    ConsistencyVerdict verdict;
    verdict.tau.assign(x.begin(), x.begin() + m);
    verdict.eta.assign(x.begin() + m, x.end());
    double resid = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double r = verdict.tau[i] * b(i, j) - verdict.eta[j] * a(i, j);
            resid += r * r;
        }
    double norm_err = 0.0;
    for (double t : verdict.tau) norm_err += t;
    for (double e : verdict.eta) norm_err += e;
    norm_err = std::abs(norm_err - 2.0);
    double min_mass = 0.0;
    for (double t : verdict.tau) min_mass = std::min(min_mass, t);
    for (double e : verdict.eta) min_mass = std::min(min_mass, e);

    verdict.residual = std::sqrt(resid);
    verdict.compatible = verdict.residual <= tol && norm_err <= 1e-6 && min_mass >= -1e-9;
    return verdict;
}

}  // namespace mbfa::sampler
