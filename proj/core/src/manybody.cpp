#include "mbfa/manybody.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/threads.hpp"

namespace mbfa::manybody {

namespace {

// Scratch for conditional evaluation. b holds the context inner products
// b[q*R + r] = sum_j j^q_j u^r_{s_j} over the unmasked sites in play;
// cm[r*p + (m-1)] = sum_q (j^q_i)^m b_qr^(p-m) for the queried site i.
struct CondScratch {
    std::vector<double> b;
    std::vector<double> ucol;  // token factor column, contiguous over r
    std::vector<double> cm;
    std::vector<double> jm;    // powers of j^q_i
    std::vector<double> logits;

    void init(const CouplingConfig& cfg) {
        const std::size_t rank = cfg.rank;
        b.assign(rank * rank, 0.0);
        ucol.assign(rank, 0.0);
        cm.assign(rank * cfg.order, 0.0);
        jm.assign(cfg.order + 1, 0.0);
        logits.assign(cfg.vocab, 0.0);
    }
};

void gather_token_column(const ManyBodyDistribution& dist, std::uint32_t token,
                         std::vector<double>& ucol) {
    const std::uint32_t rank = dist.config.rank;
    const std::uint32_t vocab = dist.config.vocab;
    const std::uint32_t a = token - 1;
    for (std::uint32_t r = 0; r < rank; ++r) ucol[r] = dist.tok_factors[std::size_t(r) * vocab + a];
}

// b += sign * outer(j_col(i), u_col(token))
void add_site(const ManyBodyDistribution& dist, std::vector<double>& b, std::uint32_t i,
              std::uint32_t token, double sign, std::vector<double>& ucol) {
    const std::uint32_t rank = dist.config.rank;
    const std::uint32_t length = dist.config.length;
    gather_token_column(dist, token, ucol);
    for (std::uint32_t q = 0; q < rank; ++q) {
        const double jqi = sign * dist.pos_factors[std::size_t(q) * length + i];
        if (jqi == 0.0) continue;
        double* brow = b.data() + std::size_t(q) * rank;
        for (std::uint32_t r = 0; r < rank; ++r) brow[r] += jqi * ucol[r];
    }
}

void build_context(const ManyBodyDistribution& dist, std::span<const std::uint32_t> seq,
                   CondScratch& ws) {
    std::fill(ws.b.begin(), ws.b.end(), 0.0);
    for (std::uint32_t j = 0; j < seq.size(); ++j) {
        if (seq[j] == kMaskId) continue;
        add_site(dist, ws.b, j, seq[j], 1.0, ws.ucol);
    }
}

// Logits over tokens for site i given the context products in ws.b (which
// must exclude site i). Binomial expansion over the multiplicity m of site i
// in the energy tuples:
//   l_a = -scale * sum_m C(p,m) sum_r (u^r_a)^m * cm[r,m],
//   cm[r,m] = sum_q (j^q_i)^m * b_qr^(p-m).
void site_logits(const ManyBodyDistribution& dist, std::uint32_t i, CondScratch& ws) {
    const auto& cfg = dist.config;
    const std::uint32_t rank = cfg.rank;
    const std::uint32_t p = cfg.order;

    std::fill(ws.cm.begin(), ws.cm.end(), 0.0);
    for (std::uint32_t q = 0; q < rank; ++q) {
        const double jqi = dist.pos_factors[std::size_t(q) * cfg.length + i];
        if (jqi == 0.0) continue;
        ws.jm[1] = jqi;
        for (std::uint32_t m = 2; m <= p; ++m) ws.jm[m] = ws.jm[m - 1] * jqi;
        const double* brow = ws.b.data() + std::size_t(q) * rank;
        for (std::uint32_t r = 0; r < rank; ++r) {
            double* cmr = ws.cm.data() + std::size_t(r) * p;
            const double bqr = brow[r];
            double w = 1.0;  // b^(p-m), starting at m = p
            for (std::uint32_t m = p; m >= 1; --m) {
                cmr[m - 1] += ws.jm[m] * w;
                w *= bqr;
            }
        }
    }

    // Binomial coefficients C(p, m).
    double binom[65];
    binom[0] = 1.0;
    for (std::uint32_t m = 1; m <= p; ++m) binom[m] = binom[m - 1] * double(p - m + 1) / double(m);

    const std::uint32_t vocab = cfg.vocab;
    for (std::uint32_t a = 0; a < vocab; ++a) {
        double acc[65] = {};
        for (std::uint32_t r = 0; r < rank; ++r) {
            const double uv = dist.tok_factors[std::size_t(r) * vocab + a];
            if (uv == 0.0) continue;
            const double* cmr = ws.cm.data() + std::size_t(r) * p;
            double w = uv;
            for (std::uint32_t m = 1; m <= p; ++m) {
                acc[m] += w * cmr[m - 1];
                w *= uv;
            }
        }
        double total = 0.0;
        for (std::uint32_t m = 1; m <= p; ++m) total += binom[m] * acc[m];
        ws.logits[a] = -cfg.scale * total;
    }
}

double energy_from_context(const ManyBodyDistribution& dist, const std::vector<double>& b) {
    const auto& cfg = dist.config;
    double total = 0.0;
    for (double x : b) total += ipow(x, cfg.order);
    return cfg.scale * total;
}

}  // namespace

void CouplingConfig::validate() const {
    if (order < 2) throw std::invalid_argument("coupling order must be >= 2");
    if (order > 64) throw std::invalid_argument("coupling order above 64 is not supported");
    if (!(bernoulli_rate >= 0.0 && bernoulli_rate <= 1.0))
        throw std::invalid_argument("bernoulli_rate must lie in [0,1]");
    if (length == 0 || vocab == 0) throw std::invalid_argument("L and V must be positive");
    if (!std::isfinite(scale)) throw std::invalid_argument("scale must be finite");
}

double ManyBodyDistribution::coupling_j(std::span<const std::uint32_t> idx) const {
    double total = 0.0;
    for (std::uint32_t q = 0; q < config.rank; ++q) {
        double prod = 1.0;
        for (std::uint32_t i : idx) prod *= pos_factor(q)[i];
        total += prod;
    }
    return total;
}

double ManyBodyDistribution::coupling_u(std::span<const std::uint32_t> idx) const {
    double total = 0.0;
    for (std::uint32_t r = 0; r < config.rank; ++r) {
        double prod = 1.0;
        for (std::uint32_t a : idx) prod *= tok_factor(r)[a];
        total += prod;
    }
    return total;
}

ManyBodyDistribution build_random_couplings(const CouplingConfig& config) {
    config.validate();
    ManyBodyDistribution dist;
    dist.config = config;
    dist.pos_factors.resize(std::size_t(config.rank) * config.length);
    dist.tok_factors.resize(std::size_t(config.rank) * config.vocab);
    Rng rng(derive_seed(config.seed, "manybody.factors"));
    for (double& x : dist.pos_factors) x = rng.uniform() < config.bernoulli_rate ? 1.0 : 0.0;
    for (double& x : dist.tok_factors) x = rng.uniform() < config.bernoulli_rate ? 1.0 : 0.0;
    return dist;
}

double energy(const ManyBodyDistribution& dist, std::span<const std::uint32_t> seq) {
    validate_sequence(seq, dist.config.length, dist.config.vocab, 0);
    CondScratch ws;
    ws.init(dist.config);
    build_context(dist, seq, ws);
    return energy_from_context(dist, ws.b);
}

std::vector<double> conditional_logits(const ManyBodyDistribution& dist,
                                       std::span<const std::uint32_t> seq, std::uint32_t i) {
    validate_sequence(seq, dist.config.length, dist.config.vocab, 1);
    if (i >= seq.size() || seq[i] != kMaskId || masked_position(seq) != i)
        throw std::invalid_argument("conditional query must be masked exactly at position i");
    CondScratch ws;
    ws.init(dist.config);
    build_context(dist, seq, ws);
    site_logits(dist, i, ws);
    return ws.logits;
}

std::vector<double> exact_conditional(const ManyBodyDistribution& dist,
                                      std::span<const std::uint32_t> seq, std::uint32_t i) {
    auto logits = conditional_logits(dist, seq, i);
    softmax(logits, logits);
    return logits;
}

double JointTable::z() const { return std::exp(log_z); }

std::size_t JointTable::state_index(std::span<const std::uint32_t> seq) const {
    std::size_t idx = 0, stride = 1;
    for (std::uint32_t k = 0; k < length; ++k) {
        idx += std::size_t(seq[k] - 1) * stride;
        stride *= vocab;
    }
    return idx;
}

void JointTable::state_tokens(std::size_t index, std::span<std::uint32_t> out) const {
    for (std::uint32_t k = 0; k < length; ++k) {
        out[k] = static_cast<std::uint32_t>(index % vocab) + 1;
        index /= vocab;
    }
}

JointTable enumerate_joint(const ManyBodyDistribution& dist, std::size_t state_cap) {
    const auto& cfg = dist.config;
    double states_f = 1.0;
    for (std::uint32_t k = 0; k < cfg.length; ++k) states_f *= double(cfg.vocab);
    if (states_f > double(state_cap))
        throw std::invalid_argument("enumerate_joint: V^L = " + std::to_string(states_f) +
                                    " exceeds cap " + std::to_string(state_cap));
    const std::size_t n_states = static_cast<std::size_t>(states_f);

    JointTable table;
    table.length = cfg.length;
    table.vocab = cfg.vocab;
    table.prob.resize(n_states);

    // Odometer walk with incremental context updates: advancing the state
    // index changes one low digit most steps, so each energy costs O(rank^2).
    CondScratch ws;
    ws.init(cfg);
    std::vector<std::uint32_t> tokens(cfg.length, 1);
    build_context(dist, tokens, ws);
    std::vector<double>& neg_e = table.prob;
    for (std::size_t idx = 0;; ++idx) {
        neg_e[idx] = -energy_from_context(dist, ws.b);
        if (idx + 1 == n_states) break;
        std::uint32_t k = 0;
        while (true) {
            add_site(dist, ws.b, k, tokens[k], -1.0, ws.ucol);
            if (tokens[k] < cfg.vocab) {
                ++tokens[k];
                add_site(dist, ws.b, k, tokens[k], 1.0, ws.ucol);
                break;
            }
            tokens[k] = 1;
            add_site(dist, ws.b, k, tokens[k], 1.0, ws.ucol);
            ++k;
        }
    }

    table.log_z = logsumexp(neg_e);
    for (double& x : table.prob) x = std::exp(x - table.log_z);
    return table;
}

TokenDataset gibbs_sample(const ManyBodyDistribution& dist, std::uint64_t m,
                          std::uint32_t burnin, std::uint32_t thinning, std::uint64_t seed,
                          std::uint32_t chains) {
    dist.config.validate();
    if (m == 0) throw std::invalid_argument("gibbs_sample: M must be >= 1");
    if (thinning == 0) thinning = 1;
    if (chains == 0) chains = 1;
    if (chains > m) chains = static_cast<std::uint32_t>(m);

    const auto& cfg = dist.config;
    TokenDataset ds;
    ds.length = cfg.length;
    ds.vocab = cfg.vocab;
    ds.provenance = Provenance::gibbs;
    ds.tokens.resize(m * cfg.length);

    // Row quota and offset per chain (remainder rows go to the first chains).
    std::vector<std::uint64_t> quota(chains, m / chains), offset(chains + 1, 0);
    for (std::uint32_t c = 0; c < m % chains; ++c) ++quota[c];
    for (std::uint32_t c = 0; c < chains; ++c) offset[c + 1] = offset[c] + quota[c];

    parallel_chunks(chains, 1, [&](std::size_t, std::size_t cb, std::size_t) {
        const auto c = static_cast<std::uint32_t>(cb);
        Rng rng(derive_seed(seed, "gibbs.chain", c));
        CondScratch ws;
        ws.init(cfg);
        std::vector<std::uint32_t> tokens(cfg.length);
        for (auto& t : tokens) t = rng.uniform_int(cfg.vocab) + 1;
        build_context(dist, tokens, ws);

        std::uint64_t kept = 0, sweep = 0;
        while (kept < quota[c]) {
            for (std::uint32_t i = 0; i < cfg.length; ++i) {
                add_site(dist, ws.b, i, tokens[i], -1.0, ws.ucol);
                site_logits(dist, i, ws);
                softmax(ws.logits, ws.logits);
                tokens[i] = static_cast<std::uint32_t>(rng.categorical(ws.logits)) + 1;
                add_site(dist, ws.b, i, tokens[i], 1.0, ws.ucol);
            }
            ++sweep;
            // Rebuild the context periodically so incremental float error
            // cannot accumulate over long runs with non-integer factors.
            if (sweep % 1024 == 0) build_context(dist, tokens, ws);
            if (sweep > burnin && (sweep - burnin) % thinning == 0) {
                std::copy(tokens.begin(), tokens.end(),
                          ds.tokens.begin() + (offset[c] + kept) * cfg.length);
                ++kept;
            }
        }
    });
    return ds;
}

void save_distribution(const std::filesystem::path& path, const ManyBodyDistribution& dist) {
    ByteWriter w;
    w.magic("MBDJ");
    w.u32(1);
    w.u32(dist.config.order);
    w.u32(dist.config.rank);
    w.f64(dist.config.bernoulli_rate);
    w.u32(dist.config.length);
    w.u32(dist.config.vocab);
    w.u64(dist.config.seed);
    w.f64(dist.config.scale);
    for (double x : dist.pos_factors) w.f64(x);
    for (double x : dist.tok_factors) w.f64(x);
    write_file_bytes(path, w.buffer());
}

ManyBodyDistribution load_distribution(const std::filesystem::path& path) {
    ByteReader r(read_file_bytes(path));
    r.expect_magic("MBDJ", path.string());
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path.string() + ": unsupported distribution version " +
                                 std::to_string(version));
    ManyBodyDistribution dist;
    dist.config.order = r.u32();
    dist.config.rank = r.u32();
    dist.config.bernoulli_rate = r.f64();
    dist.config.length = r.u32();
    dist.config.vocab = r.u32();
    dist.config.seed = r.u64();
    dist.config.scale = r.f64();
    dist.config.validate();
    dist.pos_factors.resize(std::size_t(dist.config.rank) * dist.config.length);
    dist.tok_factors.resize(std::size_t(dist.config.rank) * dist.config.vocab);
    r.f64_array(dist.pos_factors.data(), dist.pos_factors.size());
    r.f64_array(dist.tok_factors.data(), dist.tok_factors.size());
    return dist;
}

}  // namespace mbfa::manybody
