#include "mbfa/factored.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"

namespace mbfa::model {

namespace {

constexpr double kLnEps = 1e-5;

// G = X * Veff^T for one layer: G_{ja} = sum_b V_{ab} X_{jb}. The low-rank
// path stores the intermediate R = X * Q^T for the backward pass.
void apply_value(const FactoredLayer& layer, const StackConfig& cfg, const double* x,
                 std::vector<double>& r_buf, double* g) {
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    if (!layer.low_rank()) {
        for (std::size_t j = 0; j < length; ++j) {
            const double* xrow = x + j * vocab;
            double* grow = g + j * vocab;
            for (std::size_t a = 0; a < vocab; ++a) {
                const double* vrow = layer.value.data() + a * vocab;
                double acc = 0.0;
                for (std::size_t b = 0; b < vocab; ++b) acc += vrow[b] * xrow[b];
                grow[a] = acc;
            }
        }
        return;
    }
    const std::size_t rank = cfg.value_rank;
    for (std::size_t j = 0; j < length; ++j) {
        const double* xrow = x + j * vocab;
        double* rrow = r_buf.data() + j * rank;
        for (std::size_t t = 0; t < rank; ++t) {
            const double* qrow = layer.value_q.data() + t * vocab;
            double acc = 0.0;
            for (std::size_t b = 0; b < vocab; ++b) acc += qrow[b] * xrow[b];
            rrow[t] = acc;
        }
        double* grow = g + j * vocab;
        for (std::size_t a = 0; a < vocab; ++a) {
            const double* prow = layer.value_p.data() + a * rank;
            double acc = 0.0;
            for (std::size_t t = 0; t < rank; ++t) acc += prow[t] * rrow[t];
            grow[a] = acc;
        }
    }
}

// One-hot shortcut for the first layer: G rows are value-matrix columns
// picked by the tokens (zero for the masked row).
void apply_value_onehot(const FactoredLayer& layer, const StackConfig& cfg,
                        std::span<const std::uint32_t> row, std::uint32_t pos,
                        std::vector<double>& r_buf, double* g) {
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    const std::size_t rank = cfg.value_rank;
    for (std::size_t j = 0; j < length; ++j) {
        double* grow = g + j * vocab;
        if (j == pos) {
            std::fill(grow, grow + vocab, 0.0);
            if (layer.low_rank())
                std::fill(r_buf.begin() + j * rank, r_buf.begin() + (j + 1) * rank, 0.0);
            continue;
        }
        const std::size_t b = row[j] - 1;
        if (!layer.low_rank()) {
            for (std::size_t a = 0; a < vocab; ++a) grow[a] = layer.value[a * vocab + b];
        } else {
            double* rrow = r_buf.data() + j * rank;
            for (std::size_t t = 0; t < rank; ++t) rrow[t] = layer.value_q[t * vocab + b];
            for (std::size_t a = 0; a < vocab; ++a) {
                const double* prow = layer.value_p.data() + a * rank;
                double acc = 0.0;
                for (std::size_t t = 0; t < rank; ++t) acc += prow[t] * rrow[t];
                grow[a] = acc;
            }
        }
    }
}

void attention_mix(const double* attention, const StackConfig& cfg, const double* g, double* h) {
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    for (std::size_t i = 0; i < length; ++i) {
        double* hrow = h + i * vocab;
        std::fill(hrow, hrow + vocab, 0.0);
        const double* arow = attention + i * length;
        for (std::size_t j = 0; j < length; ++j) {
            const double aij = arow[j];
            if (aij == 0.0) continue;
            const double* grow = g + j * vocab;
            for (std::size_t a = 0; a < vocab; ++a) hrow[a] += aij * grow[a];
        }
    }
}

struct ForwardPlan {
    std::span<const std::uint32_t> row;  // empty if the input is a dense matrix
    std::uint32_t pos = 0;
};

void forward_impl(const FactoredStack& stack, const double* x_in, const ForwardPlan& plan,
                  Workspace& ws, double* logits_out) {
    const auto& cfg = stack.config;
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    const std::size_t n = cfg.layers;

    const double* x = x_in;
    for (std::size_t l = 0; l + 1 < n; ++l) {
        const auto& layer = stack.layers[l];
        if (l == 0 && !plan.row.empty())
            apply_value_onehot(layer, cfg, plan.row, plan.pos, ws.r[l], ws.g[l].data());
        else
            apply_value(layer, cfg, x, ws.r[l], ws.g[l].data());
        attention_mix(layer.attention.data(), cfg, ws.g[l].data(), ws.h[l].data());

        double* xn = ws.x[l + 1].data();
        const double* h = ws.h[l].data();
        if (!cfg.layer_norm) {
            for (std::size_t k = 0; k < length * vocab; ++k)
                xn[k] = (cfg.skip_connections ? x[k] : 0.0) + h[k] * h[k];
        } else {
            // Normalise the squared activations per position before the skip.
            double* hat = ws.ln_hat[l].data();
            for (std::size_t j = 0; j < length; ++j) {
                const double* hrow = h + j * vocab;
                double mean = 0.0, mean_sq = 0.0;
                for (std::size_t a = 0; a < vocab; ++a) {
                    const double z = hrow[a] * hrow[a];
                    mean += z;
                    mean_sq += z * z;
                }
                mean /= double(vocab);
                const double var = mean_sq / double(vocab) - mean * mean;
                const double rstd = 1.0 / std::sqrt(var + kLnEps);
                ws.ln_mean[l][j] = mean;
                ws.ln_rstd[l][j] = rstd;
                double* hatrow = hat + j * vocab;
                double* xrow = xn + j * vocab;
                const double* xprev = x + j * vocab;
                for (std::size_t a = 0; a < vocab; ++a) {
                    const double z = hrow[a] * hrow[a];
                    hatrow[a] = (z - mean) * rstd;
                    xrow[a] = (cfg.skip_connections ? xprev[a] : 0.0) + hatrow[a];
                }
            }
        }
        x = xn;
    }

    // Final layer: logits are the masked row of A * G.
    const auto& last = stack.layers[n - 1];
    if (n == 1 && !plan.row.empty())
        apply_value_onehot(last, cfg, plan.row, plan.pos, ws.r[n - 1], ws.g[n - 1].data());
    else
        apply_value(last, cfg, x, ws.r[n - 1], ws.g[n - 1].data());
    const double* arow = last.attention.data() + std::size_t(plan.pos) * length;
    const double* g = ws.g[n - 1].data();
    std::fill(logits_out, logits_out + vocab, 0.0);
    for (std::size_t j = 0; j < length; ++j) {
        const double aij = arow[j];
        if (aij == 0.0) continue;
        const double* grow = g + j * vocab;
        for (std::size_t a = 0; a < vocab; ++a) logits_out[a] += aij * grow[a];
    }
}

// dG -> (dValue params, dX). When `dx_accumulate` is false the value path
// overwrites dx instead of adding to it.
void value_backward(const FactoredLayer& layer, const StackConfig& cfg, const double* x,
                    const std::vector<double>& r_buf, const double* dg, LayerGrads& grads,
                    std::vector<double>& dr, double* dx, bool dx_accumulate) {
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    if (!dx_accumulate) std::fill(dx, dx + length * vocab, 0.0);
    if (!layer.low_rank()) {
        for (std::size_t j = 0; j < length; ++j) {
            const double* dgrow = dg + j * vocab;
            const double* xrow = x + j * vocab;
            double* dxrow = dx + j * vocab;
            for (std::size_t a = 0; a < vocab; ++a) {
                const double d = dgrow[a];
                if (d == 0.0) continue;
                double* dvrow = grads.value.data() + a * vocab;
                const double* vrow = layer.value.data() + a * vocab;
                for (std::size_t b = 0; b < vocab; ++b) {
                    dvrow[b] += d * xrow[b];
                    dxrow[b] += d * vrow[b];
                }
            }
        }
        return;
    }
    const std::size_t rank = cfg.value_rank;
    for (std::size_t j = 0; j < length; ++j) {
        const double* dgrow = dg + j * vocab;
        const double* rrow = r_buf.data() + j * rank;
        double* drrow = dr.data() + j * rank;
        std::fill(drrow, drrow + rank, 0.0);
        for (std::size_t a = 0; a < vocab; ++a) {
            const double d = dgrow[a];
            if (d == 0.0) continue;
            double* dprow = grads.value_p.data() + a * rank;
            const double* prow = layer.value_p.data() + a * rank;
            for (std::size_t t = 0; t < rank; ++t) {
                dprow[t] += d * rrow[t];
                drrow[t] += d * prow[t];
            }
        }
        const double* xrow = x + j * vocab;
        double* dxrow = dx + j * vocab;
        for (std::size_t t = 0; t < rank; ++t) {
            const double d = drrow[t];
            if (d == 0.0) continue;
            double* dqrow = grads.value_q.data() + t * vocab;
            const double* qrow = layer.value_q.data() + t * vocab;
            for (std::size_t b = 0; b < vocab; ++b) {
                dqrow[b] += d * xrow[b];
                dxrow[b] += d * qrow[b];
            }
        }
    }
}

void backward_impl(const FactoredStack& stack, const ForwardPlan& plan,
                   std::span<const double> dlogits, Workspace& ws, Gradients& grads) {
    const auto& cfg = stack.config;
    const std::size_t length = cfg.length, vocab = cfg.vocab;
    const std::size_t n = cfg.layers;
    const auto& last = stack.layers[n - 1];
    auto& glast = grads.layers[n - 1];

    const double* xlast = ws.x[n - 1].data();
    const double* gfin = ws.g[n - 1].data();
    const double* arow = last.attention.data() + std::size_t(plan.pos) * length;
    double* darow = glast.attention.data() + std::size_t(plan.pos) * length;

    // dA row of the final layer and the rank-one dG = arow (x) dlogits.
    for (std::size_t j = 0; j < length; ++j) {
        const double* grow = gfin + j * vocab;
        double acc = 0.0;
        for (std::size_t a = 0; a < vocab; ++a) acc += dlogits[a] * grow[a];
        darow[j] += acc;
    }
    double* dg = ws.dg.data();
    for (std::size_t j = 0; j < length; ++j) {
        const double aij = arow[j];
        double* dgrow = dg + j * vocab;
        for (std::size_t a = 0; a < vocab; ++a) dgrow[a] = aij * dlogits[a];
    }
    value_backward(last, cfg, xlast, ws.r[n - 1], dg, glast, ws.dr, ws.dx.data(),
                   /*dx_accumulate=*/false);

    for (std::size_t li = n - 1; li-- > 0;) {
        const auto& layer = stack.layers[li];
        auto& lg = grads.layers[li];
        const double* x = ws.x[li].data();
        const double* h = ws.h[li].data();
        double* dx = ws.dx.data();
        double* dz = ws.dz.data();

        if (!cfg.layer_norm) {
            std::memcpy(dz, dx, length * vocab * sizeof(double));
        } else {
            const double* hat = ws.ln_hat[li].data();
            for (std::size_t j = 0; j < length; ++j) {
                const double* dxrow = dx + j * vocab;
                const double* hatrow = hat + j * vocab;
                double mean_d = 0.0, mean_dh = 0.0;
                for (std::size_t a = 0; a < vocab; ++a) {
                    mean_d += dxrow[a];
                    mean_dh += dxrow[a] * hatrow[a];
                }
                mean_d /= double(vocab);
                mean_dh /= double(vocab);
                const double rstd = ws.ln_rstd[li][j];
                double* dzrow = dz + j * vocab;
                for (std::size_t a = 0; a < vocab; ++a)
                    dzrow[a] = rstd * (dxrow[a] - mean_d - hatrow[a] * mean_dh);
            }
        }
        // through the square activation
        double* dh = ws.dh.data();
        for (std::size_t k = 0; k < length * vocab; ++k) dh[k] = 2.0 * h[k] * dz[k];

        // dA += dH G^T ; dG = A^T dH
        const double* g = ws.g[li].data();
        for (std::size_t i = 0; i < length; ++i) {
            const double* dhrow = dh + i * vocab;
            double* darow_l = lg.attention.data() + i * length;
            for (std::size_t j = 0; j < length; ++j) {
                const double* grow = g + j * vocab;
                double acc = 0.0;
                for (std::size_t a = 0; a < vocab; ++a) acc += dhrow[a] * grow[a];
                darow_l[j] += acc;
            }
        }
        std::fill(dg, dg + length * vocab, 0.0);
        const double* att = layer.attention.data();
        for (std::size_t i = 0; i < length; ++i) {
            const double* dhrow = dh + i * vocab;
            const double* arow_l = att + i * length;
            for (std::size_t j = 0; j < length; ++j) {
                const double aij = arow_l[j];
                if (aij == 0.0) continue;
                double* dgrow = dg + j * vocab;
                for (std::size_t a = 0; a < vocab; ++a) dgrow[a] += aij * dhrow[a];
            }
        }
        // dX_prev = (skip ? dX_next : 0) + value path
        value_backward(layer, cfg, x, ws.r[li], dg, lg, ws.dr, dx,
                       /*dx_accumulate=*/cfg.skip_connections);
    }
}

void fill_onehot(const StackConfig& cfg, std::span<const std::uint32_t> row, std::uint32_t pos,
                 double* x) {
    std::fill(x, x + std::size_t(cfg.length) * cfg.vocab, 0.0);
    for (std::uint32_t j = 0; j < cfg.length; ++j) {
        if (j == pos || row[j] == kMaskId) continue;
        x[std::size_t(j) * cfg.vocab + (row[j] - 1)] = 1.0;
    }
}

}  // namespace

void StackConfig::validate() const {
    if (layers == 0) throw std::invalid_argument("stack needs at least one layer");
    if (length == 0 || vocab == 0) throw std::invalid_argument("L and V must be positive");
    if (value_rank > vocab)
        throw std::invalid_argument("value rank above V has no effect; use dense instead");
}

std::uint64_t max_order(std::uint32_t n_layers) {
    if (n_layers < 1) throw std::invalid_argument("max_order: need n >= 1");
    if (n_layers > 63) throw std::invalid_argument("max_order: n too large");
    return (std::uint64_t(1) << (n_layers - 1)) + 1;
}

std::uint64_t FactoredStack::max_interaction_order() const { return max_order(config.layers); }

std::uint64_t FactoredStack::parameter_count() const {
    std::uint64_t n = 0;
    for (const auto& l : layers) {
        n += l.attention.size() + l.value.size() + l.value_p.size() + l.value_q.size();
    }
    return n;
}

FactoredStack make_stack(const StackConfig& config) {
    config.validate();
    FactoredStack stack;
    stack.config = config;
    stack.layers.resize(config.layers);
    for (auto& layer : stack.layers) {
        layer.attention.assign(std::size_t(config.length) * config.length, 0.0);
        if (config.value_rank == 0) {
            layer.value.assign(std::size_t(config.vocab) * config.vocab, 0.0);
        } else {
            layer.value_p.assign(std::size_t(config.vocab) * config.value_rank, 0.0);
            layer.value_q.assign(std::size_t(config.value_rank) * config.vocab, 0.0);
        }
    }
    return stack;
}

void init_gaussian(FactoredStack& stack, std::uint64_t seed, double scale) {
    const auto& cfg = stack.config;
    const double attn_std = scale / std::sqrt(double(cfg.length));
    for (std::uint32_t l = 0; l < cfg.layers; ++l) {
        Rng rng(derive_seed(seed, "stack.layer", l));
        auto& layer = stack.layers[l];
        for (double& w : layer.attention) w = attn_std * rng.normal();
        if (!layer.low_rank()) {
            const double vstd = scale / std::sqrt(double(cfg.vocab));
            for (double& w : layer.value) w = vstd * rng.normal();
        } else {
            // product P*Q entry variance = rank * std^4 = scale^2 / V
            const double fstd = std::sqrt(scale / std::sqrt(double(cfg.value_rank) * cfg.vocab));
            for (double& w : layer.value_p) w = fstd * rng.normal();
            for (double& w : layer.value_q) w = fstd * rng.normal();
        }
    }
}

void Workspace::init(const StackConfig& config) {
    const std::size_t lv = std::size_t(config.length) * config.vocab;
    const std::size_t lr = std::size_t(config.length) * std::max<std::uint32_t>(config.value_rank, 1);
    const std::size_t n = config.layers;
    x.assign(n, std::vector<double>(lv, 0.0));
    g.assign(n, std::vector<double>(lv, 0.0));
    h.assign(n, std::vector<double>(lv, 0.0));
    r.assign(n, std::vector<double>(config.value_rank ? lr : 0, 0.0));
    ln_mean.assign(n, std::vector<double>(config.layer_norm ? config.length : 0, 0.0));
    ln_rstd.assign(n, std::vector<double>(config.layer_norm ? config.length : 0, 0.0));
    ln_hat.assign(n, std::vector<double>(config.layer_norm ? lv : 0, 0.0));
    logits.assign(config.vocab, 0.0);
    dx.assign(lv, 0.0);
    dg.assign(lv, 0.0);
    dh.assign(lv, 0.0);
    dz.assign(lv, 0.0);
    dr.assign(config.value_rank ? lr : 0, 0.0);
}

void forward_embedded(const FactoredStack& stack, const double* x_in, std::uint32_t pos,
                      Workspace& ws, double* logits_out) {
    if (pos >= stack.config.length) throw std::invalid_argument("masked position out of range");
    if (x_in != ws.x[0].data())
        std::memcpy(ws.x[0].data(), x_in, ws.x[0].size() * sizeof(double));
    ForwardPlan plan;
    plan.pos = pos;
    forward_impl(stack, ws.x[0].data(), plan, ws, logits_out);
}

std::vector<double> forward_masked(const FactoredStack& stack,
                                   std::span<const std::uint32_t> seq, std::uint32_t pos,
                                   Workspace& ws) {
    const auto& cfg = stack.config;
    validate_sequence(seq, cfg.length, cfg.vocab, 1);
    if (pos >= seq.size() || seq[pos] != kMaskId || masked_position(seq) != pos)
        throw std::invalid_argument("forward_masked: sequence must be masked exactly at pos");
    fill_onehot(cfg, seq, pos, ws.x[0].data());
    ForwardPlan plan{seq, pos};
    std::vector<double> logits(cfg.vocab);
    forward_impl(stack, ws.x[0].data(), plan, ws, logits.data());
    return logits;
}

std::span<const double> forward_masked_at(const FactoredStack& stack,
                                          std::span<const std::uint32_t> row, std::uint32_t pos,
                                          Workspace& ws) {
    const auto& cfg = stack.config;
    fill_onehot(cfg, row, pos, ws.x[0].data());
    ForwardPlan plan{row, pos};
    forward_impl(stack, ws.x[0].data(), plan, ws, ws.logits.data());
    return {ws.logits.data(), cfg.vocab};
}

void Gradients::init_like(const FactoredStack& stack) {
    layers.resize(stack.layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].attention.assign(stack.layers[l].attention.size(), 0.0);
        layers[l].value.assign(stack.layers[l].value.size(), 0.0);
        layers[l].value_p.assign(stack.layers[l].value_p.size(), 0.0);
        layers[l].value_q.assign(stack.layers[l].value_q.size(), 0.0);
    }
}

void Gradients::zero() {
    for (auto& lg : layers) {
        std::fill(lg.attention.begin(), lg.attention.end(), 0.0);
        std::fill(lg.value.begin(), lg.value.end(), 0.0);
        std::fill(lg.value_p.begin(), lg.value_p.end(), 0.0);
        std::fill(lg.value_q.begin(), lg.value_q.end(), 0.0);
    }
}

void Gradients::add(const Gradients& other) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto acc = [](std::vector<double>& dst, const std::vector<double>& src) {
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        };
        acc(layers[l].attention, other.layers[l].attention);
        acc(layers[l].value, other.layers[l].value);
        acc(layers[l].value_p, other.layers[l].value_p);
        acc(layers[l].value_q, other.layers[l].value_q);
    }
}

double backward_batch(const FactoredStack& stack, std::span<const MaskedSample> batch,
                      Gradients& grads, Workspace& ws, std::uint64_t* correct) {
    if (batch.empty()) throw std::invalid_argument("backward_batch: empty batch");
    const auto& cfg = stack.config;
    double loss_sum = 0.0;
    std::vector<double> dlogits(cfg.vocab);
    for (const auto& sample : batch) {
        std::span<const std::uint32_t> row{sample.row, cfg.length};
        auto logits = forward_masked_at(stack, row, sample.pos, ws);
        const std::size_t target = row[sample.pos] - 1;
        loss_sum += cross_entropy(logits, target);
        if (correct && argmax(logits) == target) ++*correct;
        softmax(logits, dlogits);
        dlogits[target] -= 1.0;
        backward_impl(stack, ForwardPlan{row, sample.pos}, dlogits, ws, grads);
    }
    return loss_sum;
}

ThreeBodyTensors effective_three_body(const FactoredStack& stack) {
    const auto& cfg = stack.config;
    if (cfg.layers != 2)
        throw std::invalid_argument("effective_three_body requires exactly two layers");
    const std::size_t length = cfg.length, vocab = cfg.vocab;

    ThreeBodyTensors out;
    out.length = cfg.length;
    out.vocab = cfg.vocab;
    out.j.assign(length * length * length, 0.0);
    out.u.assign(vocab * vocab * vocab, 0.0);

    const auto& a1 = stack.layers[0].attention;
    const auto& a2 = stack.layers[1].attention;
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j < length; ++j) {
            const double a2ij = a2[i * length + j];
            if (a2ij == 0.0) continue;
            for (std::size_t k = 0; k < length; ++k)
                for (std::size_t l = 0; l < length; ++l)
                    out.j[(i * length + k) * length + l] +=
                        a2ij * a1[j * length + k] * a1[j * length + l];
        }

    auto dense_value = [&](const FactoredLayer& layer) {
        if (!layer.low_rank()) return layer.value;
        std::vector<double> v(vocab * vocab, 0.0);
        const std::size_t rank = cfg.value_rank;
        for (std::size_t a = 0; a < vocab; ++a)
            for (std::size_t t = 0; t < rank; ++t) {
                const double p = layer.value_p[a * rank + t];
                if (p == 0.0) continue;
                for (std::size_t b = 0; b < vocab; ++b)
                    v[a * vocab + b] += p * layer.value_q[t * vocab + b];
            }
        return v;
    };
    const auto v1 = dense_value(stack.layers[0]);
    const auto v2 = dense_value(stack.layers[1]);
    for (std::size_t a = 0; a < vocab; ++a)
        for (std::size_t b = 0; b < vocab; ++b) {
            const double v2ab = v2[a * vocab + b];
            if (v2ab == 0.0) continue;
            for (std::size_t g = 0; g < vocab; ++g)
                for (std::size_t m = 0; m < vocab; ++m)
                    out.u[(a * vocab + g) * vocab + m] +=
                        v2ab * v1[b * vocab + g] * v1[b * vocab + m];
        }
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const FactoredStack& stack) {
    const auto& cfg = stack.config;
    ByteWriter w;
    w.magic("FACT");
    w.u32(1);
    w.u32(cfg.layers);
    w.u32(cfg.length);
    w.u32(cfg.vocab);
    w.u32(cfg.value_rank);
    std::uint32_t flags = 0;
    if (cfg.skip_connections) flags |= 1u;
    if (cfg.layer_norm) flags |= 2u;
    w.u32(flags);
    for (const auto& layer : stack.layers) {
        for (double v : layer.attention) w.f64(v);
        if (!layer.low_rank()) {
            for (double v : layer.value) w.f64(v);
        } else {
            for (double v : layer.value_p) w.f64(v);
            for (double v : layer.value_q) w.f64(v);
        }
    }
    write_file_bytes(path, w.buffer());
}

FactoredStack load_checkpoint(const std::filesystem::path& path) {
    ByteReader r(read_file_bytes(path));
    r.expect_magic("FACT", path.string());
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(version));
    StackConfig cfg;
    cfg.layers = r.u32();
    cfg.length = r.u32();
    cfg.vocab = r.u32();
    cfg.value_rank = r.u32();
    const std::uint32_t flags = r.u32();
    cfg.skip_connections = (flags & 1u) != 0;
    cfg.layer_norm = (flags & 2u) != 0;
    FactoredStack stack = make_stack(cfg);
    for (auto& layer : stack.layers) {
        r.f64_array(layer.attention.data(), layer.attention.size());
        if (!layer.low_rank()) {
            r.f64_array(layer.value.data(), layer.value.size());
        } else {
            r.f64_array(layer.value_p.data(), layer.value_p.size());
            r.f64_array(layer.value_q.data(), layer.value_q.size());
        }
    }
    return stack;
}

}  // namespace mbfa::model
