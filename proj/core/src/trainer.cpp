#include "mbfa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>

#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/threads.hpp"

namespace mbfa::training {

namespace {

constexpr std::size_t kGradChunk = 32;  // samples per gradient chunk
constexpr std::size_t kEvalChunk = 8;   // rows per evaluation chunk

struct Sample {
    const std::uint32_t* row;
    std::uint32_t pos;
};

// Reusable scratch handed out to worker chunks; contents never affect
// results, so pool order does not matter.
template <class T>
class Pool {
  public:
    template <class InitFn>
    T* acquire(const InitFn& make) {
        {
            std::lock_guard lock(mutex_);
            if (!free_.empty()) {
                T* p = free_.back();
                free_.pop_back();
                return p;
            }
        }
        auto owned = std::make_unique<T>();
        make(*owned);
        T* p = owned.get();
        std::lock_guard lock(mutex_);
        all_.push_back(std::move(owned));
        return p;
    }
    void release(T* p) {
        std::lock_guard lock(mutex_);
        free_.push_back(p);
    }

  private:
    std::mutex mutex_;
    std::vector<std::unique_ptr<T>> all_;
    std::vector<T*> free_;
};

struct FactoredAdapter {
    using Model = model::FactoredStack;
    using Grads = model::Gradients;
    using Ws = model::Workspace;

    static void init_ws(Ws& ws, const Model& m) { ws.init(m.config); }
    static void init_grads(Grads& g, const Model& m) { g.init_like(m); }

    static double backward(const Model& m, std::span<const Sample> batch, Grads& g, Ws& ws,
                           std::uint64_t* correct) {
        std::vector<model::MaskedSample> items(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) items[i] = {batch[i].row, batch[i].pos};
        return model::backward_batch(m, items, g, ws, correct);
    }

    static std::span<const double> logits(const Model& m, std::span<const std::uint32_t> row,
                                          std::uint32_t pos, Ws& ws) {
        return model::forward_masked_at(m, row, pos, ws);
    }

    static void sgd_step(Model& m, const Grads& g, double lr_over_batch, double lr_wd) {
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            auto upd = [&](std::vector<double>& w, const std::vector<double>& d) {
                for (std::size_t k = 0; k < w.size(); ++k)
                    w[k] -= lr_over_batch * d[k] + lr_wd * w[k];
            };
            upd(m.layers[l].attention, g.layers[l].attention);
            upd(m.layers[l].value, g.layers[l].value);
            upd(m.layers[l].value_p, g.layers[l].value_p);
            upd(m.layers[l].value_q, g.layers[l].value_q);
        }
    }

    static std::uint32_t msd_layers(const Model& m) { return m.config.layers; }
    static std::vector<double> msd_now(const Model& m, const Model& snapshot) {
        return msd_all(m, snapshot);
    }
    static std::uint32_t length(const Model& m) { return m.config.length; }
    static std::uint32_t vocab(const Model& m) { return m.config.vocab; }
};

struct KBodyAdapter {
    using Model = KBodyBaseline;
    using Grads = KBodyGrads;
    using Ws = KBodyWorkspace;

    static void init_ws(Ws& ws, const Model& m) { ws.init(m); }
    static void init_grads(Grads& g, const Model& m) { g.init_like(m); }

    static double backward(const Model& m, std::span<const Sample> batch, Grads& g, Ws& ws,
                           std::uint64_t* correct) {
        std::vector<KBodySample> items(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) items[i] = {batch[i].row, batch[i].pos};
        return kbody_backward_batch(m, items, g, ws, correct);
    }

    static std::span<const double> logits(const Model& m, std::span<const std::uint32_t> row,
                                          std::uint32_t pos, Ws& ws) {
        return kbody_logits(m, row, pos, ws);
    }

    static void sgd_step(Model& m, const Grads& g, double lr_over_batch, double lr_wd) {
        for (std::size_t k = 0; k < m.j.size(); ++k)
            m.j[k] -= lr_over_batch * g.j[k] + lr_wd * m.j[k];
        for (std::size_t k = 0; k < m.u.size(); ++k)
            m.u[k] -= lr_over_batch * g.u[k] + lr_wd * m.u[k];
    }

    static std::uint32_t msd_layers(const Model&) { return 0; }
    static std::vector<double> msd_now(const Model&, const Model&) { return {}; }
    static std::uint32_t length(const Model& m) { return m.length; }
    static std::uint32_t vocab(const Model& m) { return m.vocab; }
};

template <class A>
EvalResult evaluate_impl(const typename A::Model& m, const TokenDataset& data) {
    if (A::length(m) != data.length || A::vocab(m) != data.vocab)
        throw std::invalid_argument("evaluate: dataset header does not match model shape");
    const std::uint64_t rows = data.rows();
    if (rows == 0) throw std::invalid_argument("evaluate: empty dataset");
    const std::size_t nchunks = chunk_count(rows, kEvalChunk);
    std::vector<double> chunk_loss(nchunks, 0.0);
    std::vector<std::uint64_t> chunk_correct(nchunks, 0);
    Pool<typename A::Ws> ws_pool;

    parallel_chunks(rows, kEvalChunk, [&](std::size_t c, std::size_t begin, std::size_t end) {
        auto* ws = ws_pool.acquire([&](typename A::Ws& w) { A::init_ws(w, m); });
        double loss = 0.0;
        std::uint64_t correct = 0;
        for (std::size_t r = begin; r < end; ++r) {
            auto row = data.row(r);
            for (std::uint32_t pos = 0; pos < data.length; ++pos) {
                auto logits = A::logits(m, row, pos, *ws);
                const std::size_t target = row[pos] - 1;
                loss += cross_entropy(logits, target);
                if (argmax(logits) == target) ++correct;
            }
        }
        chunk_loss[c] = loss;
        chunk_correct[c] = correct;
        ws_pool.release(ws);
    });

    double loss = 0.0;
    std::uint64_t correct = 0;
    for (std::size_t c = 0; c < nchunks; ++c) {
        loss += chunk_loss[c];
        correct += chunk_correct[c];
    }
    const double n = double(rows) * data.length;
    return {loss / n, double(correct) / n};
}

// One pass over the sample list with minibatch SGD.
template <class A>
struct Trainer {
    typename A::Model& model;
    const TrainConfig& cfg;
    Pool<typename A::Ws> ws_pool;
    Pool<typename A::Grads> grads_pool;
    typename A::Grads master;
    std::uint64_t steps_total = 0, steps_done = 0;

    explicit Trainer(typename A::Model& m, const TrainConfig& c) : model(m), cfg(c) {
        A::init_grads(master, model);
    }

    double lr_now() const {
        if (cfg.schedule == Schedule::constant || steps_total == 0) return cfg.learning_rate;
        const double frac = double(steps_done) / double(steps_total);
        return cfg.learning_rate * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
    }

    // returns (summed loss, correct) over the batch
    std::pair<double, std::uint64_t> step(std::span<const Sample> batch) {
        const std::size_t nchunks = chunk_count(batch.size(), kGradChunk);
        std::vector<typename A::Grads*> slots(nchunks, nullptr);
        std::vector<double> losses(nchunks, 0.0);
        std::vector<std::uint64_t> corrects(nchunks, 0);

        parallel_chunks(batch.size(), kGradChunk,
                        [&](std::size_t c, std::size_t begin, std::size_t end) {
            auto* ws = ws_pool.acquire([&](typename A::Ws& w) { A::init_ws(w, model); });
            auto* g = grads_pool.acquire([&](typename A::Grads& gr) { A::init_grads(gr, model); });
            g->zero();
            losses[c] = A::backward(model, batch.subspan(begin, end - begin), *g, *ws, &corrects[c]);
            slots[c] = g;
            ws_pool.release(ws);
        });

        master.zero();
        double loss = 0.0;
        std::uint64_t correct = 0;
        for (std::size_t c = 0; c < nchunks; ++c) {
            master.add(*slots[c]);
            grads_pool.release(slots[c]);
            loss += losses[c];
            correct += corrects[c];
        }
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged: non-finite loss at step " +
                                     std::to_string(steps_done));

        const double lr = lr_now();
        A::sgd_step(model, master, lr / double(batch.size()), lr * cfg.weight_decay);
        ++steps_done;
        return {loss, correct};
    }
};

std::vector<Sample> epoch_samples(const TokenDataset& data, const TrainConfig& cfg,
                                  std::uint32_t epoch) {
    const std::uint64_t rows = data.rows();
    const std::uint32_t length = data.length;
    std::vector<Sample> samples;
    Rng rng(derive_seed(cfg.seed, "train.samples", epoch));

    if (cfg.masking == Masking::cyclic) {
        samples.resize(rows * length);
        for (std::uint64_t r = 0; r < rows; ++r)
            for (std::uint32_t p = 0; p < length; ++p)
                samples[r * length + p] = {data.row(r).data(), p};
    } else {
        auto n_masked = static_cast<std::uint32_t>(std::lround(cfg.mask_fraction * length));
        n_masked = std::clamp<std::uint32_t>(n_masked, 1, length);
        std::vector<std::uint32_t> positions(length);
        samples.reserve(rows * n_masked);
        for (std::uint64_t r = 0; r < rows; ++r) {
            for (std::uint32_t p = 0; p < length; ++p) positions[p] = p;
            for (std::uint32_t t = 0; t < n_masked; ++t) {
                const std::uint32_t pick = t + rng.uniform_int(length - t);
                std::swap(positions[t], positions[pick]);
                samples.push_back({data.row(r).data(), positions[t]});
            }
        }
    }
    // Fisher-Yates shuffle
    for (std::size_t i = samples.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_int(static_cast<std::uint32_t>(i));
        std::swap(samples[i - 1], samples[j]);
    }
    return samples;
}

template <class A>
MetricLog train_impl(typename A::Model& model, const TokenDataset& train_data,
                     const TokenDataset& test_data, const TrainConfig& cfg,
                     std::span<const EvalSet> extra_evals,
                     const std::function<bool(const MetricLog&)>& stop) {
    cfg.validate();
    if (A::length(model) != train_data.length || A::vocab(model) != train_data.vocab)
        throw std::invalid_argument("train: dataset header does not match model shape");

    const typename A::Model snapshot = model;
    MetricLog log;
    log.n_layers = A::msd_layers(model);

    auto eval_rows = [&](std::uint64_t step, std::uint32_t epoch) {
        auto msd_values = A::msd_now(model, snapshot);
        auto add = [&](const std::string& split, const TokenDataset& ds) {
            EvalResult res = evaluate_impl<A>(model, ds);
            log.rows.push_back({step, epoch, split, res.loss, res.accuracy, msd_values});
        };
        add("test", test_data);
        for (const auto& ev : extra_evals) add(ev.name, *ev.data);
    };

    eval_rows(0, 0);

    Trainer<A> trainer(model, cfg);
    const std::uint64_t per_epoch =
        cfg.masking == Masking::cyclic
            ? train_data.rows() * train_data.length
            : train_data.rows() * std::clamp<std::uint32_t>(
                  static_cast<std::uint32_t>(std::lround(cfg.mask_fraction * train_data.length)),
                  1, train_data.length);
    trainer.steps_total = cfg.epochs * chunk_count(per_epoch, cfg.batch_size);

    for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto samples = epoch_samples(train_data, cfg, epoch);
        double epoch_loss = 0.0;
        std::uint64_t epoch_correct = 0;
        for (std::size_t b = 0; b < samples.size(); b += cfg.batch_size) {
            const std::size_t n = std::min<std::size_t>(cfg.batch_size, samples.size() - b);
            auto [loss, correct] = trainer.step({samples.data() + b, n});
            epoch_loss += loss;
            epoch_correct += correct;
        }
        log.rows.push_back({trainer.steps_done, epoch, "train",
                            epoch_loss / double(samples.size()),
                            double(epoch_correct) / double(samples.size()),
                            A::msd_now(model, snapshot)});
        eval_rows(trainer.steps_done, epoch);
        if (stop && stop(log)) break;
    }
    return log;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (masking == Masking::random_fraction && !(mask_fraction > 0.0 && mask_fraction < 1.0))
        throw std::invalid_argument("mask_fraction must lie in (0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
}

void MetricLog::write_csv(const std::filesystem::path& path) const {
    std::string out = "step,epoch,split,loss,accuracy";
    for (std::uint32_t l = 1; l <= n_layers; ++l) out += ",msd_" + std::to_string(l);
    out += "\n";
    char buf[64];
    for (const auto& row : rows) {
        out += std::to_string(row.step) + "," + std::to_string(row.epoch) + "," + row.split;
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g", row.loss, row.accuracy);
        out += buf;
        for (std::uint32_t l = 0; l < n_layers; ++l) {
            std::snprintf(buf, sizeof buf, ",%.17g", l < row.msd.size() ? row.msd[l] : 0.0);
            out += buf;
        }
        out += "\n";
    }
    write_file_text(path, out);
}

std::vector<double> MetricLog::split_losses(std::string_view split) const {
    std::vector<double> out;
    for (const auto& row : rows)
        if (row.split == split) out.push_back(row.loss);
    return out;
}

double MetricLog::final_loss(std::string_view split) const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
        if (it->split == split) return it->loss;
    throw std::invalid_argument("no rows for split " + std::string(split));
}

EvalResult evaluate(const model::FactoredStack& stack, const TokenDataset& data) {
    return evaluate_impl<FactoredAdapter>(stack, data);
}

EvalResult evaluate(const KBodyBaseline& model, const TokenDataset& data) {
    return evaluate_impl<KBodyAdapter>(model, data);
}

double mlm_loss(const model::FactoredStack& stack, const TokenDataset& data) {
    return evaluate(stack, data).loss;
}

double mlm_loss(const KBodyBaseline& model, const TokenDataset& data) {
    return evaluate(model, data).loss;
}

namespace {

template <class A>
double population_loss_impl(const typename A::Model& m, const manybody::JointTable& table) {
    if (A::length(m) != table.length || A::vocab(m) != table.vocab)
        throw std::invalid_argument("population_loss: table does not match model shape");
    typename A::Ws ws;
    A::init_ws(ws, m);
    std::vector<std::uint32_t> tokens(table.length);
    double total = 0.0;
    for (std::size_t idx = 0; idx < table.prob.size(); ++idx) {
        const double pi = table.prob[idx];
        if (pi == 0.0) continue;
        table.state_tokens(idx, tokens);
        double per_state = 0.0;
        for (std::uint32_t pos = 0; pos < table.length; ++pos) {
            auto logits = A::logits(m, tokens, pos, ws);
            per_state += cross_entropy(logits, tokens[pos] - 1);
        }
        total += pi * per_state / double(table.length);
    }
    return total;
}

}  // namespace

double population_loss(const model::FactoredStack& stack, const manybody::JointTable& table) {
    return population_loss_impl<FactoredAdapter>(stack, table);
}

double population_loss(const KBodyBaseline& model, const manybody::JointTable& table) {
    return population_loss_impl<KBodyAdapter>(model, table);
}

double conditional_entropy(const manybody::JointTable& table) {
    const std::size_t n = table.prob.size();
    std::vector<double> denom(n, 0.0);
    double h = 0.0;
    std::size_t stride = 1;
    for (std::uint32_t i = 0; i < table.length; ++i) {
        // representative index: state with the token at site i set to 1
        for (std::size_t idx = 0; idx < n; ++idx) {
            const std::size_t digit = (idx / stride) % table.vocab;
            denom[idx - digit * stride] += table.prob[idx];
        }
        for (std::size_t idx = 0; idx < n; ++idx) {
            const double p = table.prob[idx];
            if (p == 0.0) continue;
            const std::size_t digit = (idx / stride) % table.vocab;
            const double cond = p / denom[idx - digit * stride];
            h -= p * std::log(cond);
        }
        if (i + 1 < table.length) {
            std::fill(denom.begin(), denom.end(), 0.0);
            stride *= table.vocab;
        }
    }
    return h / double(table.length);
}

MetricLog train(model::FactoredStack& stack, const TokenDataset& train_data,
                const TokenDataset& test_data, const TrainConfig& config,
                std::span<const EvalSet> extra_evals) {
    return train_impl<FactoredAdapter>(stack, train_data, test_data, config, extra_evals, nullptr);
}

MetricLog train(KBodyBaseline& model, const TokenDataset& train_data,
                const TokenDataset& test_data, const TrainConfig& config,
                std::span<const EvalSet> extra_evals) {
    return train_impl<KBodyAdapter>(model, train_data, test_data, config, extra_evals, nullptr);
}

BaselineResult train_kbody_baseline(std::uint32_t k, const TokenDataset& train_data,
                                    const TokenDataset& test_data, TrainConfig config,
                                    double rel_tol, std::uint32_t patience) {
    BaselineResult out;
    out.model = make_kbody(k, train_data.length, train_data.vocab);
    // All-zero packed tensors are a stationary point of the J*U product
    // parameterisation; start from a small random point instead.
    Rng rng(derive_seed(config.seed, "kbody.init"));
    for (auto& v : out.model.j) v = 0.02 * rng.normal();
    for (auto& v : out.model.u) v = 0.02 * rng.normal();
    std::uint32_t calm = 0;
    auto stop = [&](const MetricLog& log) {
        auto losses = log.split_losses("test");
        if (losses.size() < 2) return false;
        const double prev = losses[losses.size() - 2];
        const double now = losses.back();
        const double rel = std::abs(now - prev) / std::max(1e-12, std::abs(prev));
        calm = rel < rel_tol ? calm + 1 : 0;
        return calm >= patience;
    };
    out.log = train_impl<KBodyAdapter>(out.model, train_data, test_data, config, {}, stop);
    out.final_test_loss = out.log.final_loss("test");
    return out;
}

double msd(const model::FactoredLayer& now, const model::FactoredLayer& at_start,
           std::uint32_t length, std::uint32_t vocab, std::uint32_t value_rank) {
    double a_disp = 0.0;
    for (std::size_t k = 0; k < now.attention.size(); ++k) {
        const double d = now.attention[k] - at_start.attention[k];
        a_disp += d * d;
    }
    auto effective = [&](const model::FactoredLayer& layer) {
        if (!layer.low_rank()) return layer.value;
        std::vector<double> v(std::size_t(vocab) * vocab, 0.0);
        for (std::size_t a = 0; a < vocab; ++a)
            for (std::size_t t = 0; t < value_rank; ++t) {
                const double p = layer.value_p[a * value_rank + t];
                if (p == 0.0) continue;
                for (std::size_t b = 0; b < vocab; ++b)
                    v[a * vocab + b] += p * layer.value_q[t * vocab + b];
            }
        return v;
    };
    const auto v_now = effective(now);
    const auto v_start = effective(at_start);
    double v_disp = 0.0;
    for (std::size_t k = 0; k < v_now.size(); ++k) {
        const double d = v_now[k] - v_start[k];
        v_disp += d * d;
    }
    return a_disp / (double(length) * length) + v_disp / (double(vocab) * vocab);
}

std::vector<double> msd_all(const model::FactoredStack& now, const model::FactoredStack& at_start) {
    if (now.layers.size() != at_start.layers.size())
        throw std::invalid_argument("msd: snapshot has a different layer count");
    std::vector<double> out(now.layers.size());
    for (std::size_t l = 0; l < now.layers.size(); ++l)
        out[l] = msd(now.layers[l], at_start.layers[l], now.config.length, now.config.vocab,
                     now.config.value_rank);
    return out;
}

std::size_t msd_onset_epoch(std::span<const double> msd_series, double fraction) {
    if (msd_series.empty()) return 0;
    const double threshold = fraction * msd_series.back();
    for (std::size_t e = 0; e < msd_series.size(); ++e)
        if (msd_series[e] > threshold) return e;
    return msd_series.size();
}

std::vector<Plateau> detect_plateaus(std::span<const double> per_epoch_loss, double rel_change,
                                     std::uint32_t min_epochs) {
    std::vector<Plateau> out;
    const std::size_t n = per_epoch_loss.size();
    std::size_t start = 0;
    for (std::size_t e = 1; e <= n; ++e) {
        bool calm = false;
        if (e < n) {
            const double prev = per_epoch_loss[e - 1];
            calm = std::abs(per_epoch_loss[e] - prev) / std::max(1e-12, std::abs(prev)) < rel_change;
        }
        if (!calm) {
            // interval [start, e-1] was flat step-to-step
            if (e - start >= min_epochs) {
                double level = 0.0;
                for (std::size_t k = start; k < e; ++k) level += per_epoch_loss[k];
                out.push_back({static_cast<std::uint32_t>(start), static_cast<std::uint32_t>(e - 1),
                               level / double(e - start)});
            }
            start = e;
        }
    }
    return out;
}

}  // namespace mbfa::training
