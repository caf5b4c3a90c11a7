#include "mbfa/kbody.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mbfa/io.hpp"
#include "mbfa/mathutil.hpp"

namespace mbfa::training {

SymmetricIndex::SymmetricIndex(std::uint32_t n_, std::uint32_t k_) : n(n_), k(k_) {
    stride_ = k + 2;
    const std::uint32_t amax = n + k + 1;
    table_.assign(std::size_t(amax + 1) * stride_, 0);
    for (std::uint32_t a = 0; a <= amax; ++a) {
        table_[std::size_t(a) * stride_] = 1;
        for (std::uint32_t b = 1; b <= k + 1; ++b) {
            std::uint64_t v = 0;
            if (a > 0) {
                v = table_[std::size_t(a - 1) * stride_ + b] +
                    table_[std::size_t(a - 1) * stride_ + (b - 1)];
            } else {
                v = 0;
            }
            table_[std::size_t(a) * stride_ + b] = v;
        }
    }
}

std::uint64_t SymmetricIndex::binom(std::uint32_t a, std::uint32_t b) const {
    if (b > k + 1 || a > n + k + 1) throw std::logic_error("SymmetricIndex::binom out of table");
    return table_[std::size_t(a) * stride_ + b];
}

std::uint64_t SymmetricIndex::size() const { return k == 0 ? 1 : binom(n + k - 1, k); }

std::uint64_t SymmetricIndex::rank(std::span<const std::uint32_t> sorted) const {
    std::uint64_t r = 0;
    for (std::uint32_t m = 0; m < k; ++m) r += binom(sorted[m] + m, m + 1);
    return r;
}

void SymmetricIndex::unrank(std::uint64_t r, std::span<std::uint32_t> out) const {
    for (std::uint32_t m = k; m-- > 0;) {
        std::uint32_t a = n;  // largest candidate value is n-1
        while (a > 0 && binom((a - 1) + m, m + 1) > r) --a;
        // a is now 1 + the chosen value, except when the chosen value is 0
        const std::uint32_t value = a == 0 ? 0 : a - 1;
        out[m] = value;
        r -= binom(value + m, m + 1);
    }
}

double SymmetricIndex::multiplicity(std::span<const std::uint32_t> sorted) {
    double fact = 1.0;
    for (std::size_t i = 2; i <= sorted.size(); ++i) fact *= double(i);
    double denom = 1.0;
    std::size_t run = 1;
    for (std::size_t i = 1; i <= sorted.size(); ++i) {
        if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
            ++run;
            denom *= double(run);
        } else {
            run = 1;
        }
    }
    return fact / denom;
}

namespace {

// Per-site expansion of "tuples containing the site": for queried site i and
// multiplicity m (copies of i in the tuple), every multiset R of the other
// k-m positions contributes weight C(k,m) * mult(R) = k! / (m! prod counts!).
struct SiteEntry {
    std::uint32_t jrank;
    double weight;
    std::uint8_t m;
    std::uint8_t npos;
    std::uint16_t pos[6];
};

struct SiteTables {
    std::vector<std::vector<SiteEntry>> per_site;
    std::vector<SymmetricIndex> u_sub;   // multiset indices over tokens, sizes 0..k-1
    std::vector<std::uint32_t> ja_offset;  // ja slot ranges indexed by m = 1..k
    std::uint32_t ja_total = 0;

    void build(const KBodyBaseline& model);
};

void SiteTables::build(const KBodyBaseline& model) {
    const std::uint32_t k = model.k, length = model.length, vocab = model.vocab;
    u_sub.clear();
    for (std::uint32_t s = 0; s < k; ++s) u_sub.emplace_back(vocab, s);
    ja_offset.assign(k + 2, 0);
    for (std::uint32_t m = 1; m <= k; ++m)
        ja_offset[m + 1] = ja_offset[m] + static_cast<std::uint32_t>(u_sub[k - m].size());
    ja_total = ja_offset[k + 1];

    double kfact = 1.0;
    for (std::uint32_t i = 2; i <= k; ++i) kfact *= double(i);

    per_site.assign(length, {});
    std::vector<std::uint32_t> reduced(k), actual(k), tuple(k);
    for (std::uint32_t i = 0; i < length; ++i) {
        auto& entries = per_site[i];
        for (std::uint32_t m = 1; m <= k; ++m) {
            const std::uint32_t km = k - m;
            double mfact = 1.0;
            for (std::uint32_t t = 2; t <= m; ++t) mfact *= double(t);
            double kmfact = 1.0;
            for (std::uint32_t t = 2; t <= km; ++t) kmfact *= double(t);
            // odometer over sorted tuples of size km over the L-1 other positions
            std::fill(reduced.begin(), reduced.begin() + km, 0u);
            while (true) {
                SiteEntry e;
                e.m = static_cast<std::uint8_t>(m);
                e.npos = static_cast<std::uint8_t>(km);
                for (std::uint32_t t = 0; t < km; ++t) {
                    actual[t] = reduced[t] < i ? reduced[t] : reduced[t] + 1;
                    e.pos[t] = static_cast<std::uint16_t>(actual[t]);
                }
                // ordered arrangements of (R and m copies of i):
                // k! / (m! prod counts_R!) = k! mult(R) / (m! (k-m)!)
                e.weight = kfact *
                           SymmetricIndex::multiplicity(std::span(actual.data(), km)) /
                           (mfact * kmfact);
                // full position tuple: R merged with m copies of i
                std::uint32_t a = 0, b = 0;
                while (a < km && actual[a] < i) {
                    tuple[b] = actual[a];
                    ++a, ++b;
                }
                for (std::uint32_t t = 0; t < m; ++t) tuple[b++] = i;
                while (a < km) tuple[b++] = actual[a++];
                e.jrank = static_cast<std::uint32_t>(model.jindex.rank(std::span(tuple.data(), k)));
                entries.push_back(e);

                if (km == 0) break;
                std::uint32_t d = km;
                while (d > 0 && reduced[d - 1] == length - 2) --d;
                if (d == 0) break;
                const std::uint32_t v = ++reduced[d - 1];
                for (std::uint32_t t = d; t < km; ++t) reduced[t] = v;
            }
        }
    }
}

}  // namespace

// Each workspace builds its own table set (cheap, read-only afterwards).
void KBodyWorkspace::init(const KBodyBaseline& model) {
    logits.assign(model.vocab, 0.0);
    auto tables = std::make_shared<SiteTables>();
    tables->build(model);
    tables_ = tables;
    const auto* t = static_cast<const SiteTables*>(tables_.get());
    ja.assign(t->ja_total, 0.0);
    ub.assign(t->ja_total, 0.0);
    touched.clear();
    std::size_t max_entries = 0;
    for (const auto& s : t->per_site) max_entries = std::max(max_entries, s.size());
    scratch.assign(max_entries, 0);
    visited_.assign(t->ja_total, 0);
}

namespace {

// Merge m copies of token a into the sorted context tokens w (size km) and
// rank the resulting k-tuple.
inline std::uint64_t merged_rank(const SymmetricIndex& full, std::uint32_t a, std::uint32_t m,
                                 const std::uint32_t* w, std::uint32_t km) {
    std::uint64_t r = 0;
    std::uint32_t slot = 0, wi = 0;
    while (wi < km && w[wi] < a) {
        r += full.binom(w[wi] + slot, slot + 1);
        ++wi, ++slot;
    }
    for (std::uint32_t t = 0; t < m; ++t) {
        r += full.binom(a + slot, slot + 1);
        ++slot;
    }
    while (wi < km) {
        r += full.binom(w[wi] + slot, slot + 1);
        ++wi, ++slot;
    }
    return r;
}

}  // namespace

std::span<const double> kbody_logits(const KBodyBaseline& model,
                                     std::span<const std::uint32_t> row, std::uint32_t pos,
                                     KBodyWorkspace& ws) {
    ws.eval(model, row, pos, nullptr, nullptr);
    return {ws.logits.data(), model.vocab};
}

void KBodyWorkspace::eval(const KBodyBaseline& model, std::span<const std::uint32_t> row,
                          std::uint32_t pos, const double* dlogits, KBodyGrads* grads) {
    const auto* tabs = static_cast<const SiteTables*>(tables_.get());
    const auto& entries = tabs->per_site[pos];
    const std::uint32_t k = model.k, vocab = model.vocab;

    // Phase 1: accumulate J weights per (m, context-token-multiset).
    std::size_t ntouched = 0;
    std::uint32_t wtok[6];
    for (std::size_t e = 0; e < entries.size(); ++e) {
        const auto& ent = entries[e];
        const std::uint32_t km = ent.npos;
        for (std::uint32_t t = 0; t < km; ++t) wtok[t] = row[ent.pos[t]] - 1;
        std::sort(wtok, wtok + km);
        const std::uint32_t code =
            tabs->ja_offset[ent.m] +
            static_cast<std::uint32_t>(tabs->u_sub[km].rank(std::span(wtok, km)));
        scratch[e] = code;
        if (!visited_[code]) {
            visited_[code] = 1;
            if (ntouched == touched.size()) touched.push_back(code);
            else touched[ntouched] = code;
            ++ntouched;
            ja[code] = 0.0;
            ub[code] = 0.0;
        }
        ja[code] += ent.weight * model.j[ent.jrank];
    }

    // Phase 2: contract against the token tensor for every candidate token.
    std::fill(logits.begin(), logits.end(), 0.0);
    std::uint32_t wdec[6];
    for (std::size_t tix = 0; tix < ntouched; ++tix) {
        const std::uint32_t code = touched[tix];
        std::uint32_t m = 1;
        while (code >= tabs->ja_offset[m + 1]) ++m;
        const std::uint32_t km = k - m;
        tabs->u_sub[km].unrank(code - tabs->ja_offset[m], std::span(wdec, km));
        const double jacc = ja[code];
        if (dlogits == nullptr) {
            for (std::uint32_t a = 0; a < vocab; ++a)
                logits[a] -= jacc * model.u[merged_rank(model.uindex, a, m, wdec, km)];
        } else {
            double ubacc = 0.0;
            for (std::uint32_t a = 0; a < vocab; ++a) {
                const std::uint64_t fr = merged_rank(model.uindex, a, m, wdec, km);
                grads->u[fr] -= jacc * dlogits[a];
                ubacc -= model.u[fr] * dlogits[a];
            }
            ub[code] = ubacc;
        }
    }

    // Phase 3 (backward only): distribute the token contractions onto dJ.
    if (dlogits != nullptr) {
        for (std::size_t e = 0; e < entries.size(); ++e)
            grads->j[entries[e].jrank] += entries[e].weight * ub[scratch[e]];
    }

    for (std::size_t tix = 0; tix < ntouched; ++tix) visited_[touched[tix]] = 0;
}

void KBodyGrads::init_like(const KBodyBaseline& model) {
    j.assign(model.j.size(), 0.0);
    u.assign(model.u.size(), 0.0);
}

void KBodyGrads::zero() {
    std::fill(j.begin(), j.end(), 0.0);
    std::fill(u.begin(), u.end(), 0.0);
}

void KBodyGrads::add(const KBodyGrads& other) {
    for (std::size_t i = 0; i < j.size(); ++i) j[i] += other.j[i];
    for (std::size_t i = 0; i < u.size(); ++i) u[i] += other.u[i];
}

double kbody_backward_batch(const KBodyBaseline& model, std::span<const KBodySample> batch,
                            KBodyGrads& grads, KBodyWorkspace& ws, std::uint64_t* correct) {
    if (batch.empty()) throw std::invalid_argument("kbody_backward_batch: empty batch");
    double loss_sum = 0.0;
    std::vector<double> dlogits(model.vocab);
    for (const auto& sample : batch) {
        std::span<const std::uint32_t> row{sample.row, model.length};
        auto logits = kbody_logits(model, row, sample.pos, ws);
        const std::size_t target = row[sample.pos] - 1;
        loss_sum += cross_entropy(logits, target);
        if (correct && argmax(logits) == target) ++*correct;
        softmax(logits, dlogits);
        dlogits[target] -= 1.0;
        ws.eval(model, row, sample.pos, dlogits.data(), &grads);
    }
    return loss_sum;
}

KBodyBaseline make_kbody(std::uint32_t k, std::uint32_t length, std::uint32_t vocab,
                         std::uint64_t packed_cap) {
    if (k < 2 || k > 6) throw std::invalid_argument("k-body baseline supports k in [2,6]");
    if (length == 0 || vocab == 0) throw std::invalid_argument("L and V must be positive");
    KBodyBaseline model;
    model.k = k;
    model.length = length;
    model.vocab = vocab;
    model.jindex = SymmetricIndex(length, k);
    model.uindex = SymmetricIndex(vocab, k);
    const std::uint64_t total = model.jindex.size() + model.uindex.size();
    if (total > packed_cap)
        throw std::invalid_argument("packed tensors need " + std::to_string(total) +
                                    " values, above the cap " + std::to_string(packed_cap));
    model.j.assign(model.jindex.size(), 0.0);
    model.u.assign(model.uindex.size(), 0.0);
    return model;
}

KBodyBaseline kbody_from_distribution(const manybody::ManyBodyDistribution& dist) {
    const auto& cfg = dist.config;
    KBodyBaseline model = make_kbody(cfg.order, cfg.length, cfg.vocab);
    std::vector<std::uint32_t> idx(cfg.order);
    for (std::uint64_t r = 0; r < model.j.size(); ++r) {
        model.jindex.unrank(r, idx);
        model.j[r] = cfg.scale * dist.coupling_j(idx);
    }
    for (std::uint64_t r = 0; r < model.u.size(); ++r) {
        model.uindex.unrank(r, idx);
        model.u[r] = dist.coupling_u(idx);
    }
    return model;
}

void save_kbody(const std::filesystem::path& path, const KBodyBaseline& model) {
    ByteWriter w;
    w.magic("MBKB");
    w.u32(1);
    w.u32(model.k);
    w.u32(model.length);
    w.u32(model.vocab);
    for (double v : model.j) w.f64(v);
    for (double v : model.u) w.f64(v);
    write_file_bytes(path, w.buffer());
}

KBodyBaseline load_kbody(const std::filesystem::path& path) {
    ByteReader r(read_file_bytes(path));
    r.expect_magic("MBKB", path.string());
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path.string() + ": unsupported baseline version " +
                                 std::to_string(version));
    const std::uint32_t k = r.u32(), length = r.u32(), vocab = r.u32();
    KBodyBaseline model = make_kbody(k, length, vocab);
    r.f64_array(model.j.data(), model.j.size());
    r.f64_array(model.u.data(), model.u.size());
    return model;
}

}  // namespace mbfa::training
