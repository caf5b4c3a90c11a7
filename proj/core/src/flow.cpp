#include "mbfa/flow.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mbfa/io.hpp"

namespace mbfa::flow {

namespace {

// lambda_j = sum_l A1_{jl} x_{l}, with x indexed 0..L (context starts at 1).
void lambdas(const FlowState& state, std::span<const double> x, std::vector<double>& lam) {
    const std::size_t length = state.a2.size();
    lam.assign(length, 0.0);
    for (std::size_t j = 0; j < length; ++j) {
        const double* row = state.a1.row(j);
        double acc = 0.0;
        for (std::size_t l = 0; l < length; ++l) acc += row[l] * x[l + 1];
        lam[j] = acc;
    }
}

double prediction(const FlowState& state, std::span<const double> x, std::vector<double>& lam) {
    lambdas(state, x, lam);
    double y = 0.0;
    for (std::size_t j = 0; j < state.a2.size(); ++j)
        y += state.a2[j] * (x[j + 1] + lam[j] * lam[j]);
    return y;
}

void check_shapes(const FlowState& state) {
    if (state.a1.rows != state.a2.size() || state.a1.cols != state.a2.size())
        throw std::invalid_argument("flow state shapes are inconsistent");
}

}  // namespace

FlowState FlowState::zeros(std::uint32_t length) {
    FlowState s;
    s.a1 = Mat(length, length);
    s.a2.assign(length, 0.0);
    return s;
}

double DataStatistics::gamma_at(std::uint32_t i, std::uint32_t j, std::uint32_t k) const {
    if (gamma.empty()) return 0.0;
    const std::size_t n = length + 1;
    return gamma[(std::size_t(i) * n + j) * n + k];
}

void DataStatistics::validate() const {
    if (length == 0) throw std::invalid_argument("statistics need L >= 1");
    if (h.size() != length || c.rows != length || c.cols != length)
        throw std::invalid_argument("statistics shapes do not match L");
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = i + 1; j < length; ++j)
            if (std::abs(c(i, j) - c(j, i)) > 1e-10)
                throw std::invalid_argument("C must be symmetric");
    if (!gamma.empty() && gamma.size() != std::size_t(length + 1) * (length + 1) * (length + 1))
        throw std::invalid_argument("gamma must cover indices 0..L");
}

Mat DataStatistics::full_covariance() const {
    Mat full(length + 1, length + 1);
    full(0, 0) = sigma00;
    for (std::size_t j = 0; j < length; ++j) {
        full(0, j + 1) = h[j];
        full(j + 1, 0) = h[j];
        for (std::size_t k = 0; k < length; ++k) full(j + 1, k + 1) = c(j, k);
    }
    return full;
}

DataStatistics DataStatistics::from_samples(const Mat& samples, bool keep_third_moments) {
    if (samples.cols < 2) throw std::invalid_argument("samples need at least 2 columns");
    const std::size_t n = samples.rows;
    const std::uint32_t length = static_cast<std::uint32_t>(samples.cols - 1);
    DataStatistics stats;
    stats.length = length;
    stats.h.assign(length, 0.0);
    stats.c = Mat(length, length);
    stats.sigma00 = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* x = samples.row(r);
        stats.sigma00 += x[0] * x[0];
        for (std::size_t j = 0; j < length; ++j) {
            stats.h[j] += x[0] * x[j + 1];
            for (std::size_t k = 0; k < length; ++k) stats.c(j, k) += x[j + 1] * x[k + 1];
        }
    }
    const double inv = 1.0 / double(n);
    stats.sigma00 *= inv;
    for (double& v : stats.h) v *= inv;
    for (double& v : stats.c.data) v *= inv;
    if (keep_third_moments) {
        const std::size_t dim = length + 1;
        stats.gamma.assign(dim * dim * dim, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = samples.row(r);
            for (std::size_t i = 0; i < dim; ++i)
                for (std::size_t j = 0; j < dim; ++j)
                    for (std::size_t k = 0; k < dim; ++k)
                        stats.gamma[(i * dim + j) * dim + k] += x[i] * x[j] * x[k];
        }
        for (double& v : stats.gamma) v *= inv;
    }
    return stats;
}

double sample_loss(const FlowState& state, std::span<const double> x) {
    check_shapes(state);
    std::vector<double> lam;
    const double y = prediction(state, x, lam);
    const double r = x[0] - y;
    return 0.5 * r * r;
}

void flow_rhs_sample(const FlowState& state, std::span<const double> x, Mat& d_a1,
                     std::vector<double>& d_a2) {
    check_shapes(state);
    const std::size_t length = state.a2.size();
    if (x.size() != length + 1) throw std::invalid_argument("flow sample needs L+1 entries");
    std::vector<double> lam;
    const double resid = x[0] - prediction(state, x, lam);
    d_a1 = Mat(length, length);
    d_a2.assign(length, 0.0);
    for (std::size_t j = 0; j < length; ++j)
        d_a2[j] = resid * (x[j + 1] + lam[j] * lam[j]);
    for (std::size_t k = 0; k < length; ++k) {
        const double f = 2.0 * resid * state.a2[k] * lam[k];
        if (f == 0.0) continue;
        double* row = d_a1.row(k);
        for (std::size_t l = 0; l < length; ++l) row[l] = f * x[l + 1];
    }
}

void flow_rhs_gaussian(const FlowState& state, const DataStatistics& stats, Mat& d_a1,
                       std::vector<double>& d_a2) {
    check_shapes(state);
    stats.validate();
    const std::size_t length = state.a2.size();
    if (stats.length != length) throw std::invalid_argument("statistics do not match state size");

    const Mat s = matmul(state.a1, stats.c);        // S = A1 C
    const Mat lam = matmul(s, transpose(state.a1));  // Lam = A1 C A1^T

    d_a2.assign(length, 0.0);
    const auto ca2 = matvec(stats.c, state.a2);
    for (std::size_t j = 0; j < length; ++j) {
        double quartic = 0.0;
        for (std::size_t k = 0; k < length; ++k) {
            const double e4 = lam(j, j) * lam(k, k) + 2.0 * lam(j, k) * lam(j, k);
            quartic += state.a2[k] * e4;
        }
        d_a2[j] = stats.h[j] - ca2[j] - quartic;
    }

    d_a1 = Mat(length, length);
    for (std::size_t k = 0; k < length; ++k) {
        for (std::size_t l = 0; l < length; ++l) {
            double acc = 0.0;
            for (std::size_t j = 0; j < length; ++j)
                acc += state.a2[j] * (lam(j, j) * s(k, l) + 2.0 * lam(j, k) * s(j, l));
            d_a1(k, l) = -2.0 * state.a2[k] * acc;
        }
    }
}

FlowRhs make_gaussian_rhs(const DataStatistics& stats) {
    return [stats](const FlowState& state, Mat& d_a1, std::vector<double>& d_a2) {
        flow_rhs_gaussian(state, stats, d_a1, d_a2);
    };
}

FlowRhs make_batch_rhs(const Mat& samples) {
    return [samples](const FlowState& state, Mat& d_a1, std::vector<double>& d_a2) {
        const std::size_t length = state.a2.size();
        d_a1 = Mat(length, length);
        d_a2.assign(length, 0.0);
        Mat g1;
        std::vector<double> g2;
        for (std::size_t r = 0; r < samples.rows; ++r) {
            flow_rhs_sample(state, {samples.row(r), samples.cols}, g1, g2);
            for (std::size_t k = 0; k < g1.data.size(); ++k) d_a1.data[k] += g1.data[k];
            for (std::size_t k = 0; k < length; ++k) d_a2[k] += g2[k];
        }
        const double inv = 1.0 / double(samples.rows);
        for (double& v : d_a1.data) v *= inv;
        for (double& v : d_a2) v *= inv;
    };
}

std::vector<FlowState> integrate_flow(const FlowState& initial, const FlowRhs& rhs, double dt,
                                      double total_time, double ridge, std::uint32_t record_every) {
    check_shapes(initial);
    if (!(dt > 0.0)) throw std::invalid_argument("integrate_flow: dt must be positive");
    if (ridge < 0.0) throw std::invalid_argument("integrate_flow: ridge must be >= 0");
    if (record_every == 0) record_every = 1;
    const std::size_t length = initial.a2.size();
    const auto steps = static_cast<std::uint64_t>(std::llround(total_time / dt));

    auto eval = [&](const FlowState& s, Mat& d_a1, std::vector<double>& d_a2) {
        rhs(s, d_a1, d_a2);
        if (ridge != 0.0) {
            for (std::size_t k = 0; k < d_a1.data.size(); ++k)
                d_a1.data[k] -= ridge * s.a1.data[k];
            for (std::size_t k = 0; k < length; ++k) d_a2[k] -= ridge * s.a2[k];
        }
    };

    std::vector<FlowState> trajectory;
    trajectory.reserve(steps / record_every + 2);
    FlowState state = initial;
    trajectory.push_back(state);

    Mat k1a, k2a, k3a, k4a;
    std::vector<double> k1b, k2b, k3b, k4b;
    FlowState mid;
    for (std::uint64_t step = 0; step < steps; ++step) {
        eval(state, k1a, k1b);
        mid = state;
        for (std::size_t k = 0; k < state.a1.data.size(); ++k)
            mid.a1.data[k] = state.a1.data[k] + 0.5 * dt * k1a.data[k];
        for (std::size_t k = 0; k < length; ++k) mid.a2[k] = state.a2[k] + 0.5 * dt * k1b[k];
        eval(mid, k2a, k2b);
        for (std::size_t k = 0; k < state.a1.data.size(); ++k)
            mid.a1.data[k] = state.a1.data[k] + 0.5 * dt * k2a.data[k];
        for (std::size_t k = 0; k < length; ++k) mid.a2[k] = state.a2[k] + 0.5 * dt * k2b[k];
        eval(mid, k3a, k3b);
        for (std::size_t k = 0; k < state.a1.data.size(); ++k)
            mid.a1.data[k] = state.a1.data[k] + dt * k3a.data[k];
        for (std::size_t k = 0; k < length; ++k) mid.a2[k] = state.a2[k] + dt * k3b[k];
        eval(mid, k4a, k4b);

        const double w = dt / 6.0;
        for (std::size_t k = 0; k < state.a1.data.size(); ++k)
            state.a1.data[k] += w * (k1a.data[k] + 2.0 * k2a.data[k] + 2.0 * k3a.data[k] +
                                     k4a.data[k]);
        for (std::size_t k = 0; k < length; ++k)
            state.a2[k] += w * (k1b[k] + 2.0 * k2b[k] + 2.0 * k3b[k] + k4b[k]);
        state.t += dt;

        double norm = 0.0;
        for (double v : state.a1.data) norm += v * v;
        for (double v : state.a2) norm += v * v;
        if (!std::isfinite(norm) || norm > 1e16)
            throw std::runtime_error("integrate_flow: state blew up at t = " +
                                     std::to_string(state.t));

        if ((step + 1) % record_every == 0 || step + 1 == steps) trajectory.push_back(state);
    }
    return trajectory;
}

std::vector<double> closed_form_a2(const Mat& c, std::span<const double> h,
                                   std::span<const double> a2_initial, double t) {
    if (c.rows != c.cols || c.rows != h.size() || h.size() != a2_initial.size())
        throw std::invalid_argument("closed_form_a2: shape mismatch");
    const std::size_t length = c.rows;
    const auto eig = jacobi_eigensym(c);
    double dmax = 0.0;
    for (double d : eig.values) dmax = std::max(dmax, std::abs(d));
    const double tol = std::max(dmax, 1.0) * 1e-12;

    // rotate into the eigenbasis: y = V^T x
    std::vector<double> ht(length, 0.0), a0t(length, 0.0), at(length, 0.0);
    for (std::size_t j = 0; j < length; ++j)
        for (std::size_t i = 0; i < length; ++i) {
            ht[j] += eig.vectors(i, j) * h[i];
            a0t[j] += eig.vectors(i, j) * a2_initial[i];
        }
    for (std::size_t j = 0; j < length; ++j) {
        const double d = eig.values[j];
        if (d <= tol) {
            if (std::abs(ht[j]) > tol)
                throw std::runtime_error(
                    "closed_form_a2: C is singular along a direction with nonzero h");
            at[j] = a0t[j];  // flat direction, no drive
            continue;
        }
        const double stationary = ht[j] / d;
        at[j] = stationary + (a0t[j] - stationary) * std::exp(-d * t);
    }
    std::vector<double> out(length, 0.0);
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j < length; ++j) out[i] += eig.vectors(i, j) * at[j];
    return out;
}

Mat stability_matrix(std::span<const double> a2, const DataStatistics& stats) {
    stats.validate();
    const std::size_t length = stats.length;
    if (a2.size() != length) throw std::invalid_argument("stability_matrix: a2 size mismatch");
    Mat g(length, length);
    for (std::size_t l = 0; l < length; ++l)
        for (std::size_t k = 0; k < length; ++k) {
            double inner = stats.gamma_at(0, static_cast<std::uint32_t>(l + 1),
                                          static_cast<std::uint32_t>(k + 1));
            for (std::size_t j = 0; j < length; ++j)
                inner -= a2[j] * stats.gamma_at(static_cast<std::uint32_t>(j + 1),
                                                static_cast<std::uint32_t>(l + 1),
                                                static_cast<std::uint32_t>(k + 1));
            g(l, k) = a2[k] * inner;
        }
    return g;
}

bool is_negative_definite(const Mat& g, double tol) {
    if (g.rows != g.cols) throw std::invalid_argument("is_negative_definite: square matrix needed");
    Mat sym(g.rows, g.cols);
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) sym(i, j) = 0.5 * (g(i, j) + g(j, i));
    const auto eig = jacobi_eigensym(sym);
    for (double v : eig.values)
        if (v >= -tol) return false;
    return true;
}

double expected_loss_gaussian(const Mat& a1, std::span<const double> a2,
                              const DataStatistics& stats) {
    stats.validate();
    const std::size_t length = stats.length;
    if (a1.rows != length || a1.cols != length || a2.size() != length)
        throw std::invalid_argument("expected_loss_gaussian: shape mismatch");

    double f = stats.sigma00;
    const auto ca2 = matvec(stats.c, a2);
    for (std::size_t j = 0; j < length; ++j) f += a2[j] * (ca2[j] - 2.0 * stats.h[j]);
    f *= 0.5;

    const Mat lam = matmul(matmul(a1, stats.c), transpose(a1));
    double trace_term = 0.0;
    for (std::size_t j = 0; j < length; ++j) trace_term += a2[j] * lam(j, j);
    double cross = 0.0;
    for (std::size_t j = 0; j < length; ++j)
        for (std::size_t k = 0; k < length; ++k)
            cross += a2[j] * a2[k] * lam(j, k) * lam(j, k);

    return f + 0.5 * trace_term * trace_term + cross;
}

DataStatistics load_statistics(const std::filesystem::path& path) {
    std::istringstream in(read_file_text(path));
    DataStatistics stats;
    std::uint32_t length = 0;
    if (!(in >> length)) throw std::runtime_error(path.string() + ": cannot read L");
    if (!(in >> stats.sigma00)) throw std::runtime_error(path.string() + ": cannot read sigma00");
    stats.length = length;
    stats.h.assign(length, 0.0);
    stats.c = Mat(length, length);
    for (auto& v : stats.h)
        if (!(in >> v)) throw std::runtime_error(path.string() + ": truncated h");
    for (auto& v : stats.c.data)
        if (!(in >> v)) throw std::runtime_error(path.string() + ": truncated C");
    std::vector<double> gamma;
    double x;
    while (in >> x) gamma.push_back(x);
    if (!gamma.empty()) {
        if (gamma.size() != std::size_t(length + 1) * (length + 1) * (length + 1))
            throw std::runtime_error(path.string() + ": gamma must have (L+1)^3 entries");
        stats.gamma = std::move(gamma);
    }
    stats.validate();
    return stats;
}

void save_statistics(const std::filesystem::path& path, const DataStatistics& stats) {
    stats.validate();
    std::ostringstream out;
    out.precision(17);
    out << stats.length << "\n" << stats.sigma00 << "\n";
    for (double v : stats.h) out << v << " ";
    out << "\n";
    for (std::size_t i = 0; i < stats.length; ++i) {
        for (std::size_t j = 0; j < stats.length; ++j) out << stats.c(i, j) << " ";
        out << "\n";
    }
    if (!stats.gamma.empty()) {
        for (double v : stats.gamma) out << v << " ";
        out << "\n";
    }
    write_file_text(path, out.str());
}

void write_trajectory_csv(const std::filesystem::path& path,
                          std::span<const FlowState> trajectory, const DataStatistics& stats) {
    std::vector<double> stationary;
    bool have_stationary = true;
    try {
        stationary = closed_form_a2(stats.c, stats.h, std::vector<double>(stats.length, 0.0),
                                    std::numeric_limits<double>::infinity());
    } catch (const std::exception&) {
        have_stationary = false;
    }

    std::string out = "t,a1_norm,a2_error,loss\n";
    char buf[128];
    for (const auto& state : trajectory) {
        const double a1n = std::sqrt(frobenius_norm_sq(state.a1));
        double a2err = 0.0;
        if (have_stationary) {
            for (std::size_t j = 0; j < stats.length; ++j) {
                const double d = state.a2[j] - stationary[j];
                a2err += d * d;
            }
            a2err = std::sqrt(a2err);
        }
        const double loss = expected_loss_gaussian(state.a1, state.a2, stats);
        std::snprintf(buf, sizeof buf, "%.10g,%.17g,%.17g,%.17g\n", state.t, a1n, a2err, loss);
        out += buf;
    }
    write_file_text(path, out);
}

}  // namespace mbfa::flow
