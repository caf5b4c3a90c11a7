#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "mbfa/linalg.hpp"

namespace mbfa::flow {

// Scalar-token (d = 1) two-layer model predicting the first entry x_0 of a
// sequence from the context x_1..x_L with square loss:
//   y_0 = sum_j a2_j x_j + sum_j a2_j lambda_j^2,  lambda_j = sum_l A1_{jl} x_l,
//   loss = (x_0 - y_0)^2 / 2.
// The gradient flow (dA/dt = -grad loss) is integrated either per-sample, in
// closed form under a Gaussian design, or as an empirical average over a
// fixed batch.
struct FlowState {
    Mat a1;                   // L x L first-layer weights
    std::vector<double> a2;   // L second-layer row
    double t = 0.0;

    static FlowState zeros(std::uint32_t length);
};

// Moments of the data distribution. Indices follow the sequence layout:
// 0 is the predicted entry, 1..L the context. gamma, when present, holds the
// full third-moment tensor over indices 0..L (size (L+1)^3); an empty gamma
// means Gaussian mode, where all third moments vanish.
struct DataStatistics {
    std::uint32_t length = 0;    // L, the context size
    double sigma00 = 1.0;        // E[x_0^2]
    std::vector<double> h;       // h_j = E[x_0 x_j], length L
    Mat c;                       // C_{ij} = E[x_i x_j], i,j in 1..L
    std::vector<double> gamma;   // E[x_i x_j x_k] over 0..L, empty = Gaussian

    bool gaussian() const { return gamma.empty(); }
    double gamma_at(std::uint32_t i, std::uint32_t j, std::uint32_t k) const;
    void validate() const;

    // Full (L+1) x (L+1) second-moment matrix [[sigma00, h^T], [h, C]].
    Mat full_covariance() const;

    // Moments estimated from rows of samples (each of length L+1),
    // including the empirical third-moment tensor.
    static DataStatistics from_samples(const Mat& samples, bool keep_third_moments = true);
};

// Loss and flow right-hand side for a single data point x (length L+1).
double sample_loss(const FlowState& state, std::span<const double> x);
void flow_rhs_sample(const FlowState& state, std::span<const double> x, Mat& d_a1,
                     std::vector<double>& d_a2);

// Expected right-hand side under zero-mean Gaussian data with moments
// (h, C), evaluated in closed form via Wick contractions:
//   d a2_j = h_j - (C a2)_j - sum_k a2_k E[lam_j^2 lam_k^2]
//   d A1_{kl} = -2 a2_k sum_j a2_j E[lam_j^2 x_l lam_k]
// with E[lam_j^2 lam_k^2] = Lam_jj Lam_kk + 2 Lam_jk^2 and
// E[lam_j^2 x_l lam_k] = Lam_jj S_kl + 2 Lam_jk S_jl, where Lam = A1 C A1^T
// and S = A1 C.
void flow_rhs_gaussian(const FlowState& state, const DataStatistics& stats, Mat& d_a1,
                       std::vector<double>& d_a2);

using FlowRhs = std::function<void(const FlowState&, Mat&, std::vector<double>&)>;

FlowRhs make_gaussian_rhs(const DataStatistics& stats);
// Mean of the per-sample RHS over fixed rows (length L+1 each).
FlowRhs make_batch_rhs(const Mat& samples);

// Classic fourth-order Runge-Kutta with fixed step dt up to time T, with an
// optional ridge term -ridge * weights added to the RHS. States are recorded
// every `record_every` steps (plus the final state). Throws on blow-up.
std::vector<FlowState> integrate_flow(const FlowState& initial, const FlowRhs& rhs, double dt,
                                      double total_time, double ridge = 0.0,
                                      std::uint32_t record_every = 1);

// Closed-form solution of d a2/dt = h - C a2 in the eigenbasis of C:
//   a2~_j(t) = h~_j / D_j + (a2~_j(0) - h~_j / D_j) exp(-D_j t).
// Requires positive eigenvalues wherever the rotated h component is nonzero.
std::vector<double> closed_form_a2(const Mat& c, std::span<const double> h,
                                   std::span<const double> a2_initial, double t);

// Stability matrix of the A1 = 0 fixed point against diagonal perturbations:
//   G_{lk} = a2_k (gamma_{0lk} - sum_j a2_j gamma_{jlk}),  l,k in 1..L.
Mat stability_matrix(std::span<const double> a2, const DataStatistics& stats);

// Negative definiteness decided on the symmetric part (the quantity
// governing the decay of the perturbation norm).
bool is_negative_definite(const Mat& g, double tol = 1e-12);

// Closed-form E[loss] under zero-mean Gaussian data:
//   f(a2) + (sum_j a2_j Lam_jj)^2 / 2 + sum_{jj'} a2_j a2_{j'} Lam_{jj'}^2,
// where f(a2) = (sigma00 - 2 a2.h + a2^T C a2) / 2 and Lam = A1 C A1^T.
// Both corrections are non-negative, so A1 = 0 minimises the loss at fixed a2.
double expected_loss_gaussian(const Mat& a1, std::span<const double> a2,
                              const DataStatistics& stats);

// Structured text: L, sigma00, then h (L), C (L*L), optionally gamma
// ((L+1)^3), whitespace-separated.
DataStatistics load_statistics(const std::filesystem::path& path);
void save_statistics(const std::filesystem::path& path, const DataStatistics& stats);

// CSV: t, ||A1||_F, ||a2 - C^-1 h||, loss (expected loss in Gaussian mode).
void write_trajectory_csv(const std::filesystem::path& path,
                          std::span<const FlowState> trajectory, const DataStatistics& stats);

}  // namespace mbfa::flow
