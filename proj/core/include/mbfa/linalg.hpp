#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mbfa {

// Row-major dense matrix of doubles. Small and deliberately minimal: the
// workbench only needs dense kernels at desk scale.
struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    std::size_t size() const { return data.size(); }
    void fill(double v) { data.assign(rows * cols, v); }

    static Mat identity(std::size_t n);
};

Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
std::vector<double> matvec(const Mat& a, std::span<const double> x);
double frobenius_norm_sq(const Mat& a);
double norm2(std::span<const double> x);
double dot(std::span<const double> a, std::span<const double> b);

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// a = V * diag(values) * V^T, with eigenvector k in column k of V.
struct EigenSym {
    std::vector<double> values;
    Mat vectors;
};
EigenSym jacobi_eigensym(const Mat& a, double tol = 1e-13, int max_sweeps = 100);

// Lower-triangular Cholesky factor of an SPD matrix; throws on non-PSD input.
Mat cholesky(const Mat& a);

// Solve a (possibly non-square) least-squares problem min ||A x - b|| by
// normal equations with partial-pivot Gaussian elimination. Fine for the
// tiny, well-scaled systems the workbench builds.
std::vector<double> least_squares(const Mat& a, std::span<const double> b);

}  // namespace mbfa
