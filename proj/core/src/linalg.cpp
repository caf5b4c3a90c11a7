#include "mbfa/linalg.hpp"

#include <cmath>
#include <stdexcept>

namespace mbfa {

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: shape mismatch");
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row(k);
            double* orow = out.row(i);
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

std::vector<double> matvec(const Mat& a, std::span<const double> x) {
    if (a.cols != x.size()) throw std::invalid_argument("matvec: shape mismatch");
    std::vector<double> y(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) acc += arow[j] * x[j];
        y[i] = acc;
    }
    return y;
}

double frobenius_norm_sq(const Mat& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return s;
}

double norm2(std::span<const double> x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

EigenSym jacobi_eigensym(const Mat& a, double tol, int max_sweeps) {
    if (a.rows != a.cols) throw std::invalid_argument("jacobi_eigensym: matrix must be square");
    const std::size_t n = a.rows;
    Mat m = a;
    Mat v = Mat::identity(n);

    double scale = 0.0;
    for (double x : a.data) scale = std::max(scale, std::abs(x));
    if (scale == 0.0) scale = 1.0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += m(p, q) * m(p, q);
        if (std::sqrt(off) <= tol * scale) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (std::abs(apq) <= tol * scale * 1e-3) continue;
                const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    EigenSym out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = m(i, i);
    out.vectors = std::move(v);
    return out;
}

Mat cholesky(const Mat& a) {
    if (a.rows != a.cols) throw std::invalid_argument("cholesky: matrix must be square");
    const std::size_t n = a.rows;
    Mat l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("cholesky: matrix is not positive definite");
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

std::vector<double> least_squares(const Mat& a, std::span<const double> b) {
    if (a.rows != b.size()) throw std::invalid_argument("least_squares: shape mismatch");
    const std::size_t n = a.cols;
    // Normal equations: (A^T A) x = A^T b.
    Mat ata(n, n);
    std::vector<double> atb(n, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double* arow = a.row(r);
        for (std::size_t i = 0; i < n; ++i) {
            if (arow[i] == 0.0) continue;
            atb[i] += arow[i] * b[r];
            for (std::size_t j = 0; j < n; ++j) ata(i, j) += arow[i] * arow[j];
        }
    }
    // Gaussian elimination with partial pivoting.
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(ata(r, col)) > std::abs(ata(piv, col))) piv = r;
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(ata(col, j), ata(piv, j));
            std::swap(atb[col], atb[piv]);
        }
        const double d = ata(col, col);
        if (std::abs(d) < 1e-14) continue;  // rank-deficient direction, leave as zero
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = ata(r, col) / d;
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) ata(r, j) -= f * ata(col, j);
            atb[r] -= f * atb[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t ri = n; ri-- > 0;) {
        double s = atb[ri];
        for (std::size_t j = ri + 1; j < n; ++j) s -= ata(ri, j) * x[j];
        x[ri] = std::abs(ata(ri, ri)) < 1e-14 ? 0.0 : s / ata(ri, ri);
    }
    return x;
}

}  // namespace mbfa
