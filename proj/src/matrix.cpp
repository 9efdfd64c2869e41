#include "tcclab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace tcclab {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    if (a.data.empty()) return true;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "matrix add");
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "matrix sub");
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

Matrix operator*(double s, const Matrix& m) {
    Matrix out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = s * m.data[i];
    return out;
}

double frobenius_norm(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.data) acc += v * v;
    return std::sqrt(acc);
}

std::vector<double> row_mean(const Matrix& m) {
    if (m.rows == 0) throw std::invalid_argument("row_mean: empty matrix");
    std::vector<double> mean(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) mean[c] += m(r, c);
    }
    for (double& v : mean) v /= static_cast<double>(m.rows);
    return mean;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: shape mismatch");
    Matrix out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) out(c, r) = m(r, c);
    }
    return out;
}

double inner_product(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "inner_product");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

namespace {

// Orthogonalizes the columns of `a` in place by plane rotations, accumulating
// the same rotations into `v` (initialized to identity). Sweeps run over the
// fixed pair order (p, q), p < q, until a full sweep applies no rotation.
// A pair counts as converged when |a_p . a_q| <= 1e-12 * |a_p| * |a_q|.
void jacobi_orthogonalize(Matrix& a, Matrix& v) {
    const std::size_t n = a.cols;
    const std::size_t m = a.rows;
    const double rel_tol = 1e-12;
    const int max_sweeps = 100;  // generous; convergence is typically < 15 sweeps

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double xp = a(i, p);
                    const double xq = a(i, q);
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                if (apq == 0.0) continue;
                if (std::abs(apq) <= rel_tol * std::sqrt(app) * std::sqrt(aqq)) continue;

                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double xp = a(i, p);
                    const double xq = a(i, q);
                    a(i, p) = c * xp - s * xq;
                    a(i, q) = s * xp + c * xq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p);
                    const double vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if (!rotated) break;
    }
}

// Fills u's zero columns (sigma == 0) with unit vectors orthogonal to every
// other column, taken deterministically from the standard basis.
void complete_zero_columns(Matrix& u, const std::vector<double>& sigma) {
    const std::size_t m = u.rows;
    const std::size_t k = u.cols;
    for (std::size_t j = 0; j < k; ++j) {
        if (sigma[j] > 0.0) continue;
        for (std::size_t basis = 0; basis < m; ++basis) {
            std::vector<double> cand(m, 0.0);
            cand[basis] = 1.0;
            for (std::size_t c = 0; c < k; ++c) {
                if (c == j) continue;
                if (sigma[c] == 0.0 && c > j) continue;  // not yet established
                double dot = 0.0;
                for (std::size_t i = 0; i < m; ++i) dot += u(i, c) * cand[i];
                for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * u(i, c);
            }
            double norm = 0.0;
            for (double x : cand) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (std::size_t i = 0; i < m; ++i) u(i, j) = cand[i] / norm;
                break;
            }
        }
    }
}

SvdResult svd_tall(const Matrix& input) {
    // input.rows >= input.cols here
    Matrix a = input;
    Matrix v = Matrix::identity(a.cols);
    jacobi_orthogonalize(a, v);

    const std::size_t k = a.cols;
    std::vector<double> sigma(k, 0.0);
    Matrix u(a.rows, k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) norm += a(i, j) * a(i, j);
        norm = std::sqrt(norm);
        sigma[j] = norm;
        if (norm > 0.0) {
            for (std::size_t i = 0; i < a.rows; ++i) u(i, j) = a(i, j) / norm;
        }
    }
    complete_zero_columns(u, sigma);
    return {std::move(u), std::move(sigma), std::move(v)};
}

}  // namespace

SvdResult svd(const Matrix& input) {
    if (input.rows == 0 || input.cols == 0) throw std::invalid_argument("svd: empty matrix");
    if (!input.all_finite()) throw std::invalid_argument("svd: non-finite matrix");

    SvdResult res;
    if (input.rows >= input.cols) {
        res = svd_tall(input);
    } else {
        SvdResult t = svd_tall(transpose(input));
        res.u = std::move(t.v);
        res.sigma = std::move(t.sigma);
        res.v = std::move(t.u);
    }

    // sort descending by sigma; stable on ties so the result stays deterministic
    const std::size_t k = res.sigma.size();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return res.sigma[a] > res.sigma[b]; });

    SvdResult sorted;
    sorted.u = Matrix(res.u.rows, k);
    sorted.v = Matrix(res.v.rows, k);
    sorted.sigma.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
        const std::size_t src = order[j];
        sorted.sigma[j] = res.sigma[src];
        for (std::size_t i = 0; i < res.u.rows; ++i) sorted.u(i, j) = res.u(i, src);
        for (std::size_t i = 0; i < res.v.rows; ++i) sorted.v(i, j) = res.v(i, src);
    }

    // sign convention: largest-magnitude entry of each left singular vector is
    // non-negative; the matching right singular vector flips with it
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < sorted.u.rows; ++i) {
            const double mag = std::abs(sorted.u(i, j));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        if (sorted.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < sorted.u.rows; ++i) sorted.u(i, j) = -sorted.u(i, j);
            for (std::size_t i = 0; i < sorted.v.rows; ++i) sorted.v(i, j) = -sorted.v(i, j);
        }
    }
    return sorted;
}

}  // namespace tcclab
