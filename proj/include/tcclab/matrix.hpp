#pragma once

#include <cstddef>
#include <vector>

namespace tcclab {

// Dense row-major double matrix. Sizes stay small (tens of rows/columns), so
// every routine below favors a fixed, reproducible accumulation order over
// speed: given identical inputs the results are bitwise identical.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n);

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const double& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }
    bool all_finite() const;
};

bool bitwise_equal(const Matrix& a, const Matrix& b);

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);

// Thin SVD: input == u * diag(sigma) * v^T with sigma sorted descending and
// u, v carrying orthonormal columns (k = min(rows, cols)).
struct SvdResult {
    Matrix u;                   // m x k
    std::vector<double> sigma;  // length k, descending, non-negative
    Matrix v;                   // n x k
};

// One-sided Jacobi SVD with a fixed sweep order and a fixed relative
// off-diagonal threshold of 1e-12, so repeated calls are bitwise identical.
// Column signs follow one convention: the largest-magnitude entry of each
// left singular vector is non-negative (first such entry wins ties).
SvdResult svd(const Matrix& m);

double frobenius_norm(const Matrix& m);
std::vector<double> row_mean(const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
double inner_product(const Matrix& a, const Matrix& b);

}  // namespace tcclab
