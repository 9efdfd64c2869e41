#include "tcclab/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace tcclab {

namespace {

Matrix centered(const Matrix& m, const std::vector<double>& mean) {
    Matrix out(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) out(r, c) = m(r, c) - mean[c];
    }
    return out;
}

}  // namespace

CalibrationOperator fit(const Matrix& a, const Matrix& b, double alpha,
                        CalibrationVariant variant, double epsilon) {
    if (!a.same_shape(b)) throw std::invalid_argument("fit: batch shape mismatch");
    if (a.rows == 0 || a.cols == 0) throw std::invalid_argument("fit: empty batch");
    if (!a.all_finite() || !b.all_finite()) throw std::invalid_argument("fit: non-finite batch");
    if (!(epsilon > 0.0)) throw std::invalid_argument("fit: epsilon must be positive");
    if (alpha < 0.0) throw std::invalid_argument("fit: alpha must be >= 0");

    const std::size_t d = a.cols;
    CalibrationOperator op;
    op.alpha = alpha;
    op.variant = variant;
    op.mu_a = row_mean(a);
    op.mu_b = row_mean(b);

    const Matrix a_c = centered(a, op.mu_a);
    const Matrix b_c = centered(b, op.mu_b);

    switch (variant) {
        case CalibrationVariant::Full: {
            const Matrix cross = matmul(transpose(b_c), a_c);
            if (frobenius_norm(cross) == 0.0) {
                op.rotation = Matrix::identity(d);  // degenerate cross-covariance
            } else {
                const SvdResult decomp = svd(cross);
                op.rotation = matmul(decomp.u, transpose(decomp.v));
            }
            const Matrix br = matmul(b_c, op.rotation);
            op.scale = inner_product(a_c, br) / (inner_product(br, br) + epsilon);
            break;
        }
        case CalibrationVariant::ScaleShift: {
            op.rotation = Matrix::identity(d);
            op.scale = inner_product(a_c, b_c) / (inner_product(b_c, b_c) + epsilon);
            break;
        }
        case CalibrationVariant::ShiftOnly: {
            op.rotation = Matrix::identity(d);
            op.scale = 1.0;
            break;
        }
    }
    op.scale = std::max(op.scale, 0.0);
    return op;
}

namespace {

// T(row) into `out`, shared by apply() and residual(). The rotation matmul is
// skipped for non-Full variants, where rotation is identity by definition.
void transform_row(const CalibrationOperator& op, const Matrix& h, std::size_t r,
                   std::vector<double>& out) {
    const std::size_t d = h.cols;
    std::vector<double> shifted(d);
    for (std::size_t c = 0; c < d; ++c) shifted[c] = h(r, c) - op.mu_b[c];
    if (op.variant == CalibrationVariant::Full) {
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += shifted[k] * op.rotation(k, c);
            out[c] = op.mu_a[c] + op.scale * acc;
        }
    } else {
        for (std::size_t c = 0; c < d; ++c) out[c] = op.mu_a[c] + op.scale * shifted[c];
    }
}

}  // namespace

Matrix apply(const CalibrationOperator& op, const Matrix& h) {
    if (h.cols != op.mu_a.size()) throw std::invalid_argument("apply: dimension mismatch");
    if (op.alpha == 0.0) return h;  // exact no-op, bitwise

    Matrix out(h.rows, h.cols);
    std::vector<double> t(h.cols);
    for (std::size_t r = 0; r < h.rows; ++r) {
        transform_row(op, h, r, t);
        for (std::size_t c = 0; c < h.cols; ++c) {
            out(r, c) = h(r, c) + op.alpha * (t[c] - h(r, c));
        }
    }
    return out;
}

double residual(const CalibrationOperator& op, const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("residual: batch shape mismatch");
    if (a.cols != op.mu_a.size()) throw std::invalid_argument("residual: dimension mismatch");
    double acc = 0.0;
    std::vector<double> t(b.cols);
    for (std::size_t r = 0; r < b.rows; ++r) {
        transform_row(op, b, r, t);
        for (std::size_t c = 0; c < b.cols; ++c) {
            const double d = a(r, c) - t[c];
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

PooledBatch pool(const std::vector<Matrix>& sample_values, const std::vector<int>& condition_ids,
                 PoolingMode mode) {
    if (sample_values.empty()) throw std::invalid_argument("pool: empty group");
    if (sample_values.size() != condition_ids.size()) {
        throw std::invalid_argument("pool: sample/condition count mismatch");
    }
    const std::size_t t = sample_values.front().rows;
    const std::size_t d = sample_values.front().cols;
    for (const Matrix& m : sample_values) {
        if (m.rows != t || m.cols != d) throw std::invalid_argument("pool: tap shape mismatch");
    }

    // samples per condition, in ascending condition id and sample index order
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < condition_ids.size(); ++i) groups[condition_ids[i]].push_back(i);

    const auto token_rows = [&](PooledBatch& out) {
        for (const auto& [cond, members] : groups) {
            for (std::size_t tok = 0; tok < t; ++tok) {
                const std::size_t row = out.rows.rows;
                out.rows.rows += 1;
                out.rows.data.resize(out.rows.rows * d, 0.0);
                for (std::size_t c = 0; c < d; ++c) {
                    double acc = 0.0;
                    for (const std::size_t i : members) acc += sample_values[i](tok, c);
                    out.rows(row, c) = acc / static_cast<double>(members.size());
                }
                out.provenance.emplace_back(cond, static_cast<int>(tok));
            }
        }
    };
    const auto class_rows = [&](PooledBatch& out) {
        for (const auto& [cond, members] : groups) {
            const std::size_t row = out.rows.rows;
            out.rows.rows += 1;
            out.rows.data.resize(out.rows.rows * d, 0.0);
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (const std::size_t i : members) {
                    for (std::size_t tok = 0; tok < t; ++tok) acc += sample_values[i](tok, c);
                }
                out.rows(row, c) = acc / static_cast<double>(members.size() * t);
            }
            out.provenance.emplace_back(cond, -1);
        }
    };

    PooledBatch out;
    out.rows = Matrix(0, d);
    switch (mode) {
        case PoolingMode::TokenPool:
            token_rows(out);
            break;
        case PoolingMode::ClassPool:
            class_rows(out);
            break;
        case PoolingMode::Mixed:
            token_rows(out);
            class_rows(out);
            break;
    }
    return out;
}

PairedBatch make_paired(const PooledBatch& a, const PooledBatch& b) {
    if (a.provenance != b.provenance) throw std::invalid_argument("make_paired: provenance mismatch");
    return {a.rows, b.rows, a.provenance};
}

}  // namespace tcclab
