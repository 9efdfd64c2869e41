#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tcclab/denoiser.hpp"
#include "tcclab/matrix.hpp"

namespace tcclab {

enum class CalibrationVariant : std::uint8_t {
    Full = 0,        // rotation + scale + shift
    ScaleShift = 1,  // rotation pinned to identity
    ShiftOnly = 2,   // scale pinned to 1, rotation pinned to identity
};

enum class PoolingMode : std::uint8_t {
    ClassPool = 0,  // one row per condition (mean over samples and tokens)
    TokenPool = 1,  // one row per (condition, token position) (mean over samples)
    Mixed = 2,      // TokenPool rows followed by ClassPool rows
};

// Closed-form scaled-Procrustes map fitted between row-aligned batches
// A (reference) and B (cache side):
//   T(h) = mu_a + scale * (h - mu_b) * rotation
// and the blended correction actually applied at strength alpha:
//   C(h) = h + alpha * (T(h) - h)
struct CalibrationOperator {
    SiteId site;
    std::vector<double> mu_a;
    std::vector<double> mu_b;
    Matrix rotation;    // d x d orthogonal; identity unless variant == Full
    double scale = 1.0;  // >= 0
    double alpha = 1.0;
    CalibrationVariant variant = CalibrationVariant::Full;
};

// Fits T from rows of `a` against rows of `b` (same shape, >= 1 row):
// center both, then per variant
//   Full:       B_c^T A_c = U S V^T, rotation = U V^T,
//               scale = <A_c, B_c R> / (||B_c R||_F^2 + epsilon)
//   ScaleShift: rotation = I, scale = <A_c, B_c> / (||B_c||_F^2 + epsilon)
//   ShiftOnly:  rotation = I, scale = 1
// A zero cross-covariance (e.g. all rows of b identical) degenerates to
// rotation = I. Negative scales clamp to 0. Reflections in U V^T pass
// through unchanged.
CalibrationOperator fit(const Matrix& a, const Matrix& b, double alpha,
                        CalibrationVariant variant, double epsilon = 1e-8);

// C(h) row by row; alpha == 0 returns h bitwise unchanged.
Matrix apply(const CalibrationOperator& op, const Matrix& h);

// ||a - T(b)||_F with the full-strength transform, regardless of op.alpha.
double residual(const CalibrationOperator& op, const Matrix& a, const Matrix& b);

// Row provenance: (condition id, token position) with token -1 for rows pooled
// over all tokens.
struct PooledBatch {
    Matrix rows;
    std::vector<std::pair<int, int>> provenance;
};

// Row-aligned fitting pair; `a` and `b` rows share one provenance.
struct PairedBatch {
    Matrix a;
    Matrix b;
    std::vector<std::pair<int, int>> provenance;
};

// Pools per-sample site values into fitting rows. sample_values[i] carries the
// tap of sample i (all the same shape), condition_ids[i] its condition.
// Conditions are processed in ascending id order and averaged in sample index
// order, so pooling is deterministic. Throws on an empty collection.
PooledBatch pool(const std::vector<Matrix>& sample_values, const std::vector<int>& condition_ids,
                 PoolingMode mode);

// Pairs two pools of the same provenance (throws otherwise).
PairedBatch make_paired(const PooledBatch& a, const PooledBatch& b);

}  // namespace tcclab
