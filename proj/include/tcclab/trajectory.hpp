#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tcclab/cache.hpp"
#include "tcclab/calibration.hpp"
#include "tcclab/denoiser.hpp"
#include "tcclab/sampler.hpp"

namespace tcclab {

enum class HistoryMode : std::uint8_t {
    Full = 0,       // every module fresh
    CacheSide = 1,  // cache policy active, no calibration intended
    Corrected = 2,  // cache policy active, operators applied as they exist
};

// Lockstep batch of trajectories: one latent (and cache store, for cache-side
// modes) per sample, advancing through the schedule behind a shared cursor.
struct TrajectoryHistory {
    HistoryMode mode = HistoryMode::Full;
    std::vector<LatentState> samples;
    std::vector<CacheStore> stores;  // empty in Full mode
    std::size_t cursor = 0;          // position in schedule.sample_steps

    int step_index(const NoiseSchedule& schedule) const {
        return static_cast<int>(schedule.n_steps()) - 1 - static_cast<int>(cursor);
    }
    bool exhausted(const NoiseSchedule& schedule) const { return cursor >= schedule.n_steps(); }
};

// Which module kinds participate in calibration.
struct SiteFilter {
    bool attention = true;
    bool mlp = true;

    bool empty() const { return !attention && !mlp; }
    bool allows(ModuleKind kind) const {
        return kind == ModuleKind::Attention ? attention : mlp;
    }
    bool operator==(const SiteFilter&) const = default;
};

// Calibration operators for the cached steps of a reverse-step window
// [window_last, window_first] (inclusive, window_first >= window_last; an
// inverted pair means an empty window). Operators are stored in fit order:
// step descending, layer ascending, attention before MLP.
struct CalibrationPack {
    std::vector<CalibrationOperator> operators;
    int window_first = -1;
    int window_last = 0;
    double alpha = 1.0;
    CalibrationVariant variant = CalibrationVariant::Full;
    PoolingMode pooling = PoolingMode::TokenPool;
    std::uint64_t fingerprint = 0;  // hash of (model, schedule, cache policy)

    bool in_window(int step_index) const {
        return step_index <= window_first && step_index >= window_last;
    }
    const CalibrationOperator* find(const SiteId& site) const;
};

TrajectoryHistory init_history(HistoryMode mode, const Denoiser& denoiser,
                               const NoiseSchedule& schedule,
                               const std::vector<std::uint64_t>& seeds,
                               const std::vector<int>& conditions);

// In-memory byte image of a history (latents, cache stores, cursor), used for
// exact no-mutation checks.
std::string serialize_history(const TrajectoryHistory& hist);

// One full-computation step for every sample; returns the requested taps of
// this step, per sample.
std::vector<std::vector<SiteTap>> advance_full(TrajectoryHistory& hist, const Denoiser& denoiser,
                                               const NoiseSchedule& schedule,
                                               const std::vector<SiteId>& tap_sites);

// One cache-side step: reused sites consume cache_side_value, calibrated by
// the pack's operator when the step lies inside the pack window and an
// operator for that site exists. The store keeps raw (uncalibrated) outputs;
// corrections act only at consumption time. Taps report consumed values.
//
// Inside the window, a cached site whose (layer, kind) appears elsewhere in
// the pack but has no operator at this step throws "missing operator" — that
// is the signature of a truncated or mismatched pack.
std::vector<std::vector<SiteTap>> advance_cache_side(TrajectoryHistory& hist,
                                                     const Denoiser& denoiser,
                                                     const NoiseSchedule& schedule,
                                                     const CachePolicy& policy,
                                                     const CalibrationPack& pack,
                                                     const std::vector<SiteId>& tap_sites);

// Cache-side step on a copy of the history: records what the cache side WOULD
// consume at tap_sites without committing anything. The history bytes are
// untouched. Verifies pack.fingerprint against expected_fingerprint. Unlike a
// committed advance, a probe tolerates cached in-window sites without an
// operator (estimation fits the current step's operators from the probe).
std::vector<std::vector<SiteTap>> probe_advance(const TrajectoryHistory& hist,
                                                const Denoiser& denoiser,
                                                const NoiseSchedule& schedule,
                                                const CachePolicy& policy,
                                                const CalibrationPack& pack,
                                                std::uint64_t expected_fingerprint,
                                                const std::vector<SiteId>& tap_sites);

// advance_cache_side, discarding taps.
void calibrated_advance(TrajectoryHistory& hist, const Denoiser& denoiser,
                        const NoiseSchedule& schedule, const CachePolicy& policy,
                        const CalibrationPack& pack);

struct EstimationSetup {
    CachePolicy policy;
    int window_first = -1;
    int window_last = 0;
    SiteFilter sites;
    double alpha = 1.0;
    CalibrationVariant variant = CalibrationVariant::Full;
    PoolingMode pooling = PoolingMode::TokenPool;
    double epsilon = 1e-8;
    std::vector<std::uint64_t> sample_seeds;
    std::vector<int> sample_conditions;
    std::uint64_t fingerprint = 0;
};

struct PriorEstimationResult {
    CalibrationPack pack;
    std::vector<Matrix> corrected_endpoints;  // trajectory the operators were fitted along
    std::vector<Matrix> full_endpoints;
};

// Iterative prior estimation. Per step, when the step is cached and inside
// the window: advance the full history recording reference taps, probe the
// corrected history recording cache-side taps (no commit), fit one operator
// per selected site from the pooled pair, then advance the corrected history
// with those operators applied. All sites of a step are fitted from the one
// probe pass; operators never re-enter their own step's probe.
PriorEstimationResult estimate_priors(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                      const EstimationSetup& setup);

// One-shot baseline: identical reference taps, but every cache-side tap comes
// from the plain (never corrected) cache trajectory. Returns that plain
// trajectory's endpoints as corrected_endpoints.
PriorEstimationResult estimate_priors_oneshot(const Denoiser& denoiser,
                                              const NoiseSchedule& schedule,
                                              const EstimationSetup& setup);

// Per-step record of one run.
struct RunTrace {
    std::vector<int> steps;                      // reverse indices, descending
    std::vector<std::vector<Matrix>> latents;    // [step position][sample]
    std::map<SiteId, std::vector<Matrix>> taps;  // consumed values, per sample
    const std::vector<Matrix>& endpoints() const { return latents.back(); }
};

RunTrace run_full_trajectory(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const std::vector<std::uint64_t>& seeds,
                             const std::vector<int>& conditions,
                             const std::vector<SiteId>& tap_sites);

RunTrace run_cache_trajectory(const Denoiser& denoiser, const NoiseSchedule& schedule,
                              const CachePolicy& policy, const CalibrationPack& pack,
                              std::uint64_t expected_fingerprint,
                              const std::vector<std::uint64_t>& seeds,
                              const std::vector<int>& conditions,
                              const std::vector<SiteId>& tap_sites);

struct SiteMismatch {
    SiteId site;
    double consumed_vs_full;  // Frobenius norm over all samples stacked
};

struct InferenceResult {
    RunTrace trace;
    std::vector<SiteMismatch> mismatch_log;
};

// Calibrated sampling with a finished pack. When mismatch_sites is non-empty,
// a lockstep full-computation run of the same seeds provides the reference
// taps for the mismatch log.
InferenceResult run_calibrated_inference(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                         const CachePolicy& policy, const CalibrationPack& pack,
                                         std::uint64_t expected_fingerprint,
                                         const std::vector<std::uint64_t>& seeds,
                                         const std::vector<int>& conditions,
                                         const std::vector<SiteId>& mismatch_sites = {});

struct AlphaSweepRow {
    double alpha = 0.0;
    double cache_dev = 0.0;    // plain cache endpoint deviation (alpha-independent)
    double tcc_dev = 0.0;      // iteratively estimated pack
    double oneshot_dev = 0.0;  // one-shot baseline pack
};

// Relative endpoint deviation sqrt(sum ||x - x_full||^2) / sqrt(sum ||x_full||^2).
double endpoint_deviation(const std::vector<Matrix>& endpoints,
                          const std::vector<Matrix>& full_endpoints);

// For each alpha: estimate both packs, run calibrated inference on the
// setup's samples, and report endpoint deviations against the full run.
std::vector<AlphaSweepRow> sweep_alpha(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                       const EstimationSetup& setup,
                                       const std::vector<double>& alphas);

}  // namespace tcclab
