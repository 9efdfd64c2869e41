#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "tcclab/denoiser.hpp"
#include "tcclab/matrix.hpp"
#include "tcclab/sampler.hpp"

namespace tcclab {

enum class CachePolicyKind : std::uint8_t {
    None = 0,            // every module fresh at every step
    ModuleInterval = 1,  // whole-module reuse; fresh every interval_n-th step
    TokenLevel = 2,      // interval reuse, but a top-scoring token slice is recomputed
    // Test-oriented policy: cached sites recompute freshly, then a known
    // similarity distortion is applied whose magnitude grows with the number
    // of cached steps already consumed. It gives calibration a ground truth
    // to recover and makes stale-trajectory fits measurably worse.
    SyntheticDistortion = 3,
};

struct DistortionConfig {
    double rotation_step = 0.03;  // radians of block rotation per unit of growth
    double scale_growth = 0.02;   // multiplicative growth per unit
    double shift_step = 0.02;     // mean-shift magnitude per unit
    int layer = -1;               // -1: every layer
    int module = -1;              // -1: both kinds, otherwise a ModuleKind value

    bool operator==(const DistortionConfig&) const = default;
};

struct CachePolicy {
    CachePolicyKind kind = CachePolicyKind::None;
    int interval_n = 2;              // ModuleInterval/TokenLevel/SyntheticDistortion
    double token_reuse_ratio = 0.9;  // TokenLevel: fraction of tokens reused
    bool first_step_fresh = true;    // invariant; the interval rule guarantees it
    DistortionConfig distortion;     // SyntheticDistortion only

    bool operator==(const CachePolicy&) const = default;
};

void validate_policy(const CachePolicy& policy);

// Fresh/cached decision for one reverse step. token_masks is only filled
// during token-level execution (scores need the incoming representation).
struct StepPlan {
    int step_index = 0;
    bool fresh = true;
    std::map<SiteId, std::vector<bool>> token_masks;
};

// A step is fresh iff (T_steps-1 - step_index) % interval_n == 0, i.e. the
// first reverse step is always fresh. Policy None makes every step fresh.
StepPlan plan_step(const CachePolicy& policy, int step_index, const NoiseSchedule& schedule);

// Whether a site's value comes from the cache side at this step.
bool site_cache_affected(const CachePolicy& policy, const StepPlan& plan, const SiteId& site);

// Per-(layer, module) cache slot.
struct SiteCacheEntry {
    Matrix output;             // last known per-token module outputs (uncalibrated)
    Matrix incoming_snapshot;  // residual-stream input at each token's last fresh compute
    int last_fresh_step = -1;
    std::vector<int> staleness;  // per token, steps since last fresh compute
    bool populated = false;
};

struct CacheStore {
    std::size_t n_layers = 0;
    std::size_t n_tokens = 0;
    std::size_t total_steps = 0;
    std::vector<SiteCacheEntry> entries;  // indexed [layer * 2 + kind]

    CacheStore() = default;
    CacheStore(std::size_t layers, std::size_t tokens, std::size_t steps);

    SiteCacheEntry& entry(std::size_t layer, ModuleKind kind);
    const SiteCacheEntry& entry(std::size_t layer, ModuleKind kind) const;
};

// Bookkeeping after a fresh module computation: stores output + incoming
// snapshot and resets per-token staleness.
void record_fresh(CacheStore& store, const SiteId& site, const Matrix& incoming,
                  const Matrix& output);

// Token scores are ||incoming_token - snapshot_token||_2 plus a small
// staleness tiebreak; the top ceil((1-ratio) * n_tokens) scores are marked
// fresh, ties resolved toward the lower token index.
std::vector<bool> select_fresh_tokens(const CacheStore& store, const SiteId& site,
                                      const Matrix& incoming, double reuse_ratio);

// The cache-side value consumed at a reused site. `module_fn` computes the
// fresh module output on a given incoming representation; only TokenLevel and
// SyntheticDistortion invoke it. Throws "cache not warmed" if reuse is
// requested before any fresh step populated the slot.
Matrix cache_side_value(const CachePolicy& policy, CacheStore& store, const SiteId& site,
                        const Matrix& incoming,
                        const std::function<Matrix(const Matrix&)>& module_fn,
                        std::vector<bool>* fresh_mask_out = nullptr);

// SyntheticDistortion growth factor at a step: 1 + number of cached steps
// strictly earlier in the trajectory. Pure function of (policy, schedule).
int distortion_growth(const CachePolicy& policy, int step_index, std::size_t n_steps);

// The documented distortion map itself: rows -> scale * rows * R(theta) + shift,
// with R a block-diagonal rotation of coordinate pairs.
Matrix apply_distortion(const Matrix& value, const DistortionConfig& cfg, int growth);

}  // namespace tcclab
