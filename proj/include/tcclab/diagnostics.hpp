#pragma once

#include <cstdint>
#include <vector>

#include "tcclab/cache.hpp"
#include "tcclab/denoiser.hpp"
#include "tcclab/trajectory.hpp"

namespace tcclab {

// How far a run drifts from the matching full-computation run of the same
// seeds. All deviations are relative Frobenius norms with every sample
// stacked: sqrt(sum ||diff||^2) / sqrt(sum ||reference||^2).
struct DeviationReport {
    double endpoint_rel_dev = 0.0;
    std::vector<std::pair<int, double>> per_step;       // (step_index, deviation)
    std::vector<std::pair<SiteId, double>> per_site;    // sites tapped in both runs
};

DeviationReport deviation(const RunTrace& full_run, const RunTrace& method_run);

// Analytical multiply-add accounting (1 multiply-add = 2 FLOPs), counted per
// sample over one sampling run. Only attention/MLP module work and operator
// applications are modeled; reused modules contribute zero:
//   fresh attention        8*T*d^2 + 4*T^2*d
//   fresh MLP              4*T*d*d_mlp
//   token-level fresh row  1/T of the module cost, times the recomputed rows
//   operator application   2*T*(d^2 + 2d)
struct FlopsReport {
    std::uint64_t fresh_module_flops = 0;
    std::uint64_t cached_module_flops = 0;  // reuse is free under this model
    std::uint64_t calibration_flops = 0;
    std::uint64_t total_flops = 0;      // fresh + calibration
    std::uint64_t full_run_flops = 0;   // same config, policy None, no pack
    double ratio_vs_full = 0.0;         // total_flops / full_run_flops
    double module_ratio = 0.0;          // fresh_module_flops / full_run_flops
};

FlopsReport count_flops(const DenoiserConfig& config, const NoiseSchedule& schedule,
                        const CachePolicy& policy, const CalibrationPack* pack = nullptr);

// Within-label dispersion of module outputs: per site, the across-sample
// population standard deviation and mean of each (token, channel) cell,
// RMS-combined within each condition group and across groups.
// ratio = within_std_rms / class_mean_rms, +inf when the mean RMS is zero
// while the std is not. Requires >= 2 samples per condition.
struct DispersionRow {
    int step_index = 0;
    int layer = 0;
    ModuleKind kind = ModuleKind::Attention;
    double within_std_rms = 0.0;
    double class_mean_rms = 0.0;
    double ratio = 0.0;
};

struct DispersionStepSummary {
    int step_index = 0;
    double fraction_above_one = 0.0;       // all modules of the step
    double fraction_attention = 0.0;
    double fraction_mlp = 0.0;
};

struct DispersionReport {
    std::vector<DispersionRow> rows;                  // step desc, layer asc, attn before MLP
    std::vector<DispersionStepSummary> steps;
};

// `trace` must carry taps for every site it reports on (typically a full run
// tapping all sites); conditions[i] labels sample i.
DispersionReport within_label_dispersion(const RunTrace& trace,
                                         const std::vector<int>& conditions);

}  // namespace tcclab
