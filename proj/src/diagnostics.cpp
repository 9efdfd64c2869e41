#include "tcclab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace tcclab {

namespace {

double stacked_rel_dev(const std::vector<Matrix>& values, const std::vector<Matrix>& reference) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double diff = frobenius_norm(values[i] - reference[i]);
        const double ref = frobenius_norm(reference[i]);
        num += diff * diff;
        den += ref * ref;
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num) / std::sqrt(den);
}

}  // namespace

DeviationReport deviation(const RunTrace& full_run, const RunTrace& method_run) {
    if (full_run.steps != method_run.steps) {
        throw std::invalid_argument("deviation: runs cover different steps");
    }
    if (full_run.latents.empty()) throw std::invalid_argument("deviation: empty runs");

    DeviationReport report;
    for (std::size_t p = 0; p < full_run.steps.size(); ++p) {
        if (full_run.latents[p].size() != method_run.latents[p].size()) {
            throw std::invalid_argument("deviation: sample count mismatch");
        }
        report.per_step.emplace_back(full_run.steps[p],
                                     stacked_rel_dev(method_run.latents[p], full_run.latents[p]));
    }
    report.endpoint_rel_dev = report.per_step.back().second;

    for (const auto& [site, reference] : full_run.taps) {
        const auto it = method_run.taps.find(site);
        if (it == method_run.taps.end()) continue;
        double acc = 0.0;
        for (std::size_t i = 0; i < reference.size(); ++i) {
            const double diff = frobenius_norm(it->second[i] - reference[i]);
            acc += diff * diff;
        }
        report.per_site.emplace_back(site, std::sqrt(acc));
    }
    return report;
}

FlopsReport count_flops(const DenoiserConfig& config, const NoiseSchedule& schedule,
                        const CachePolicy& policy, const CalibrationPack* pack) {
    validate_policy(policy);
    const std::uint64_t t = config.n_tokens;
    const std::uint64_t d = config.d_model;
    const std::uint64_t dm = config.d_mlp;
    const std::uint64_t layers = config.n_layers;

    const std::uint64_t attn_fresh = 8 * t * d * d + 4 * t * t * d;
    const std::uint64_t mlp_fresh = 4 * t * d * dm;
    const std::uint64_t attn_per_token = 8 * d * d + 4 * t * d;  // attn_fresh / t
    const std::uint64_t mlp_per_token = 4 * d * dm;
    const std::uint64_t step_fresh = layers * (attn_fresh + mlp_fresh);

    const std::size_t n_steps = schedule.n_steps();
    FlopsReport report;
    report.full_run_flops = static_cast<std::uint64_t>(n_steps) * step_fresh;

    const std::uint64_t n_fresh_tokens = static_cast<std::uint64_t>(
        std::ceil((1.0 - policy.token_reuse_ratio) * static_cast<double>(t)));
    for (std::size_t k = 0; k < n_steps; ++k) {
        const int step = static_cast<int>(n_steps) - 1 - static_cast<int>(k);
        const StepPlan plan = plan_step(policy, step, schedule);
        if (plan.fresh) {
            report.fresh_module_flops += step_fresh;
            continue;
        }
        switch (policy.kind) {
            case CachePolicyKind::ModuleInterval:
                break;  // whole step reused
            case CachePolicyKind::TokenLevel:
                report.fresh_module_flops +=
                    layers * n_fresh_tokens * (attn_per_token + mlp_per_token);
                break;
            case CachePolicyKind::SyntheticDistortion: {
                // non-distorted sites still compute fresh; distorted sites are
                // modeled like any other cache-side substitution (zero cost)
                for (const SiteId& site : all_sites_of_step(step, layers)) {
                    if (site_cache_affected(policy, plan, site)) continue;
                    report.fresh_module_flops +=
                        site.kind == ModuleKind::Attention ? attn_fresh : mlp_fresh;
                }
                break;
            }
            case CachePolicyKind::None:
                break;  // unreachable: None plans every step fresh
        }
    }

    if (pack != nullptr) {
        const std::uint64_t per_application = 2 * t * (d * d + 2 * d);
        report.calibration_flops = static_cast<std::uint64_t>(pack->operators.size()) * per_application;
    }
    report.cached_module_flops = 0;
    report.total_flops = report.fresh_module_flops + report.calibration_flops;
    report.ratio_vs_full =
        static_cast<double>(report.total_flops) / static_cast<double>(report.full_run_flops);
    report.module_ratio =
        static_cast<double>(report.fresh_module_flops) / static_cast<double>(report.full_run_flops);
    return report;
}

DispersionReport within_label_dispersion(const RunTrace& trace,
                                         const std::vector<int>& conditions) {
    if (trace.taps.empty()) throw std::invalid_argument("dispersion: trace has no taps");

    // condition groups by sample index, ascending condition id
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < conditions.size(); ++i) groups[conditions[i]].push_back(i);
    for (const auto& [cond, members] : groups) {
        if (members.size() < 2) throw std::invalid_argument("dispersion undefined");
    }

    // fit order: step descending, layer ascending, attention before MLP
    std::vector<SiteId> site_order;
    for (const auto& [site, values] : trace.taps) {
        if (values.size() != conditions.size()) {
            throw std::invalid_argument("dispersion: tap/sample count mismatch");
        }
        site_order.push_back(site);
    }
    std::sort(site_order.begin(), site_order.end(), [](const SiteId& a, const SiteId& b) {
        if (a.step_index != b.step_index) return a.step_index > b.step_index;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.kind < b.kind;
    });

    DispersionReport report;
    for (const SiteId& site : site_order) {
        const std::vector<Matrix>& values = trace.taps.at(site);
        const std::size_t rows = values.front().rows;
        const std::size_t cols = values.front().cols;

        double sq_std_sum = 0.0;
        double sq_mean_sum = 0.0;
        std::size_t n_cells = 0;
        for (const auto& [cond, members] : groups) {
            const double inv_n = 1.0 / static_cast<double>(members.size());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    double mean = 0.0;
                    for (const std::size_t i : members) mean += values[i](r, c);
                    mean *= inv_n;
                    double var = 0.0;  // population variance (divide by N)
                    for (const std::size_t i : members) {
                        const double diff = values[i](r, c) - mean;
                        var += diff * diff;
                    }
                    var *= inv_n;
                    sq_std_sum += var;
                    sq_mean_sum += mean * mean;
                    ++n_cells;
                }
            }
        }

        DispersionRow row;
        row.step_index = site.step_index;
        row.layer = site.layer;
        row.kind = site.kind;
        row.within_std_rms = std::sqrt(sq_std_sum / static_cast<double>(n_cells));
        row.class_mean_rms = std::sqrt(sq_mean_sum / static_cast<double>(n_cells));
        if (row.class_mean_rms == 0.0) {
            row.ratio = row.within_std_rms == 0.0 ? 0.0
                                                  : std::numeric_limits<double>::infinity();
        } else {
            row.ratio = row.within_std_rms / row.class_mean_rms;
        }
        report.rows.push_back(row);
    }

    // per-step fractions of modules with ratio > 1, overall and per kind
    for (std::size_t i = 0; i < report.rows.size();) {
        const int step = report.rows[i].step_index;
        std::size_t all = 0, above = 0, attn = 0, attn_above = 0, mlp = 0, mlp_above = 0;
        for (; i < report.rows.size() && report.rows[i].step_index == step; ++i) {
            const DispersionRow& row = report.rows[i];
            const bool over = row.ratio > 1.0;
            ++all;
            above += over ? 1 : 0;
            if (row.kind == ModuleKind::Attention) {
                ++attn;
                attn_above += over ? 1 : 0;
            } else {
                ++mlp;
                mlp_above += over ? 1 : 0;
            }
        }
        DispersionStepSummary summary;
        summary.step_index = step;
        summary.fraction_above_one = static_cast<double>(above) / static_cast<double>(all);
        summary.fraction_attention =
            attn == 0 ? 0.0 : static_cast<double>(attn_above) / static_cast<double>(attn);
        summary.fraction_mlp =
            mlp == 0 ? 0.0 : static_cast<double>(mlp_above) / static_cast<double>(mlp);
        report.steps.push_back(summary);
    }
    return report;
}

}  // namespace tcclab
