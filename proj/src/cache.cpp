#include "tcclab/cache.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tcclab {

void validate_policy(const CachePolicy& policy) {
    if (!policy.first_step_fresh) {
        throw std::invalid_argument("cache policy: first_step_fresh must stay true");
    }
    switch (policy.kind) {
        case CachePolicyKind::None:
            return;
        case CachePolicyKind::ModuleInterval:
        case CachePolicyKind::SyntheticDistortion:
            if (policy.interval_n < 2) {
                throw std::invalid_argument("cache policy: interval_n must be >= 2");
            }
            return;
        case CachePolicyKind::TokenLevel:
            if (policy.interval_n < 2) {
                throw std::invalid_argument("cache policy: interval_n must be >= 2");
            }
            if (!(policy.token_reuse_ratio > 0.0) || !(policy.token_reuse_ratio < 1.0)) {
                throw std::invalid_argument("cache policy: token_reuse_ratio must be in (0, 1)");
            }
            return;
    }
    throw std::invalid_argument("cache policy: unknown kind");
}

StepPlan plan_step(const CachePolicy& policy, int step_index, const NoiseSchedule& schedule) {
    validate_policy(policy);
    const int n = static_cast<int>(schedule.n_steps());
    if (step_index < 0 || step_index >= n) {
        throw std::invalid_argument("plan_step: step_index outside schedule");
    }
    StepPlan plan;
    plan.step_index = step_index;
    if (policy.kind == CachePolicyKind::None) {
        plan.fresh = true;
    } else {
        plan.fresh = (n - 1 - step_index) % policy.interval_n == 0;
    }
    return plan;
}

bool site_cache_affected(const CachePolicy& policy, const StepPlan& plan, const SiteId& site) {
    if (policy.kind == CachePolicyKind::None || plan.fresh) return false;
    if (policy.kind == CachePolicyKind::SyntheticDistortion) {
        const DistortionConfig& d = policy.distortion;
        if (d.layer >= 0 && site.layer != d.layer) return false;
        if (d.module >= 0 && static_cast<int>(site.kind) != d.module) return false;
    }
    return true;
}

CacheStore::CacheStore(std::size_t layers, std::size_t tokens, std::size_t steps)
    : n_layers(layers), n_tokens(tokens), total_steps(steps), entries(layers * 2) {
    for (auto& e : entries) e.staleness.assign(tokens, 0);
}

SiteCacheEntry& CacheStore::entry(std::size_t layer, ModuleKind kind) {
    return entries.at(layer * 2 + static_cast<std::size_t>(kind));
}

const SiteCacheEntry& CacheStore::entry(std::size_t layer, ModuleKind kind) const {
    return entries.at(layer * 2 + static_cast<std::size_t>(kind));
}

void record_fresh(CacheStore& store, const SiteId& site, const Matrix& incoming,
                  const Matrix& output) {
    SiteCacheEntry& e = store.entry(static_cast<std::size_t>(site.layer), site.kind);
    e.output = output;
    e.incoming_snapshot = incoming;
    e.last_fresh_step = site.step_index;
    std::fill(e.staleness.begin(), e.staleness.end(), 0);
    e.populated = true;
}

std::vector<bool> select_fresh_tokens(const CacheStore& store, const SiteId& site,
                                      const Matrix& incoming, double reuse_ratio) {
    const SiteCacheEntry& e = store.entry(static_cast<std::size_t>(site.layer), site.kind);
    if (!e.populated) throw std::runtime_error("cache not warmed");
    const std::size_t t = store.n_tokens;
    const double tiebreak_epsilon = 1e-12;

    std::vector<double> score(t, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < incoming.cols; ++c) {
            const double d = incoming(i, c) - e.incoming_snapshot(i, c);
            acc += d * d;
        }
        score[i] = std::sqrt(acc) + static_cast<double>(e.staleness[i]) * tiebreak_epsilon;
    }

    const std::size_t n_fresh = static_cast<std::size_t>(
        std::ceil((1.0 - reuse_ratio) * static_cast<double>(t)));
    std::vector<std::size_t> order(t);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;  // ties: lower token index first
    });

    std::vector<bool> mask(t, false);
    for (std::size_t i = 0; i < n_fresh && i < t; ++i) mask[order[i]] = true;
    return mask;
}

int distortion_growth(const CachePolicy& policy, int step_index, std::size_t n_steps) {
    const int k = static_cast<int>(n_steps) - 1 - step_index;  // steps already taken
    int cached_before = 0;
    for (int j = 0; j < k; ++j) {
        if (j % policy.interval_n != 0) ++cached_before;
    }
    return cached_before + 1;
}

Matrix apply_distortion(const Matrix& value, const DistortionConfig& cfg, int growth) {
    const double g = static_cast<double>(growth);
    const double scale = 1.0 + cfg.scale_growth * g;
    const double theta = cfg.rotation_step * g;
    const double c = std::cos(theta);
    const double s = std::sin(theta);

    Matrix out(value.rows, value.cols);
    for (std::size_t r = 0; r < value.rows; ++r) {
        // block-diagonal rotation over coordinate pairs (0,1), (2,3), ...
        std::size_t col = 0;
        for (; col + 1 < value.cols; col += 2) {
            const double x = value(r, col);
            const double y = value(r, col + 1);
            out(r, col) = c * x - s * y;
            out(r, col + 1) = s * x + c * y;
        }
        if (col < value.cols) out(r, col) = value(r, col);
        for (std::size_t cc = 0; cc < value.cols; ++cc) {
            const double shift = cfg.shift_step * g * (cc % 2 == 0 ? 1.0 : -1.0);
            out(r, cc) = scale * out(r, cc) + shift;
        }
    }
    return out;
}

Matrix cache_side_value(const CachePolicy& policy, CacheStore& store, const SiteId& site,
                        const Matrix& incoming,
                        const std::function<Matrix(const Matrix&)>& module_fn,
                        std::vector<bool>* fresh_mask_out) {
    SiteCacheEntry& e = store.entry(static_cast<std::size_t>(site.layer), site.kind);
    switch (policy.kind) {
        case CachePolicyKind::ModuleInterval: {
            if (!e.populated) throw std::runtime_error("cache not warmed");
            for (int& st : e.staleness) ++st;
            return e.output;
        }
        case CachePolicyKind::TokenLevel: {
            const std::vector<bool> mask =
                select_fresh_tokens(store, site, incoming, policy.token_reuse_ratio);
            const Matrix fresh = module_fn(incoming);
            Matrix out = e.output;
            for (std::size_t i = 0; i < store.n_tokens; ++i) {
                if (mask[i]) {
                    for (std::size_t c = 0; c < out.cols; ++c) {
                        out(i, c) = fresh(i, c);
                        e.output(i, c) = fresh(i, c);
                        e.incoming_snapshot(i, c) = incoming(i, c);
                    }
                    e.staleness[i] = 0;
                } else {
                    ++e.staleness[i];
                }
            }
            if (fresh_mask_out != nullptr) *fresh_mask_out = mask;
            return out;
        }
        case CachePolicyKind::SyntheticDistortion: {
            const int growth = distortion_growth(policy, site.step_index,
                                                 store.total_steps);
            return apply_distortion(module_fn(incoming), policy.distortion, growth);
        }
        case CachePolicyKind::None:
            break;
    }
    throw std::logic_error("cache_side_value: policy has no cache side");
}

}  // namespace tcclab
