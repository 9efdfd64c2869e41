#include "tcclab/trajectory.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tcclab/parallel.hpp"

namespace tcclab {

const CalibrationOperator* CalibrationPack::find(const SiteId& site) const {
    for (const CalibrationOperator& op : operators) {
        if (op.site == site) return &op;
    }
    return nullptr;
}

TrajectoryHistory init_history(HistoryMode mode, const Denoiser& denoiser,
                               const NoiseSchedule& schedule,
                               const std::vector<std::uint64_t>& seeds,
                               const std::vector<int>& conditions) {
    if (seeds.empty()) throw std::invalid_argument("init_history: no samples");
    if (seeds.size() != conditions.size()) {
        throw std::invalid_argument("init_history: seeds/conditions count mismatch");
    }
    TrajectoryHistory hist;
    hist.mode = mode;
    hist.samples.resize(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        SeededRng rng(seeds[i]);
        hist.samples[i] = init_latent(rng, denoiser.config(), conditions[i]);
    }
    if (mode != HistoryMode::Full) {
        hist.stores.assign(seeds.size(), CacheStore(denoiser.config().n_layers,
                                                    denoiser.config().n_tokens, schedule.n_steps()));
    }
    return hist;
}

namespace {

void put_u8(std::string& s, std::uint8_t v) { s.push_back(static_cast<char>(v)); }

void put_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& s, std::int32_t v) {
    const auto u = static_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<std::uint64_t>(v)); }

void put_matrix(std::string& s, const Matrix& m) {
    put_u64(s, m.rows);
    put_u64(s, m.cols);
    for (double v : m.data) put_f64(s, v);
}

}  // namespace

std::string serialize_history(const TrajectoryHistory& hist) {
    std::string s;
    put_u8(s, static_cast<std::uint8_t>(hist.mode));
    put_u64(s, hist.cursor);
    put_u64(s, hist.samples.size());
    for (const LatentState& sample : hist.samples) {
        put_i32(s, sample.condition_id);
        put_matrix(s, sample.x);
    }
    put_u64(s, hist.stores.size());
    for (const CacheStore& store : hist.stores) {
        put_u64(s, store.n_layers);
        put_u64(s, store.n_tokens);
        put_u64(s, store.total_steps);
        for (const SiteCacheEntry& e : store.entries) {
            put_u8(s, e.populated ? 1 : 0);
            put_i32(s, e.last_fresh_step);
            for (int st : e.staleness) put_i32(s, st);
            put_matrix(s, e.output);
            put_matrix(s, e.incoming_snapshot);
        }
    }
    return s;
}

namespace {

void require_not_exhausted(const TrajectoryHistory& hist, const NoiseSchedule& schedule) {
    if (hist.exhausted(schedule)) throw std::runtime_error("trajectory exhausted");
}

}  // namespace

std::vector<std::vector<SiteTap>> advance_full(TrajectoryHistory& hist, const Denoiser& denoiser,
                                               const NoiseSchedule& schedule,
                                               const std::vector<SiteId>& tap_sites) {
    require_not_exhausted(hist, schedule);
    const int step = hist.step_index(schedule);
    const double abar_t = schedule.abar_at(hist.cursor);
    const double abar_prev = schedule.abar_after(hist.cursor);

    std::vector<std::vector<SiteTap>> taps(hist.samples.size());
    for_each_index(hist.samples.size(), [&](std::size_t i) {
        ForwardResult fwd = denoiser.forward_with_provider(hist.samples[i], step, nullptr, &tap_sites);
        hist.samples[i].x = ddim_step(hist.samples[i].x, fwd.eps_pred, abar_t, abar_prev);
        taps[i] = std::move(fwd.taps);
    });
    hist.cursor += 1;
    return taps;
}

namespace {

// enforce_coverage guards committed advances: a cached in-window site whose
// (layer, kind) pair the pack covers elsewhere must have an operator for this
// step. Estimation probes run without it — the current step's operators are
// fitted from the probe itself, so their absence is expected there.
std::vector<std::vector<SiteTap>> advance_cache_side_impl(TrajectoryHistory& hist,
                                                          const Denoiser& denoiser,
                                                          const NoiseSchedule& schedule,
                                                          const CachePolicy& policy,
                                                          const CalibrationPack& pack,
                                                          const std::vector<SiteId>& tap_sites,
                                                          bool enforce_coverage) {
    if (hist.mode == HistoryMode::Full) {
        throw std::invalid_argument("advance_cache_side: history has no cache stores");
    }
    require_not_exhausted(hist, schedule);
    validate_policy(policy);
    const int step = hist.step_index(schedule);
    const StepPlan base_plan = plan_step(policy, step, schedule);
    const double abar_t = schedule.abar_at(hist.cursor);
    const double abar_prev = schedule.abar_after(hist.cursor);

    // (layer, kind) pairs covered anywhere in the pack; a cached in-window
    // site of a covered pair without an operator for this step means the pack
    // is truncated or was built against a different schedule
    const std::size_t n_layers = denoiser.config().n_layers;
    std::vector<bool> covered(n_layers * 2, false);
    for (const CalibrationOperator& op : pack.operators) {
        const std::size_t idx =
            static_cast<std::size_t>(op.site.layer) * 2 + static_cast<std::size_t>(op.site.kind);
        if (idx < covered.size()) covered[idx] = true;
    }

    std::vector<std::vector<SiteTap>> taps(hist.samples.size());
    for_each_index(hist.samples.size(), [&](std::size_t i) {
        CacheStore& store = hist.stores[i];
        StepPlan plan = base_plan;
        const SiteValueProvider provider = [&](const SiteId& site, const Matrix& incoming) -> Matrix {
            const auto module_fn = [&](const Matrix& input) {
                return denoiser.module_output(static_cast<std::size_t>(site.layer), site.kind, input);
            };
            if (!site_cache_affected(policy, plan, site)) {
                Matrix fresh = module_fn(incoming);
                if (policy.kind == CachePolicyKind::ModuleInterval ||
                    policy.kind == CachePolicyKind::TokenLevel) {
                    record_fresh(store, site, incoming, fresh);
                }
                return fresh;
            }
            std::vector<bool> mask;
            const bool token_level = policy.kind == CachePolicyKind::TokenLevel;
            Matrix raw = cache_side_value(policy, store, site, incoming, module_fn,
                                          token_level ? &mask : nullptr);
            if (token_level) plan.token_masks[site] = std::move(mask);
            if (pack.in_window(step)) {
                if (const CalibrationOperator* op = pack.find(site)) return apply(*op, raw);
                const std::size_t idx = static_cast<std::size_t>(site.layer) * 2 +
                                        static_cast<std::size_t>(site.kind);
                if (enforce_coverage && covered[idx]) {
                    throw std::runtime_error("missing operator for cached site inside calibration window");
                }
            }
            return raw;
        };
        ForwardResult fwd = denoiser.forward_with_provider(hist.samples[i], step, &provider, &tap_sites);
        hist.samples[i].x = ddim_step(hist.samples[i].x, fwd.eps_pred, abar_t, abar_prev);
        taps[i] = std::move(fwd.taps);
    });
    hist.cursor += 1;
    return taps;
}

}  // namespace

std::vector<std::vector<SiteTap>> advance_cache_side(TrajectoryHistory& hist,
                                                     const Denoiser& denoiser,
                                                     const NoiseSchedule& schedule,
                                                     const CachePolicy& policy,
                                                     const CalibrationPack& pack,
                                                     const std::vector<SiteId>& tap_sites) {
    return advance_cache_side_impl(hist, denoiser, schedule, policy, pack, tap_sites, true);
}

std::vector<std::vector<SiteTap>> probe_advance(const TrajectoryHistory& hist,
                                                const Denoiser& denoiser,
                                                const NoiseSchedule& schedule,
                                                const CachePolicy& policy,
                                                const CalibrationPack& pack,
                                                std::uint64_t expected_fingerprint,
                                                const std::vector<SiteId>& tap_sites) {
    if (pack.fingerprint != expected_fingerprint) {
        throw std::runtime_error("pack fingerprint mismatch");
    }
    TrajectoryHistory scratch = hist;  // the real history is never touched
    return advance_cache_side_impl(scratch, denoiser, schedule, policy, pack, tap_sites, false);
}

void calibrated_advance(TrajectoryHistory& hist, const Denoiser& denoiser,
                        const NoiseSchedule& schedule, const CachePolicy& policy,
                        const CalibrationPack& pack) {
    advance_cache_side(hist, denoiser, schedule, policy, pack, {});
}

namespace {

void validate_setup(const Denoiser& denoiser, const NoiseSchedule& schedule,
                    const EstimationSetup& setup) {
    validate_policy(setup.policy);
    const int n = static_cast<int>(schedule.n_steps());
    if (setup.window_first >= setup.window_last) {  // non-empty window
        if (setup.window_last < 0 || setup.window_first >= n) {
            throw std::invalid_argument("estimation window outside schedule");
        }
    }
    if (setup.sample_seeds.empty()) throw std::invalid_argument("estimation needs samples");
    if (setup.sample_seeds.size() != setup.sample_conditions.size()) {
        throw std::invalid_argument("sample seeds/conditions count mismatch");
    }
    for (int cond : setup.sample_conditions) {
        if (cond < 0 || static_cast<std::size_t>(cond) >= denoiser.config().n_conditions) {
            throw std::invalid_argument("sample condition out of range");
        }
    }
    if (setup.alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
    if (!(setup.epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

CalibrationPack pack_shell(const EstimationSetup& setup) {
    CalibrationPack pack;
    pack.window_first = setup.window_first;
    pack.window_last = setup.window_last;
    pack.alpha = setup.alpha;
    pack.variant = setup.variant;
    pack.pooling = setup.pooling;
    pack.fingerprint = setup.fingerprint;
    return pack;
}

// Cache-affected sites of this step that pass the filter and lie inside the
// window, in fit order (layer ascending, attention before MLP). Fresh steps
// yield nothing: their sites consume fresh values.
std::vector<SiteId> calibration_sites_for_step(const CachePolicy& policy, const StepPlan& plan,
                                               const SiteFilter& filter, int window_first,
                                               int window_last, std::size_t n_layers) {
    std::vector<SiteId> sites;
    if (plan.step_index > window_first || plan.step_index < window_last) return sites;
    for (const SiteId& site : all_sites_of_step(plan.step_index, n_layers)) {
        if (!filter.allows(site.kind)) continue;
        if (!site_cache_affected(policy, plan, site)) continue;
        sites.push_back(site);
    }
    return sites;
}

std::vector<Matrix> taps_for_site(const std::vector<std::vector<SiteTap>>& taps,
                                  const SiteId& site) {
    std::vector<Matrix> values;
    values.reserve(taps.size());
    for (const std::vector<SiteTap>& sample_taps : taps) {
        const auto it = std::find_if(sample_taps.begin(), sample_taps.end(),
                                     [&](const SiteTap& t) { return t.site == site; });
        if (it == sample_taps.end()) throw std::logic_error("tap missing for requested site");
        values.push_back(it->value);
    }
    return values;
}

std::vector<Matrix> endpoints_of(const TrajectoryHistory& hist) {
    std::vector<Matrix> out;
    out.reserve(hist.samples.size());
    for (const LatentState& s : hist.samples) out.push_back(s.x);
    return out;
}

}  // namespace

PriorEstimationResult estimate_priors(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                      const EstimationSetup& setup) {
    validate_setup(denoiser, schedule, setup);
    TrajectoryHistory full = init_history(HistoryMode::Full, denoiser, schedule,
                                          setup.sample_seeds, setup.sample_conditions);
    TrajectoryHistory corr = init_history(HistoryMode::Corrected, denoiser, schedule,
                                          setup.sample_seeds, setup.sample_conditions);
    CalibrationPack pack = pack_shell(setup);
    const std::size_t n = schedule.n_steps();

    for (std::size_t k = 0; k < n; ++k) {
        const int step = static_cast<int>(n) - 1 - static_cast<int>(k);
        const StepPlan plan = plan_step(setup.policy, step, schedule);
        const std::vector<SiteId> sites =
            calibration_sites_for_step(setup.policy, plan, setup.sites, setup.window_first,
                                       setup.window_last, denoiser.config().n_layers);
        if (sites.empty()) {
            advance_full(full, denoiser, schedule, {});
            advance_cache_side(corr, denoiser, schedule, setup.policy, pack, {});
            continue;
        }
        const auto reference_taps = advance_full(full, denoiser, schedule, sites);
        const auto probe_taps = probe_advance(corr, denoiser, schedule, setup.policy, pack,
                                              setup.fingerprint, sites);
        for (const SiteId& site : sites) {
            const PooledBatch ref = pool(taps_for_site(reference_taps, site),
                                         setup.sample_conditions, setup.pooling);
            const PooledBatch probed = pool(taps_for_site(probe_taps, site),
                                            setup.sample_conditions, setup.pooling);
            const PairedBatch paired = make_paired(ref, probed);
            CalibrationOperator op = fit(paired.a, paired.b, setup.alpha, setup.variant,
                                         setup.epsilon);
            op.site = site;
            pack.operators.push_back(std::move(op));
        }
        advance_cache_side(corr, denoiser, schedule, setup.policy, pack, {});
    }

    PriorEstimationResult result;
    result.pack = std::move(pack);
    result.corrected_endpoints = endpoints_of(corr);
    result.full_endpoints = endpoints_of(full);
    return result;
}

PriorEstimationResult estimate_priors_oneshot(const Denoiser& denoiser,
                                              const NoiseSchedule& schedule,
                                              const EstimationSetup& setup) {
    validate_setup(denoiser, schedule, setup);
    TrajectoryHistory full = init_history(HistoryMode::Full, denoiser, schedule,
                                          setup.sample_seeds, setup.sample_conditions);
    TrajectoryHistory plain = init_history(HistoryMode::CacheSide, denoiser, schedule,
                                           setup.sample_seeds, setup.sample_conditions);
    CalibrationPack shell = pack_shell(setup);  // never gains operators
    const std::size_t n = schedule.n_steps();

    std::vector<SiteId> fit_order;
    std::map<SiteId, std::vector<Matrix>> reference_by_site;
    std::map<SiteId, std::vector<Matrix>> cache_by_site;
    for (std::size_t k = 0; k < n; ++k) {
        const int step = static_cast<int>(n) - 1 - static_cast<int>(k);
        const StepPlan plan = plan_step(setup.policy, step, schedule);
        const std::vector<SiteId> sites =
            calibration_sites_for_step(setup.policy, plan, setup.sites, setup.window_first,
                                       setup.window_last, denoiser.config().n_layers);
        const auto reference_taps = advance_full(full, denoiser, schedule, sites);
        const auto cache_taps = advance_cache_side(plain, denoiser, schedule, setup.policy,
                                                   shell, sites);
        for (const SiteId& site : sites) {
            fit_order.push_back(site);
            reference_by_site[site] = taps_for_site(reference_taps, site);
            cache_by_site[site] = taps_for_site(cache_taps, site);
        }
    }

    CalibrationPack pack = pack_shell(setup);
    for (const SiteId& site : fit_order) {
        const PooledBatch ref = pool(reference_by_site[site], setup.sample_conditions,
                                     setup.pooling);
        const PooledBatch cached = pool(cache_by_site[site], setup.sample_conditions,
                                        setup.pooling);
        const PairedBatch paired = make_paired(ref, cached);
        CalibrationOperator op = fit(paired.a, paired.b, setup.alpha, setup.variant,
                                     setup.epsilon);
        op.site = site;
        pack.operators.push_back(std::move(op));
    }

    PriorEstimationResult result;
    result.pack = std::move(pack);
    result.corrected_endpoints = endpoints_of(plain);
    result.full_endpoints = endpoints_of(full);
    return result;
}

namespace {

void merge_taps(RunTrace& trace, const std::vector<std::vector<SiteTap>>& step_taps) {
    const std::size_t n_samples = step_taps.size();
    for (std::size_t i = 0; i < n_samples; ++i) {
        for (const SiteTap& tap : step_taps[i]) {
            auto& slot = trace.taps[tap.site];
            if (slot.empty()) slot.resize(n_samples);
            slot[i] = tap.value;
        }
    }
}

void record_step(RunTrace& trace, const TrajectoryHistory& hist, int step) {
    trace.steps.push_back(step);
    std::vector<Matrix> latents;
    latents.reserve(hist.samples.size());
    for (const LatentState& s : hist.samples) latents.push_back(s.x);
    trace.latents.push_back(std::move(latents));
}

}  // namespace

RunTrace run_full_trajectory(const Denoiser& denoiser, const NoiseSchedule& schedule,
                             const std::vector<std::uint64_t>& seeds,
                             const std::vector<int>& conditions,
                             const std::vector<SiteId>& tap_sites) {
    TrajectoryHistory hist = init_history(HistoryMode::Full, denoiser, schedule, seeds, conditions);
    RunTrace trace;
    while (!hist.exhausted(schedule)) {
        const int step = hist.step_index(schedule);
        merge_taps(trace, advance_full(hist, denoiser, schedule, tap_sites));
        record_step(trace, hist, step);
    }
    return trace;
}

RunTrace run_cache_trajectory(const Denoiser& denoiser, const NoiseSchedule& schedule,
                              const CachePolicy& policy, const CalibrationPack& pack,
                              std::uint64_t expected_fingerprint,
                              const std::vector<std::uint64_t>& seeds,
                              const std::vector<int>& conditions,
                              const std::vector<SiteId>& tap_sites) {
    if (pack.fingerprint != expected_fingerprint) {
        throw std::runtime_error("pack fingerprint mismatch");
    }
    TrajectoryHistory hist = init_history(HistoryMode::Corrected, denoiser, schedule, seeds,
                                          conditions);
    RunTrace trace;
    while (!hist.exhausted(schedule)) {
        const int step = hist.step_index(schedule);
        merge_taps(trace, advance_cache_side(hist, denoiser, schedule, policy, pack, tap_sites));
        record_step(trace, hist, step);
    }
    return trace;
}

InferenceResult run_calibrated_inference(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                         const CachePolicy& policy, const CalibrationPack& pack,
                                         std::uint64_t expected_fingerprint,
                                         const std::vector<std::uint64_t>& seeds,
                                         const std::vector<int>& conditions,
                                         const std::vector<SiteId>& mismatch_sites) {
    InferenceResult result;
    result.trace = run_cache_trajectory(denoiser, schedule, policy, pack, expected_fingerprint,
                                        seeds, conditions, mismatch_sites);
    if (!mismatch_sites.empty()) {
        const RunTrace full = run_full_trajectory(denoiser, schedule, seeds, conditions,
                                                  mismatch_sites);
        for (const SiteId& site : mismatch_sites) {
            const auto consumed = result.trace.taps.find(site);
            const auto reference = full.taps.find(site);
            if (consumed == result.trace.taps.end() || reference == full.taps.end()) continue;
            double acc = 0.0;
            for (std::size_t i = 0; i < consumed->second.size(); ++i) {
                const Matrix diff = consumed->second[i] - reference->second[i];
                const double norm = frobenius_norm(diff);
                acc += norm * norm;
            }
            result.mismatch_log.push_back({site, std::sqrt(acc)});
        }
    }
    return result;
}

double endpoint_deviation(const std::vector<Matrix>& endpoints,
                          const std::vector<Matrix>& full_endpoints) {
    if (endpoints.size() != full_endpoints.size()) {
        throw std::invalid_argument("endpoint_deviation: sample count mismatch");
    }
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < endpoints.size(); ++i) {
        const double diff = frobenius_norm(endpoints[i] - full_endpoints[i]);
        const double ref = frobenius_norm(full_endpoints[i]);
        num += diff * diff;
        den += ref * ref;
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num) / std::sqrt(den);
}

std::vector<AlphaSweepRow> sweep_alpha(const Denoiser& denoiser, const NoiseSchedule& schedule,
                                       const EstimationSetup& setup,
                                       const std::vector<double>& alphas) {
    const RunTrace full = run_full_trajectory(denoiser, schedule, setup.sample_seeds,
                                              setup.sample_conditions, {});
    CalibrationPack empty = pack_shell(setup);
    empty.operators.clear();
    const RunTrace plain = run_cache_trajectory(denoiser, schedule, setup.policy, empty,
                                                setup.fingerprint, setup.sample_seeds,
                                                setup.sample_conditions, {});
    const double cache_dev = endpoint_deviation(plain.endpoints(), full.endpoints());

    std::vector<AlphaSweepRow> rows;
    rows.reserve(alphas.size());
    for (const double alpha : alphas) {
        EstimationSetup varied = setup;
        varied.alpha = alpha;
        const PriorEstimationResult tcc = estimate_priors(denoiser, schedule, varied);
        const PriorEstimationResult oneshot = estimate_priors_oneshot(denoiser, schedule, varied);
        const RunTrace tcc_run = run_cache_trajectory(denoiser, schedule, varied.policy, tcc.pack,
                                                      varied.fingerprint, varied.sample_seeds,
                                                      varied.sample_conditions, {});
        const RunTrace oneshot_run = run_cache_trajectory(denoiser, schedule, varied.policy,
                                                          oneshot.pack, varied.fingerprint,
                                                          varied.sample_seeds,
                                                          varied.sample_conditions, {});
        rows.push_back({alpha, cache_dev,
                        endpoint_deviation(tcc_run.endpoints(), full.endpoints()),
                        endpoint_deviation(oneshot_run.endpoints(), full.endpoints())});
    }
    return rows;
}

}  // namespace tcclab
