#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tcclab/trajectory.hpp"

using namespace tcclab;

namespace {

DenoiserConfig small_model() {
    DenoiserConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_tokens = 4;
    cfg.n_heads = 2;
    cfg.d_mlp = 16;
    cfg.n_conditions = 3;
    cfg.weight_seed = 17;
    return cfg;
}

NoiseSchedule small_schedule() { return build_schedule(50, 1e-4, 2e-2, 8); }

const std::vector<std::uint64_t> kSeeds = {11, 12, 13};
const std::vector<int> kConds = {0, 1, 2};

EstimationSetup base_setup(CachePolicyKind kind) {
    EstimationSetup setup;
    setup.policy.kind = kind;
    setup.policy.interval_n = 2;
    setup.policy.token_reuse_ratio = 0.75;
    setup.window_first = 7;
    setup.window_last = 0;
    setup.alpha = 1.0;
    setup.variant = CalibrationVariant::Full;
    setup.pooling = PoolingMode::TokenPool;
    setup.sample_seeds = kSeeds;
    setup.sample_conditions = kConds;
    setup.fingerprint = 424242;
    return setup;
}

CalibrationPack shell_pack(std::uint64_t fingerprint) {
    CalibrationPack pack;
    pack.window_first = -1;
    pack.window_last = 0;
    pack.fingerprint = fingerprint;
    return pack;
}

bool operators_bitwise_equal(const CalibrationOperator& x, const CalibrationOperator& y) {
    return x.site == y.site && x.mu_a == y.mu_a && x.mu_b == y.mu_b &&
           bitwise_equal(x.rotation, y.rotation) && x.scale == y.scale &&
           x.variant == y.variant;
}

bool endpoints_bitwise_equal(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bitwise_equal(a[i], b[i])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("history initialization draws one latent per sample") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();

    const TrajectoryHistory full = init_history(HistoryMode::Full, den, sched, kSeeds, kConds);
    CHECK(full.samples.size() == 3);
    CHECK(full.stores.empty());
    CHECK(full.cursor == 0);
    CHECK(full.step_index(sched) == 7);

    const TrajectoryHistory corr = init_history(HistoryMode::Corrected, den, sched, kSeeds, kConds);
    REQUIRE(corr.stores.size() == 3);
    CHECK(corr.stores[0].n_layers == 2);
    CHECK(corr.stores[0].n_tokens == 4);
    CHECK(corr.stores[0].total_steps == 8);

    // same seed -> same latent regardless of mode
    CHECK(bitwise_equal(full.samples[1].x, corr.samples[1].x));
    CHECK(full.samples[2].condition_id == 2);

    CHECK_THROWS_AS(init_history(HistoryMode::Full, den, sched, {1, 2}, {0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(init_history(HistoryMode::Full, den, sched, {1}, {99}),
                    std::invalid_argument);
}

TEST_CASE("full advances walk the cursor and tap requested sites") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    TrajectoryHistory hist = init_history(HistoryMode::Full, den, sched, kSeeds, kConds);

    const std::vector<SiteId> taps = {SiteId{7, 0, ModuleKind::Attention},
                                      SiteId{7, 1, ModuleKind::Mlp}};
    const Matrix before = hist.samples[0].x;
    const auto got = advance_full(hist, den, sched, taps);
    CHECK(hist.cursor == 1);
    CHECK(!bitwise_equal(hist.samples[0].x, before));
    REQUIRE(got.size() == 3);
    REQUIRE(got[0].size() == 2);
    CHECK(got[0][0].site == taps[0]);
    CHECK(got[0][1].site == taps[1]);

    while (!hist.exhausted(sched)) advance_full(hist, den, sched, {});
    CHECK(hist.cursor == 8);
    CHECK_THROWS_WITH_AS(advance_full(hist, den, sched, {}),
                         doctest::Contains("trajectory exhausted"), std::runtime_error);
}

TEST_CASE("a policy-free cache run reproduces the full run bitwise") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();

    const RunTrace full = run_full_trajectory(den, sched, kSeeds, kConds, {});
    CachePolicy none;
    const RunTrace cached = run_cache_trajectory(den, sched, none, shell_pack(5), 5, kSeeds,
                                                 kConds, {});
    CHECK(endpoints_bitwise_equal(full.endpoints(), cached.endpoints()));
    REQUIRE(full.steps == cached.steps);
    for (std::size_t p = 0; p < full.latents.size(); ++p) {
        CHECK(endpoints_bitwise_equal(full.latents[p], cached.latents[p]));
    }
}

TEST_CASE("probes never mutate the history") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    CachePolicy policy;
    policy.kind = CachePolicyKind::ModuleInterval;
    policy.interval_n = 2;
    const CalibrationPack pack = shell_pack(99);

    TrajectoryHistory hist = init_history(HistoryMode::Corrected, den, sched, kSeeds, kConds);
    const std::vector<SiteId> all0 = all_sites_of_step(hist.step_index(sched), 2);
    while (!hist.exhausted(sched)) {
        const std::vector<SiteId> taps = all_sites_of_step(hist.step_index(sched), 2);
        const std::string before = serialize_history(hist);
        (void)probe_advance(hist, den, sched, policy, pack, 99, taps);
        CHECK(serialize_history(hist) == before);
        advance_cache_side(hist, den, sched, policy, pack, {});
    }
    CHECK(hist.cursor == 8);
}

TEST_CASE("probe and committed advance agree on what would be consumed") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    CachePolicy policy;
    policy.kind = CachePolicyKind::ModuleInterval;
    policy.interval_n = 2;
    const CalibrationPack pack = shell_pack(99);

    TrajectoryHistory hist = init_history(HistoryMode::Corrected, den, sched, kSeeds, kConds);
    while (!hist.exhausted(sched)) {
        const std::vector<SiteId> taps = all_sites_of_step(hist.step_index(sched), 2);
        const auto probed = probe_advance(hist, den, sched, policy, pack, 99, taps);
        const auto committed = advance_cache_side(hist, den, sched, policy, pack, taps);
        REQUIRE(probed.size() == committed.size());
        for (std::size_t s = 0; s < probed.size(); ++s) {
            REQUIRE(probed[s].size() == committed[s].size());
            for (std::size_t i = 0; i < probed[s].size(); ++i) {
                CHECK(bitwise_equal(probed[s][i].value, committed[s][i].value));
            }
        }
    }
}

TEST_CASE("estimation replays bitwise through calibrated inference") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();

    for (CachePolicyKind kind : {CachePolicyKind::ModuleInterval, CachePolicyKind::TokenLevel}) {
        const EstimationSetup setup = base_setup(kind);
        const PriorEstimationResult est = estimate_priors(den, sched, setup);
        CHECK(!est.pack.operators.empty());

        const InferenceResult inf =
            run_calibrated_inference(den, sched, setup.policy, est.pack, setup.fingerprint,
                                     kSeeds, kConds);
        CHECK(endpoints_bitwise_equal(inf.trace.endpoints(), est.corrected_endpoints));

        const RunTrace full = run_full_trajectory(den, sched, kSeeds, kConds, {});
        CHECK(endpoints_bitwise_equal(full.endpoints(), est.full_endpoints));
    }
}

TEST_CASE("operators are stored in fit order") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    const EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    const PriorEstimationResult est = estimate_priors(den, sched, setup);

    // cached steps under interval 2 of an 8-step schedule: 6, 4, 2, 0
    REQUIRE(est.pack.operators.size() == 4u * 2u * 2u);
    std::size_t idx = 0;
    for (int step : {6, 4, 2, 0}) {
        for (int layer : {0, 1}) {
            for (ModuleKind kind : {ModuleKind::Attention, ModuleKind::Mlp}) {
                const SiteId expect{step, layer, kind};
                REQUIRE(est.pack.operators[idx].site == expect);
                CHECK(est.pack.find(expect) == &est.pack.operators[idx]);
                ++idx;
            }
        }
    }
    CHECK(est.pack.find(SiteId{5, 0, ModuleKind::Attention}) == nullptr);
}

TEST_CASE("zero-strength packs reduce to the plain cache run bitwise") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    setup.alpha = 0.0;

    const PriorEstimationResult est = estimate_priors(den, sched, setup);
    const RunTrace plain = run_cache_trajectory(den, sched, setup.policy,
                                                shell_pack(setup.fingerprint), setup.fingerprint,
                                                kSeeds, kConds, {});
    const InferenceResult inf = run_calibrated_inference(den, sched, setup.policy, est.pack,
                                                         setup.fingerprint, kSeeds, kConds);
    CHECK(endpoints_bitwise_equal(inf.trace.endpoints(), plain.endpoints()));
    CHECK(endpoints_bitwise_equal(est.corrected_endpoints, plain.endpoints()));
}

TEST_CASE("one-shot estimation fits the first window step identically") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    const EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);

    const PriorEstimationResult tcc = estimate_priors(den, sched, setup);
    const PriorEstimationResult oneshot = estimate_priors_oneshot(den, sched, setup);
    REQUIRE(tcc.pack.operators.size() == oneshot.pack.operators.size());

    // first cached step (6): identical histories up to that point -> identical fits
    bool later_step_differs = false;
    for (std::size_t i = 0; i < tcc.pack.operators.size(); ++i) {
        const CalibrationOperator& a = tcc.pack.operators[i];
        const CalibrationOperator& b = oneshot.pack.operators[i];
        REQUIRE(a.site == b.site);
        if (a.site.step_index == 6) {
            CHECK(operators_bitwise_equal(a, b));
        } else if (!operators_bitwise_equal(a, b)) {
            later_step_differs = true;
        }
    }
    CHECK(later_step_differs);  // trajectory shift must show up after the first step
}

TEST_CASE("an empty window produces an empty pack and leaves the run plain") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    setup.window_first = -1;
    setup.window_last = 0;

    const PriorEstimationResult est = estimate_priors(den, sched, setup);
    CHECK(est.pack.operators.empty());

    const RunTrace plain = run_cache_trajectory(den, sched, setup.policy,
                                                shell_pack(setup.fingerprint), setup.fingerprint,
                                                kSeeds, kConds, {});
    CHECK(endpoints_bitwise_equal(est.corrected_endpoints, plain.endpoints()));
}

TEST_CASE("a cache-free policy yields no operators and the full trajectory") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    EstimationSetup setup = base_setup(CachePolicyKind::None);

    const PriorEstimationResult est = estimate_priors(den, sched, setup);
    CHECK(est.pack.operators.empty());
    CHECK(endpoints_bitwise_equal(est.corrected_endpoints, est.full_endpoints));
}

TEST_CASE("site filters restrict which modules get operators") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    setup.sites = SiteFilter{true, false};  // attention only

    const PriorEstimationResult est = estimate_priors(den, sched, setup);
    CHECK(est.pack.operators.size() == 4u * 2u);  // 4 cached steps x 2 layers
    for (const CalibrationOperator& op : est.pack.operators) {
        CHECK(op.site.kind == ModuleKind::Attention);
    }

    // runs cleanly: uncovered MLP sites consume raw cached values
    const InferenceResult inf = run_calibrated_inference(den, sched, setup.policy, est.pack,
                                                         setup.fingerprint, kSeeds, kConds);
    CHECK(endpoints_bitwise_equal(inf.trace.endpoints(), est.corrected_endpoints));
}

TEST_CASE("a truncated pack fails loudly inside its window") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    const EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    const PriorEstimationResult est = estimate_priors(den, sched, setup);

    CalibrationPack truncated = est.pack;
    std::erase_if(truncated.operators,
                  [](const CalibrationOperator& op) { return op.site.step_index == 4; });
    CHECK_THROWS_WITH_AS(run_cache_trajectory(den, sched, setup.policy, truncated,
                                              setup.fingerprint, kSeeds, kConds, {}),
                         doctest::Contains("missing operator"), std::runtime_error);
}

TEST_CASE("fingerprint mismatches are rejected before any work") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    CachePolicy policy;
    policy.kind = CachePolicyKind::ModuleInterval;

    CHECK_THROWS_WITH_AS(run_cache_trajectory(den, sched, policy, shell_pack(1), 2, kSeeds,
                                              kConds, {}),
                         doctest::Contains("pack fingerprint mismatch"), std::runtime_error);

    const TrajectoryHistory hist = init_history(HistoryMode::Corrected, den, sched, kSeeds,
                                                kConds);
    CHECK_THROWS_WITH_AS((void)probe_advance(hist, den, sched, policy, shell_pack(1), 2, {}),
                         doctest::Contains("pack fingerprint mismatch"), std::runtime_error);
}

TEST_CASE("a single distorted site is recovered almost exactly") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    EstimationSetup setup = base_setup(CachePolicyKind::SyntheticDistortion);
    setup.policy.distortion.layer = 0;
    setup.policy.distortion.module = static_cast<int>(ModuleKind::Attention);

    const PriorEstimationResult est = estimate_priors(den, sched, setup);
    REQUIRE(est.pack.operators.size() == 4);  // one site per cached step
    const double dev = endpoint_deviation(est.corrected_endpoints, est.full_endpoints);
    CHECK(dev < 1e-6);

    // without calibration the same policy drifts measurably
    const RunTrace plain = run_cache_trajectory(den, sched, setup.policy,
                                                shell_pack(setup.fingerprint), setup.fingerprint,
                                                kSeeds, kConds, {});
    const double plain_dev = endpoint_deviation(plain.endpoints(), est.full_endpoints);
    CHECK(plain_dev > 100.0 * dev);
}

TEST_CASE("endpoint deviation is a relative stacked norm") {
    Matrix f(1, 2);
    f(0, 0) = 3.0;
    f(0, 1) = 4.0;  // norm 5
    Matrix a = f;
    CHECK(endpoint_deviation({a}, {f}) == 0.0);

    a(0, 0) = 3.0 + 5.0;
    CHECK(endpoint_deviation({a}, {f}) == doctest::Approx(1.0).epsilon(1e-15));

    const Matrix zero(1, 2);
    CHECK(endpoint_deviation({zero}, {zero}) == 0.0);
    CHECK(std::isinf(endpoint_deviation({f}, {zero})));
}

TEST_CASE("strength sweeps share the baseline and collapse at zero strength") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    const EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);

    const std::vector<double> alphas = {0.0, 0.5, 1.0};
    const std::vector<AlphaSweepRow> rows = sweep_alpha(den, sched, setup, alphas);
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].alpha == alphas[i]);
        CHECK(rows[i].cache_dev == rows[0].cache_dev);
    }
    CHECK(rows[0].tcc_dev == rows[0].cache_dev);
    CHECK(rows[0].oneshot_dev == rows[0].cache_dev);
    CHECK(rows[2].tcc_dev < rows[0].cache_dev);
}

TEST_CASE("mismatch logs report distances against the lockstep full run") {
    const Denoiser den = build_denoiser(small_model());
    const NoiseSchedule sched = small_schedule();
    const EstimationSetup setup = base_setup(CachePolicyKind::ModuleInterval);
    const PriorEstimationResult est = estimate_priors(den, sched, setup);

    const std::vector<SiteId> watch = {SiteId{6, 0, ModuleKind::Attention},
                                       SiteId{5, 1, ModuleKind::Mlp}};
    const InferenceResult inf = run_calibrated_inference(den, sched, setup.policy, est.pack,
                                                         setup.fingerprint, kSeeds, kConds, watch);
    REQUIRE(inf.mismatch_log.size() == 2);
    CHECK(inf.mismatch_log[0].site == watch[0]);
    CHECK(inf.mismatch_log[1].site == watch[1]);
    CHECK(inf.mismatch_log[0].consumed_vs_full > 0.0);  // cached step: real mismatch
    CHECK(std::isfinite(inf.mismatch_log[1].consumed_vs_full));
}
