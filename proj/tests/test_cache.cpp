#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <stdexcept>

#include "tcclab/cache.hpp"
#include "tcclab/rng.hpp"

using namespace tcclab;

namespace {

NoiseSchedule schedule20() { return build_schedule(1000, 1e-4, 2e-2, 20); }

CachePolicy interval_policy(int n) {
    CachePolicy p;
    p.kind = CachePolicyKind::ModuleInterval;
    p.interval_n = n;
    return p;
}

Matrix counting_matrix(std::size_t rows, std::size_t cols, double start = 0.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = start + static_cast<double>(i);
    return m;
}

}  // namespace

TEST_CASE("policy validation") {
    CachePolicy p = interval_policy(1);
    CHECK_THROWS_AS(validate_policy(p), std::invalid_argument);

    p = interval_policy(2);
    p.first_step_fresh = false;
    CHECK_THROWS_AS(validate_policy(p), std::invalid_argument);

    CachePolicy t;
    t.kind = CachePolicyKind::TokenLevel;
    t.token_reuse_ratio = 1.0;
    CHECK_THROWS_AS(validate_policy(t), std::invalid_argument);
    t.token_reuse_ratio = 0.0;
    CHECK_THROWS_AS(validate_policy(t), std::invalid_argument);
    t.token_reuse_ratio = 0.9;
    CHECK_NOTHROW(validate_policy(t));

    CHECK_NOTHROW(validate_policy(CachePolicy{}));
}

TEST_CASE("interval plan keeps every interval-th reverse step fresh") {
    const NoiseSchedule s = schedule20();

    const CachePolicy n2 = interval_policy(2);
    std::set<int> fresh2;
    for (int step = 19; step >= 0; --step) {
        if (plan_step(n2, step, s).fresh) fresh2.insert(step);
    }
    CHECK(fresh2 == std::set<int>{19, 17, 15, 13, 11, 9, 7, 5, 3, 1});

    const CachePolicy n3 = interval_policy(3);
    std::set<int> fresh3;
    for (int step = 19; step >= 0; --step) {
        if (plan_step(n3, step, s).fresh) fresh3.insert(step);
    }
    CHECK(fresh3 == std::set<int>{19, 16, 13, 10, 7, 4, 1});

    const CachePolicy none;
    for (int step = 19; step >= 0; --step) CHECK(plan_step(none, step, s).fresh);

    CHECK_THROWS_AS(plan_step(n2, 20, s), std::invalid_argument);
    CHECK_THROWS_AS(plan_step(n2, -1, s), std::invalid_argument);
}

TEST_CASE("cache affectedness follows the plan and the distortion scope") {
    const NoiseSchedule s = schedule20();
    const CachePolicy p = interval_policy(2);

    const StepPlan fresh_plan = plan_step(p, 19, s);
    const StepPlan cached_plan = plan_step(p, 18, s);
    const SiteId site{18, 2, ModuleKind::Mlp};
    CHECK(!site_cache_affected(p, fresh_plan, SiteId{19, 2, ModuleKind::Mlp}));
    CHECK(site_cache_affected(p, cached_plan, site));

    CachePolicy d;
    d.kind = CachePolicyKind::SyntheticDistortion;
    d.interval_n = 2;
    d.distortion.layer = 1;
    d.distortion.module = static_cast<int>(ModuleKind::Attention);
    const StepPlan dp = plan_step(d, 18, s);
    CHECK(site_cache_affected(d, dp, SiteId{18, 1, ModuleKind::Attention}));
    CHECK(!site_cache_affected(d, dp, SiteId{18, 1, ModuleKind::Mlp}));
    CHECK(!site_cache_affected(d, dp, SiteId{18, 0, ModuleKind::Attention}));

    const CachePolicy none;
    CHECK(!site_cache_affected(none, plan_step(none, 18, s), site));
}

TEST_CASE("interval reuse returns the stored output verbatim and ages it") {
    const CachePolicy p = interval_policy(2);
    CacheStore store(3, 4, 20);
    const SiteId site{18, 1, ModuleKind::Attention};
    const Matrix incoming = counting_matrix(4, 6, 1.0);
    const Matrix output = counting_matrix(4, 6, 100.0);

    record_fresh(store, SiteId{19, 1, ModuleKind::Attention}, incoming, output);
    const auto module_fn = [&](const Matrix&) -> Matrix {
        FAIL("interval reuse must not recompute");
        return Matrix();
    };
    const Matrix got = cache_side_value(p, store, site, incoming, module_fn);
    CHECK(bitwise_equal(got, output));

    const SiteCacheEntry& e = store.entry(1, ModuleKind::Attention);
    for (int st : e.staleness) CHECK(st == 1);
    CHECK(e.last_fresh_step == 19);
}

TEST_CASE("reuse before any fresh step fails loudly") {
    const CachePolicy p = interval_policy(2);
    CacheStore store(2, 4, 20);
    const auto module_fn = [](const Matrix& m) { return m; };
    CHECK_THROWS_WITH_AS(cache_side_value(p, store, SiteId{18, 0, ModuleKind::Mlp},
                                          counting_matrix(4, 6), module_fn),
                         doctest::Contains("cache not warmed"), std::runtime_error);
}

TEST_CASE("token selection keeps ceil((1-ratio)*T) fresh, ties to lower index") {
    CacheStore store(1, 16, 20);
    const Matrix snapshot(16, 4, 0.0);
    record_fresh(store, SiteId{19, 0, ModuleKind::Attention}, snapshot, Matrix(16, 4, 1.0));

    Matrix incoming(16, 4, 0.0);
    for (std::size_t c = 0; c < 4; ++c) {
        incoming(3, c) = 5.0;  // distance 10
        incoming(7, c) = 2.0;  // distance 4
        incoming(11, c) = 1.0; // distance 2
    }
    const std::vector<bool> mask =
        select_fresh_tokens(store, SiteId{18, 0, ModuleKind::Attention}, incoming, 0.9);
    REQUIRE(mask.size() == 16);
    int fresh_count = 0;
    for (bool b : mask) fresh_count += b ? 1 : 0;
    CHECK(fresh_count == 2);  // ceil(0.1 * 16) = 2
    CHECK(mask[3]);
    CHECK(mask[7]);

    // all-equal scores: the lowest indices win
    const std::vector<bool> tie =
        select_fresh_tokens(store, SiteId{18, 0, ModuleKind::Attention}, snapshot, 0.9);
    CHECK(tie[0]);
    CHECK(tie[1]);
    for (std::size_t i = 2; i < tie.size(); ++i) CHECK(!tie[i]);
}

TEST_CASE("token-level consumption splices fresh rows and updates the slot") {
    CachePolicy p;
    p.kind = CachePolicyKind::TokenLevel;
    p.interval_n = 2;
    p.token_reuse_ratio = 0.75;  // ceil(0.25 * 4) = 1 fresh token
    CacheStore store(2, 4, 20);

    const Matrix snapshot = counting_matrix(4, 6, 0.0);
    const Matrix stored = counting_matrix(4, 6, 50.0);
    const SiteId site{18, 0, ModuleKind::Mlp};
    record_fresh(store, SiteId{19, 0, ModuleKind::Mlp}, snapshot, stored);

    Matrix incoming = snapshot;
    for (std::size_t c = 0; c < 6; ++c) incoming(2, c) += 9.0;  // token 2 moved most

    int calls = 0;
    const auto module_fn = [&](const Matrix& m) -> Matrix {
        ++calls;
        return 2.0 * m;
    };
    std::vector<bool> mask;
    const Matrix got = cache_side_value(p, store, site, incoming, module_fn, &mask);
    CHECK(calls == 1);
    REQUIRE(mask.size() == 4);
    CHECK(mask[2]);
    CHECK(mask[0] + mask[1] + mask[3] == 0);

    const Matrix fresh_all = 2.0 * incoming;
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t c = 0; c < 6; ++c) {
            if (t == 2) {
                CHECK(got(t, c) == fresh_all(t, c));
            } else {
                CHECK(got(t, c) == stored(t, c));
            }
        }
    }

    const SiteCacheEntry& e = store.entry(0, ModuleKind::Mlp);
    CHECK(e.staleness[2] == 0);
    CHECK(e.staleness[0] == 1);
    for (std::size_t c = 0; c < 6; ++c) {
        CHECK(e.output(2, c) == fresh_all(2, c));
        CHECK(e.incoming_snapshot(2, c) == incoming(2, c));
        CHECK(e.output(0, c) == stored(0, c));
    }
}

TEST_CASE("distortion growth counts earlier cached steps") {
    CachePolicy p;
    p.kind = CachePolicyKind::SyntheticDistortion;
    p.interval_n = 2;

    CHECK(distortion_growth(p, 18, 20) == 1);
    CHECK(distortion_growth(p, 16, 20) == 2);
    CHECK(distortion_growth(p, 0, 20) == 10);

    p.interval_n = 3;
    // cached steps above step 10: 18, 17, 15, 14, 12, 11 -> growth 7
    CHECK(distortion_growth(p, 10, 20) == 7);
}

TEST_CASE("distortion map is the documented block rotation + scale + shift") {
    DistortionConfig cfg;
    cfg.rotation_step = 0.1;
    cfg.scale_growth = 0.05;
    cfg.shift_step = 0.25;

    const int growth = 3;
    const double theta = 0.3, scale = 1.15;
    Matrix v(1, 5);
    v(0, 0) = 1.0; v(0, 1) = 0.0; v(0, 2) = -2.0; v(0, 3) = 0.5; v(0, 4) = 4.0;

    const Matrix out = apply_distortion(v, cfg, growth);
    const double shift = 0.25 * 3;
    CHECK(out(0, 0) == doctest::Approx(scale * std::cos(theta) + shift).epsilon(1e-15));
    CHECK(out(0, 1) == doctest::Approx(scale * std::sin(theta) - shift).epsilon(1e-15));
    CHECK(out(0, 2) ==
          doctest::Approx(scale * (-2.0 * std::cos(theta) - 0.5 * std::sin(theta)) + shift)
              .epsilon(1e-15));
    CHECK(out(0, 3) ==
          doctest::Approx(scale * (-2.0 * std::sin(theta) + 0.5 * std::cos(theta)) - shift)
              .epsilon(1e-15));
    // odd trailing column: untouched by the rotation
    CHECK(out(0, 4) == doctest::Approx(scale * 4.0 + shift).epsilon(1e-15));
}

TEST_CASE("distortion is an invertible similarity") {
    DistortionConfig cfg;
    SeededRng rng(31);
    Matrix v(3, 6);
    for (double& x : v.data) x = rng.next_normal();

    const int growth = 4;
    const Matrix out = apply_distortion(v, cfg, growth);

    const double g = growth;
    const double scale = 1.0 + cfg.scale_growth * g;
    const double theta = cfg.rotation_step * g;
    Matrix back(3, 6);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            const double shift = cfg.shift_step * g * (c % 2 == 0 ? 1.0 : -1.0);
            back(r, c) = (out(r, c) - shift) / scale;
        }
        for (std::size_t c = 0; c + 1 < 6; c += 2) {
            const double x = back(r, c), y = back(r, c + 1);
            back(r, c) = std::cos(theta) * x + std::sin(theta) * y;
            back(r, c + 1) = -std::sin(theta) * x + std::cos(theta) * y;
        }
    }
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        CHECK(back.data[i] == doctest::Approx(v.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("distorted sites recompute fresh before distorting") {
    CachePolicy p;
    p.kind = CachePolicyKind::SyntheticDistortion;
    p.interval_n = 2;
    CacheStore store(2, 3, 20);  // never warmed: distortion does not need it

    const Matrix incoming = counting_matrix(3, 4, 1.0);
    const auto module_fn = [](const Matrix& m) { return 3.0 * m; };
    const SiteId site{18, 1, ModuleKind::Attention};
    const Matrix got = cache_side_value(p, store, site, incoming, module_fn);
    const Matrix expect = apply_distortion(3.0 * incoming, p.distortion,
                                           distortion_growth(p, 18, 20));
    CHECK(bitwise_equal(got, expect));
}
