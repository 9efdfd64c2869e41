#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tcclab/cache.hpp"
#include "tcclab/calibration.hpp"
#include "tcclab/denoiser.hpp"
#include "tcclab/trajectory.hpp"

namespace tcclab {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ScheduleParams {
    std::size_t t_train = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::size_t n_steps = 20;

    bool operator==(const ScheduleParams&) const = default;
};

// Desk-scale experiment description. Parsed from a plain "section.key = value"
// text format ('#' starts a comment); every key is optional and falls back to
// the defaults below, unknown keys are rejected with their line number.
struct RunConfig {
    DenoiserConfig model;
    ScheduleParams schedule;
    CachePolicy cache{CachePolicyKind::ModuleInterval, 2, 0.9, true, {}};
    int window_first = 19;
    int window_last = 12;
    double alpha = 1.0;
    CalibrationVariant variant = CalibrationVariant::Full;
    PoolingMode pooling = PoolingMode::TokenPool;
    SiteFilter sites;
    double epsilon = 1e-8;
    std::vector<std::uint64_t> sample_seeds = {1001, 1002, 1003, 1004, 1005, 1006, 1007, 1008};
    std::vector<int> sample_conditions = {0, 1, 2, 3, 4, 5, 6, 7};
    std::string output_dir = "out";

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);

// Canonical rendering: fixed key order, shortest round-trip decimals.
// parse_config(render_config(cfg)) == cfg.
std::string render_config(const RunConfig& cfg);

// 64-bit FNV-1a over the canonical rendering of the model, schedule and cache
// sections — the parts a calibration pack must agree with to be usable.
std::uint64_t config_fingerprint(const RunConfig& cfg);

NoiseSchedule schedule_from(const RunConfig& cfg);
EstimationSetup estimation_setup_from(const RunConfig& cfg);

// Shortest decimal string that parses back to exactly the same double.
std::string format_double(double v);

}  // namespace tcclab
