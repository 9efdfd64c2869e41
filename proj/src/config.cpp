#include "tcclab/config.hpp"

#include <charconv>
#include <cstdio>
#include <map>
#include <sstream>

namespace tcclab {

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && (s[begin] == ' ' || s[begin] == '\t' || s[begin] == '\r')) ++begin;
    while (end > begin && (s[end - 1] == ' ' || s[end - 1] == '\t' || s[end - 1] == '\r')) --end;
    return s.substr(begin, end - begin);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    return parts;
}

[[noreturn]] void bad_value(std::size_t line, const std::string& key) {
    throw ConfigError("line " + std::to_string(line) + ": invalid value for '" + key + "'");
}

template <typename T>
T parse_integer(const std::string& text, std::size_t line, const std::string& key) {
    T out{};
    const std::string t = trim(text);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) bad_value(line, key);
    return out;
}

double parse_real(const std::string& text, std::size_t line, const std::string& key) {
    double out{};
    const std::string t = trim(text);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) bad_value(line, key);
    return out;
}

const char* kind_token(CachePolicyKind kind) {
    switch (kind) {
        case CachePolicyKind::None: return "none";
        case CachePolicyKind::ModuleInterval: return "module-interval";
        case CachePolicyKind::TokenLevel: return "token-level";
        case CachePolicyKind::SyntheticDistortion: return "synthetic-distortion";
    }
    return "none";
}

const char* variant_token(CalibrationVariant v) {
    switch (v) {
        case CalibrationVariant::Full: return "full";
        case CalibrationVariant::ScaleShift: return "scale-shift";
        case CalibrationVariant::ShiftOnly: return "shift-only";
    }
    return "full";
}

const char* pooling_token(PoolingMode p) {
    switch (p) {
        case PoolingMode::ClassPool: return "class";
        case PoolingMode::TokenPool: return "token";
        case PoolingMode::Mixed: return "mixed";
    }
    return "token";
}

const char* sites_token(const SiteFilter& f) {
    if (f.attention && f.mlp) return "all";
    return f.attention ? "attention" : "mlp";
}

const char* distort_module_token(int module) {
    if (module < 0) return "all";
    return module == static_cast<int>(ModuleKind::Attention) ? "attention" : "mlp";
}

void validate(const RunConfig& cfg) {
    const auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (cfg.model.d_model == 0) fail("model.d_model: must be positive");
    if (cfg.model.n_layers == 0) fail("model.n_layers: must be positive");
    if (cfg.model.n_tokens == 0) fail("model.n_tokens: must be positive");
    if (cfg.model.n_heads == 0) fail("model.n_heads: must be positive");
    if (cfg.model.d_mlp == 0) fail("model.d_mlp: must be positive");
    if (cfg.model.n_conditions == 0) fail("model.n_conditions: must be positive");
    if (cfg.model.d_model % cfg.model.n_heads != 0) {
        fail("model.d_model: must be divisible by model.n_heads");
    }
    if (cfg.schedule.t_train == 0) fail("schedule.t_train: must be positive");
    if (!(cfg.schedule.beta_start > 0.0)) fail("schedule.beta_start: must be > 0");
    if (!(cfg.schedule.beta_end < 1.0)) fail("schedule.beta_end: must be < 1");
    if (!(cfg.schedule.beta_start < cfg.schedule.beta_end)) {
        fail("schedule.beta_start: must be < schedule.beta_end");
    }
    if (cfg.schedule.n_steps == 0 || cfg.schedule.n_steps > cfg.schedule.t_train) {
        fail("schedule.n_steps: must be in [1, schedule.t_train]");
    }
    if (cfg.cache.kind != CachePolicyKind::None && cfg.cache.interval_n < 2) {
        fail("cache.interval: must be >= 2");
    }
    if (cfg.cache.kind == CachePolicyKind::TokenLevel &&
        (!(cfg.cache.token_reuse_ratio > 0.0) || !(cfg.cache.token_reuse_ratio < 1.0))) {
        fail("cache.token_reuse_ratio: must be in (0, 1)");
    }
    if (cfg.window_first >= cfg.window_last) {  // non-empty window
        if (cfg.window_last < 0) fail("calibration.window_last: must be >= 0");
        if (cfg.window_first >= static_cast<int>(cfg.schedule.n_steps)) {
            fail("calibration.window_first: outside schedule");
        }
    }
    if (cfg.alpha < 0.0) fail("calibration.alpha: must be >= 0");
    if (!(cfg.epsilon > 0.0)) fail("calibration.epsilon: must be > 0");
    if (cfg.sample_seeds.empty()) fail("samples.seeds: must not be empty");
    if (cfg.sample_seeds.size() != cfg.sample_conditions.size()) {
        fail("samples.conditions: must match samples.seeds in length");
    }
    for (int c : cfg.sample_conditions) {
        if (c < 0 || static_cast<std::size_t>(c) >= cfg.model.n_conditions) {
            fail("samples.conditions: condition out of range");
        }
    }
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    const std::vector<std::string> lines = split(text, '\n');
    for (std::size_t idx = 0; idx < lines.size(); ++idx) {
        const std::size_t line_no = idx + 1;
        std::string line = lines[idx];
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;

        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (key == "model.d_model") cfg.model.d_model = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.n_layers") cfg.model.n_layers = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.n_tokens") cfg.model.n_tokens = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.n_heads") cfg.model.n_heads = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.d_mlp") cfg.model.d_mlp = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.n_conditions") cfg.model.n_conditions = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "model.weight_seed") cfg.model.weight_seed = parse_integer<std::uint64_t>(value, line_no, key);
        else if (key == "schedule.t_train") cfg.schedule.t_train = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "schedule.beta_start") cfg.schedule.beta_start = parse_real(value, line_no, key);
        else if (key == "schedule.beta_end") cfg.schedule.beta_end = parse_real(value, line_no, key);
        else if (key == "schedule.n_steps") cfg.schedule.n_steps = parse_integer<std::size_t>(value, line_no, key);
        else if (key == "cache.kind") {
            if (value == "none") cfg.cache.kind = CachePolicyKind::None;
            else if (value == "module-interval") cfg.cache.kind = CachePolicyKind::ModuleInterval;
            else if (value == "token-level") cfg.cache.kind = CachePolicyKind::TokenLevel;
            else if (value == "synthetic-distortion") cfg.cache.kind = CachePolicyKind::SyntheticDistortion;
            else bad_value(line_no, key);
        }
        else if (key == "cache.interval") cfg.cache.interval_n = parse_integer<int>(value, line_no, key);
        else if (key == "cache.token_reuse_ratio") cfg.cache.token_reuse_ratio = parse_real(value, line_no, key);
        else if (key == "cache.distort_rotation_step") cfg.cache.distortion.rotation_step = parse_real(value, line_no, key);
        else if (key == "cache.distort_scale_growth") cfg.cache.distortion.scale_growth = parse_real(value, line_no, key);
        else if (key == "cache.distort_shift_step") cfg.cache.distortion.shift_step = parse_real(value, line_no, key);
        else if (key == "cache.distort_layer") cfg.cache.distortion.layer = parse_integer<int>(value, line_no, key);
        else if (key == "cache.distort_module") {
            if (value == "all") cfg.cache.distortion.module = -1;
            else if (value == "attention") cfg.cache.distortion.module = static_cast<int>(ModuleKind::Attention);
            else if (value == "mlp") cfg.cache.distortion.module = static_cast<int>(ModuleKind::Mlp);
            else bad_value(line_no, key);
        }
        else if (key == "calibration.window_first") cfg.window_first = parse_integer<int>(value, line_no, key);
        else if (key == "calibration.window_last") cfg.window_last = parse_integer<int>(value, line_no, key);
        else if (key == "calibration.alpha") cfg.alpha = parse_real(value, line_no, key);
        else if (key == "calibration.variant") {
            if (value == "full") cfg.variant = CalibrationVariant::Full;
            else if (value == "scale-shift") cfg.variant = CalibrationVariant::ScaleShift;
            else if (value == "shift-only") cfg.variant = CalibrationVariant::ShiftOnly;
            else bad_value(line_no, key);
        }
        else if (key == "calibration.pooling") {
            if (value == "class") cfg.pooling = PoolingMode::ClassPool;
            else if (value == "token") cfg.pooling = PoolingMode::TokenPool;
            else if (value == "mixed") cfg.pooling = PoolingMode::Mixed;
            else bad_value(line_no, key);
        }
        else if (key == "calibration.sites") {
            if (value == "all") cfg.sites = SiteFilter{true, true};
            else if (value == "attention") cfg.sites = SiteFilter{true, false};
            else if (value == "mlp") cfg.sites = SiteFilter{false, true};
            else bad_value(line_no, key);
        }
        else if (key == "calibration.epsilon") cfg.epsilon = parse_real(value, line_no, key);
        else if (key == "samples.seeds") {
            cfg.sample_seeds.clear();
            for (const std::string& item : split(value, ',')) {
                if (trim(item).empty()) continue;
                cfg.sample_seeds.push_back(parse_integer<std::uint64_t>(item, line_no, key));
            }
        }
        else if (key == "samples.conditions") {
            cfg.sample_conditions.clear();
            for (const std::string& item : split(value, ',')) {
                if (trim(item).empty()) continue;
                cfg.sample_conditions.push_back(parse_integer<int>(item, line_no, key));
            }
        }
        else if (key == "output.dir") cfg.output_dir = value;
        else throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    validate(cfg);
    return cfg;
}

namespace {

std::string render_fingerprint_sections(const RunConfig& cfg) {
    std::ostringstream out;
    out << "model.d_model = " << cfg.model.d_model << '\n';
    out << "model.n_layers = " << cfg.model.n_layers << '\n';
    out << "model.n_tokens = " << cfg.model.n_tokens << '\n';
    out << "model.n_heads = " << cfg.model.n_heads << '\n';
    out << "model.d_mlp = " << cfg.model.d_mlp << '\n';
    out << "model.n_conditions = " << cfg.model.n_conditions << '\n';
    out << "model.weight_seed = " << cfg.model.weight_seed << '\n';
    out << "schedule.t_train = " << cfg.schedule.t_train << '\n';
    out << "schedule.beta_start = " << format_double(cfg.schedule.beta_start) << '\n';
    out << "schedule.beta_end = " << format_double(cfg.schedule.beta_end) << '\n';
    out << "schedule.n_steps = " << cfg.schedule.n_steps << '\n';
    out << "cache.kind = " << kind_token(cfg.cache.kind) << '\n';
    out << "cache.interval = " << cfg.cache.interval_n << '\n';
    out << "cache.token_reuse_ratio = " << format_double(cfg.cache.token_reuse_ratio) << '\n';
    out << "cache.distort_rotation_step = " << format_double(cfg.cache.distortion.rotation_step) << '\n';
    out << "cache.distort_scale_growth = " << format_double(cfg.cache.distortion.scale_growth) << '\n';
    out << "cache.distort_shift_step = " << format_double(cfg.cache.distortion.shift_step) << '\n';
    out << "cache.distort_layer = " << cfg.cache.distortion.layer << '\n';
    out << "cache.distort_module = " << distort_module_token(cfg.cache.distortion.module) << '\n';
    return out.str();
}

}  // namespace

std::string render_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << render_fingerprint_sections(cfg);
    out << "calibration.window_first = " << cfg.window_first << '\n';
    out << "calibration.window_last = " << cfg.window_last << '\n';
    out << "calibration.alpha = " << format_double(cfg.alpha) << '\n';
    out << "calibration.variant = " << variant_token(cfg.variant) << '\n';
    out << "calibration.pooling = " << pooling_token(cfg.pooling) << '\n';
    out << "calibration.sites = " << sites_token(cfg.sites) << '\n';
    out << "calibration.epsilon = " << format_double(cfg.epsilon) << '\n';
    out << "samples.seeds = ";
    for (std::size_t i = 0; i < cfg.sample_seeds.size(); ++i) {
        if (i > 0) out << ',';
        out << cfg.sample_seeds[i];
    }
    out << '\n';
    out << "samples.conditions = ";
    for (std::size_t i = 0; i < cfg.sample_conditions.size(); ++i) {
        if (i > 0) out << ',';
        out << cfg.sample_conditions[i];
    }
    out << '\n';
    out << "output.dir = " << cfg.output_dir << '\n';
    return out.str();
}

std::uint64_t config_fingerprint(const RunConfig& cfg) {
    const std::string text = render_fingerprint_sections(cfg);
    std::uint64_t hash = 14695981039346656037ULL;  // FNV-1a 64-bit
    for (const char c : text) {
        hash ^= static_cast<std::uint8_t>(c);
        hash *= 1099511628211ULL;
    }
    return hash;
}

NoiseSchedule schedule_from(const RunConfig& cfg) {
    return build_schedule(cfg.schedule.t_train, cfg.schedule.beta_start, cfg.schedule.beta_end,
                          cfg.schedule.n_steps);
}

EstimationSetup estimation_setup_from(const RunConfig& cfg) {
    EstimationSetup setup;
    setup.policy = cfg.cache;
    setup.window_first = cfg.window_first;
    setup.window_last = cfg.window_last;
    setup.sites = cfg.sites;
    setup.alpha = cfg.alpha;
    setup.variant = cfg.variant;
    setup.pooling = cfg.pooling;
    setup.epsilon = cfg.epsilon;
    setup.sample_seeds = cfg.sample_seeds;
    setup.sample_conditions = cfg.sample_conditions;
    setup.fingerprint = config_fingerprint(cfg);
    return setup;
}

}  // namespace tcclab
