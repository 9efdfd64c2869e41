#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "tcclab/config.hpp"
#include "tcclab/csv.hpp"
#include "tcclab/diagnostics.hpp"
#include "tcclab/pack_io.hpp"
#include "tcclab/trajectory.hpp"

namespace fs = std::filesystem;
using namespace tcclab;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw ConfigError("cannot open config '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
}

RunConfig load_config(const std::string& path, bool seed_set, std::uint64_t seed) {
    RunConfig cfg = parse_config(read_text_file(path));
    if (seed_set) {
        for (std::size_t i = 0; i < cfg.sample_seeds.size(); ++i) {
            cfg.sample_seeds[i] = seed + i;
        }
    }
    return cfg;
}

const char* module_name(ModuleKind kind) {
    return kind == ModuleKind::Attention ? "attention" : "mlp";
}

std::vector<SiteId> all_tap_sites(const NoiseSchedule& schedule, const DenoiserConfig& model) {
    std::vector<SiteId> sites;
    for (int s = static_cast<int>(schedule.n_steps()) - 1; s >= 0; --s) {
        for (const SiteId& site : all_sites_of_step(s, static_cast<int>(model.n_layers))) {
            sites.push_back(site);
        }
    }
    return sites;
}

// Runs the trajectory selected by the presence of a pack and the cache policy:
// calibrated when a pack is given, plain cache-side when a policy is active,
// full computation otherwise.
RunTrace run_selected(const RunConfig& cfg, const Denoiser& denoiser,
                      const NoiseSchedule& schedule, const std::string& pack_path,
                      const std::vector<SiteId>& tap_sites) {
    const std::uint64_t fingerprint = config_fingerprint(cfg);
    if (!pack_path.empty()) {
        const CalibrationPack pack = load_pack(pack_path, fingerprint);
        return run_cache_trajectory(denoiser, schedule, cfg.cache, pack, fingerprint,
                                    cfg.sample_seeds, cfg.sample_conditions, tap_sites);
    }
    if (cfg.cache.kind != CachePolicyKind::None) {
        CalibrationPack shell;
        shell.window_first = -1;
        shell.window_last = 0;
        shell.fingerprint = fingerprint;
        return run_cache_trajectory(denoiser, schedule, cfg.cache, shell, fingerprint,
                                    cfg.sample_seeds, cfg.sample_conditions, tap_sites);
    }
    return run_full_trajectory(denoiser, schedule, cfg.sample_seeds, cfg.sample_conditions,
                               tap_sites);
}

void write_latents(const RunTrace& trace, const RunConfig& cfg, const std::string& dir) {
    const std::size_t d = cfg.model.d_model;
    std::vector<std::string> header = {"sample", "condition", "token"};
    for (std::size_t c = 0; c < d; ++c) header.push_back("c" + std::to_string(c));
    CsvWriter out(header);
    const std::vector<Matrix>& endpoints = trace.endpoints();
    for (std::size_t s = 0; s < endpoints.size(); ++s) {
        for (std::size_t t = 0; t < endpoints[s].rows; ++t) {
            std::vector<std::string> row = {csv_cell(s), csv_cell(cfg.sample_conditions[s]),
                                            csv_cell(t)};
            for (std::size_t c = 0; c < d; ++c) row.push_back(csv_cell(endpoints[s](t, c)));
            out.row(row);
        }
    }
    out.write(dir + "/final_latents.csv");

    CsvWriter log({"step_index", "sample", "latent_norm"});
    for (std::size_t p = 0; p < trace.steps.size(); ++p) {
        for (std::size_t s = 0; s < trace.latents[p].size(); ++s) {
            log.row({csv_cell(trace.steps[p]), csv_cell(s),
                     csv_cell(frobenius_norm(trace.latents[p][s]))});
        }
    }
    log.write(dir + "/step_log.csv");
}

int cmd_estimate(const std::string& config_path, bool seed_set, std::uint64_t seed,
                 std::string out_path, bool oneshot) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const Denoiser denoiser = build_denoiser(cfg.model);
    const NoiseSchedule schedule = schedule_from(cfg);
    const EstimationSetup setup = estimation_setup_from(cfg);

    const PriorEstimationResult result =
        oneshot ? estimate_priors_oneshot(denoiser, schedule, setup)
                : estimate_priors(denoiser, schedule, setup);

    if (out_path.empty()) {
        fs::create_directories(cfg.output_dir);
        out_path = cfg.output_dir + (oneshot ? "/pack_oneshot.bin" : "/pack_tcc.bin");
    } else if (fs::path(out_path).has_parent_path()) {
        fs::create_directories(fs::path(out_path).parent_path());
    }
    save_pack(result.pack, cfg.model.d_model, out_path);

    std::cout << "pack written: " << out_path << "\n";
    std::cout << "operators: " << result.pack.operators.size() << "\n";
    std::cout << "window: [" << result.pack.window_last << ", " << result.pack.window_first
              << "]\n";
    std::cout << "fingerprint: " << result.pack.fingerprint << "\n";
    std::cout << "estimation endpoint deviation: "
              << format_double(
                     endpoint_deviation(result.corrected_endpoints, result.full_endpoints))
              << "\n";
    return 0;
}

int cmd_sample(const std::string& config_path, bool seed_set, std::uint64_t seed,
               const std::string& pack_path, std::string out_dir) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const Denoiser denoiser = build_denoiser(cfg.model);
    const NoiseSchedule schedule = schedule_from(cfg);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    fs::create_directories(out_dir);

    const RunTrace trace = run_selected(cfg, denoiser, schedule, pack_path, {});
    write_latents(trace, cfg, out_dir);

    std::cout << "samples: " << trace.endpoints().size() << "\n";
    std::cout << "steps: " << trace.steps.size() << "\n";
    std::cout << "latents written: " << out_dir << "/final_latents.csv\n";
    return 0;
}

int cmd_eval_deviation(const std::string& config_path, bool seed_set, std::uint64_t seed,
                       const std::string& pack_path, std::string out_dir) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const Denoiser denoiser = build_denoiser(cfg.model);
    const NoiseSchedule schedule = schedule_from(cfg);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    fs::create_directories(out_dir);

    const RunTrace full = run_full_trajectory(denoiser, schedule, cfg.sample_seeds,
                                              cfg.sample_conditions, {});
    const RunTrace method = run_selected(cfg, denoiser, schedule, pack_path, {});
    const DeviationReport report = deviation(full, method);

    CsvWriter out({"kind", "step_index", "layer", "module", "value"});
    out.row({"endpoint", "-1", "-1", "", csv_cell(report.endpoint_rel_dev)});
    for (const auto& [step, dev] : report.per_step) {
        out.row({"step", csv_cell(step), "-1", "", csv_cell(dev)});
    }
    for (const auto& [site, dev] : report.per_site) {
        out.row({"site", csv_cell(site.step_index), csv_cell(site.layer), module_name(site.kind),
                 csv_cell(dev)});
    }
    out.write(out_dir + "/deviation.csv");

    std::cout << "endpoint relative deviation: " << format_double(report.endpoint_rel_dev) << "\n";
    std::cout << "report written: " << out_dir << "/deviation.csv\n";
    return 0;
}

int cmd_flops(const std::string& config_path, bool seed_set, std::uint64_t seed,
              const std::string& pack_path, std::string out_dir) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const NoiseSchedule schedule = schedule_from(cfg);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    fs::create_directories(out_dir);

    CalibrationPack pack;
    const CalibrationPack* pack_ptr = nullptr;
    if (!pack_path.empty()) {
        pack = load_pack(pack_path, config_fingerprint(cfg));
        pack_ptr = &pack;
    }
    const FlopsReport report = count_flops(cfg.model, schedule, cfg.cache, pack_ptr);

    CsvWriter out({"metric", "value"});
    out.row({"fresh_module_flops", csv_cell(report.fresh_module_flops)});
    out.row({"cached_module_flops", csv_cell(report.cached_module_flops)});
    out.row({"calibration_flops", csv_cell(report.calibration_flops)});
    out.row({"total_flops", csv_cell(report.total_flops)});
    out.row({"full_run_flops", csv_cell(report.full_run_flops)});
    out.row({"ratio_vs_full", csv_cell(report.ratio_vs_full)});
    out.row({"module_ratio", csv_cell(report.module_ratio)});
    out.write(out_dir + "/flops.csv");

    std::cout << "total flops: " << report.total_flops << "\n";
    std::cout << "full-run flops: " << report.full_run_flops << "\n";
    std::cout << "ratio vs full: " << format_double(report.ratio_vs_full) << "\n";
    std::cout << "module ratio: " << format_double(report.module_ratio) << "\n";
    std::cout << "report written: " << out_dir << "/flops.csv\n";
    return 0;
}

int cmd_dispersion(const std::string& config_path, bool seed_set, std::uint64_t seed,
                   const std::string& pack_path, std::string out_dir) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const Denoiser denoiser = build_denoiser(cfg.model);
    const NoiseSchedule schedule = schedule_from(cfg);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    fs::create_directories(out_dir);

    const std::vector<SiteId> taps = all_tap_sites(schedule, cfg.model);
    const RunTrace trace = run_selected(cfg, denoiser, schedule, pack_path, taps);
    const DispersionReport report = within_label_dispersion(trace, cfg.sample_conditions);

    CsvWriter sites({"step_index", "layer", "module", "within_std_rms", "class_mean_rms",
                     "ratio"});
    for (const DispersionRow& row : report.rows) {
        sites.row({csv_cell(row.step_index), csv_cell(row.layer), module_name(row.kind),
                   csv_cell(row.within_std_rms), csv_cell(row.class_mean_rms),
                   csv_cell(row.ratio)});
    }
    sites.write(out_dir + "/dispersion_sites.csv");

    CsvWriter steps({"step_index", "fraction_above_one", "fraction_attention", "fraction_mlp"});
    for (const DispersionStepSummary& row : report.steps) {
        steps.row({csv_cell(row.step_index), csv_cell(row.fraction_above_one),
                   csv_cell(row.fraction_attention), csv_cell(row.fraction_mlp)});
    }
    steps.write(out_dir + "/dispersion_steps.csv");

    std::cout << "sites measured: " << report.rows.size() << "\n";
    std::cout << "reports written: " << out_dir << "/dispersion_sites.csv, " << out_dir
              << "/dispersion_steps.csv\n";
    return 0;
}

int cmd_sweep_alpha(const std::string& config_path, bool seed_set, std::uint64_t seed,
                    const std::string& alphas_text, std::string out_dir) {
    const RunConfig cfg = load_config(config_path, seed_set, seed);
    const Denoiser denoiser = build_denoiser(cfg.model);
    const NoiseSchedule schedule = schedule_from(cfg);
    const EstimationSetup setup = estimation_setup_from(cfg);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    fs::create_directories(out_dir);

    std::vector<double> alphas;
    std::string cur;
    for (char c : alphas_text + ",") {
        if (c == ',') {
            if (!cur.empty()) {
                try {
                    alphas.push_back(std::stod(cur));
                } catch (const std::exception&) {
                    throw ConfigError("invalid alpha list '" + alphas_text + "'");
                }
                cur.clear();
            }
        } else if (c != ' ') {
            cur.push_back(c);
        }
    }
    if (alphas.empty()) throw ConfigError("invalid alpha list '" + alphas_text + "'");

    const std::vector<AlphaSweepRow> rows = sweep_alpha(denoiser, schedule, setup, alphas);

    CsvWriter out({"alpha", "cache_dev", "tcc_dev", "oneshot_dev"});
    std::cout << "alpha  cache_dev  tcc_dev  oneshot_dev\n";
    for (const AlphaSweepRow& row : rows) {
        out.row({csv_cell(row.alpha), csv_cell(row.cache_dev), csv_cell(row.tcc_dev),
                 csv_cell(row.oneshot_dev)});
        std::cout << format_double(row.alpha) << "  " << format_double(row.cache_dev) << "  "
                  << format_double(row.tcc_dev) << "  " << format_double(row.oneshot_dev) << "\n";
    }
    out.write(out_dir + "/alpha_sweep.csv");
    std::cout << "report written: " << out_dir << "/alpha_sweep.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deterministic laboratory for trajectory-consistent cache calibration"};
    app.require_subcommand(1);

    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string pack_path;
    std::string out_path;
    std::string out_dir;
    std::string alphas_text = "0,0.25,0.5,1";

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Run configuration file")->required();
        sub->add_option("--seed", seed, "Override sample seeds with seed, seed+1, ...")
            ->each([&](const std::string&) { seed_set = true; });
    };

    CLI::App* est = app.add_subcommand("estimate-priors",
                                       "Fit calibration operators along the corrected trajectory");
    add_common(est);
    est->add_option("--out", out_path, "Pack output path");

    CLI::App* oneshot = app.add_subcommand("estimate-oneshot",
                                           "Fit operators from the plain cache trajectory");
    add_common(oneshot);
    oneshot->add_option("--out", out_path, "Pack output path");

    CLI::App* sample = app.add_subcommand("sample", "Run sampling and write final latents");
    add_common(sample);
    sample->add_option("--pack", pack_path, "Calibration pack to apply");
    sample->add_option("--out-dir", out_dir, "Output directory");

    CLI::App* eval = app.add_subcommand("eval-deviation",
                                        "Compare a run against full computation");
    add_common(eval);
    eval->add_option("--pack", pack_path, "Calibration pack to apply");
    eval->add_option("--out-dir", out_dir, "Output directory");

    CLI::App* flops = app.add_subcommand("flops", "Analytical cost accounting for one run");
    add_common(flops);
    flops->add_option("--pack", pack_path, "Count this pack's application cost");
    flops->add_option("--out-dir", out_dir, "Output directory");

    CLI::App* disp = app.add_subcommand("dispersion",
                                        "Within-label dispersion of module outputs");
    add_common(disp);
    disp->add_option("--pack", pack_path, "Calibration pack to apply");
    disp->add_option("--out-dir", out_dir, "Output directory");

    CLI::App* sweep = app.add_subcommand("sweep-alpha",
                                         "Endpoint deviation across correction strengths");
    add_common(sweep);
    sweep->add_option("--alphas", alphas_text, "Comma-separated correction strengths");
    sweep->add_option("--out-dir", out_dir, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*est) return cmd_estimate(config_path, seed_set, seed, out_path, false);
        if (*oneshot) return cmd_estimate(config_path, seed_set, seed, out_path, true);
        if (*sample) return cmd_sample(config_path, seed_set, seed, pack_path, out_dir);
        if (*eval) return cmd_eval_deviation(config_path, seed_set, seed, pack_path, out_dir);
        if (*flops) return cmd_flops(config_path, seed_set, seed, pack_path, out_dir);
        if (*disp) return cmd_dispersion(config_path, seed_set, seed, pack_path, out_dir);
        if (*sweep) return cmd_sweep_alpha(config_path, seed_set, seed, alphas_text, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const PackMismatchError& e) {
        std::cerr << "pack error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
