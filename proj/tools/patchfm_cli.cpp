#include "patchfm/patchfm.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace patchfm;

namespace {

struct Shared {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_shared(CLI::App* cmd, Shared& s) {
    cmd->add_option("--config", s.config, "Run config (JSON)");
    cmd->add_option("--seed", s.seed, "Override the config seed");
    cmd->add_option("--out", s.out, "Output directory");
}

RunConfig resolve(const Shared& s) {
    json j = s.config.empty() ? json::object() : read_json_file(s.config);
    if (s.seed) j["seed"] = *s.seed;
    if (!s.out.empty()) j["out_dir"] = s.out;
    return run_config_from_json(j);
}

std::string checkpoint_dir(const std::string& explicit_dir, const Shared& s) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (s.config.empty()) throw std::invalid_argument("pass --checkpoint or a --config whose out_dir holds a checkpoint");
    return resolve(Shared{s.config, s.seed, {}}).out_dir + "/checkpoint";
}

std::string out_dir_or(const Shared& s, const std::string& fallback) {
    const std::string d = s.out.empty() ? fallback : s.out;
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchfm: patched time-series transformer training and forecasting"};
    app.require_subcommand(1);

    Shared train_s;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
    add_shared(train_cmd, train_s);

    Shared sweep_s;
    std::string sweep_path;
    auto* sweep_cmd = app.add_subcommand("sweep", "Grid or random hyperparameter sweep");
    add_shared(sweep_cmd, sweep_s);
    sweep_cmd->add_option("--sweep", sweep_path, "Sweep spec (JSON)")->required();

    Shared mu_s;
    std::vector<std::size_t> mu_widths{64, 128, 256};
    std::vector<double> mu_grid = default_lr_grid();
    std::size_t mu_layers = 4;
    std::string mu_param = "ump";
    auto* mu_cmd = app.add_subcommand("mu-check", "Learning-rate transfer check across widths");
    add_shared(mu_cmd, mu_s);
    mu_cmd->add_option("--widths", mu_widths, "Model widths")->delimiter(',');
    mu_cmd->add_option("--lr-grid", mu_grid, "NorMuon learning rates")->delimiter(',');
    mu_cmd->add_option("--layers", mu_layers, "Depth");
    mu_cmd->add_option("--parametrization", mu_param, "ump or standard");

    Shared fc_s;
    std::string fc_ckpt, fc_series, fc_mode = "single";
    std::size_t fc_horizon = 64, fc_block = 1;
    bool fc_no_cache = false;
    auto* fc_cmd = app.add_subcommand("forecast", "Forecast a series CSV with a checkpoint");
    add_shared(fc_cmd, fc_s);
    fc_cmd->add_option("--checkpoint", fc_ckpt, "Checkpoint directory");
    fc_cmd->add_option("--series", fc_series, "Context series CSV")->required();
    fc_cmd->add_option("--horizon", fc_horizon, "Forecast horizon in steps");
    fc_cmd->add_option("--mode", fc_mode, "single or block")->check(CLI::IsMember({"single", "block"}));
    fc_cmd->add_option("--block-size", fc_block, "Block size in patches (block mode)");
    fc_cmd->add_flag("--no-cache", fc_no_cache, "Recompute every block without the KV cache");

    Shared ev_s;
    std::string ev_forecast, ev_truth, ev_context, ev_model = "model", ev_dataset = "dataset";
    std::size_t ev_season = 1;
    auto* ev_cmd = app.add_subcommand("eval", "Score a forecast CSV against truth");
    add_shared(ev_cmd, ev_s);
    ev_cmd->add_option("--forecast", ev_forecast, "Forecast CSV")->required();
    ev_cmd->add_option("--truth", ev_truth, "Truth series CSV (horizon rows)")->required();
    ev_cmd->add_option("--context", ev_context, "In-sample series CSV for MASE and the seasonal-naive baseline")->required();
    ev_cmd->add_option("--season", ev_season, "Seasonal period for MASE");
    ev_cmd->add_option("--model", ev_model, "Model label");
    ev_cmd->add_option("--dataset", ev_dataset, "Dataset label");

    Shared bl_s;
    std::string bl_ckpt;
    std::vector<std::size_t> bl_horizons{32, 256, 1024};
    std::vector<std::string> bl_modes{"single", "block"};
    std::size_t bl_block = 1, bl_runs = 5, bl_context = 256;
    auto* bl_cmd = app.add_subcommand("bench-latency", "Forecast latency versus horizon");
    add_shared(bl_cmd, bl_s);
    bl_cmd->add_option("--checkpoint", bl_ckpt, "Checkpoint directory");
    bl_cmd->add_option("--horizons", bl_horizons, "Horizons in steps")->delimiter(',');
    bl_cmd->add_option("--modes", bl_modes, "Decode modes")->delimiter(',');
    bl_cmd->add_option("--block-size", bl_block, "Block size for block mode");
    bl_cmd->add_option("--runs", bl_runs, "Timed runs per cell (>= 5)");
    bl_cmd->add_option("--context-steps", bl_context, "Context length of the benchmark series");

    Shared lh_s;
    std::string lh_ckpt, lh_name = "model";
    LongHorizonSpec lh_spec;
    auto* lh_cmd = app.add_subcommand("long-horizon", "Pearson r of block-decoded forecasts at long horizons");
    add_shared(lh_cmd, lh_s);
    lh_cmd->add_option("--checkpoint", lh_ckpt, "Checkpoint directory");
    lh_cmd->add_option("--horizons", lh_spec.horizons, "Horizons in steps")->delimiter(',');
    lh_cmd->add_option("--series", lh_spec.series, "Held-out series");
    lh_cmd->add_option("--block-size", lh_spec.block, "Block size in patches");
    lh_cmd->add_option("--model-name", lh_name, "Label for the table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            RunConfig cfg = resolve(train_s);
            TrainOptions o;
            const std::size_t every = cfg.log_every;
            if (every)
                o.on_step = [every](const LossRecord& r) {
                    if (r.step % every == 0)
                        std::cout << "step " << r.step << " loss " << r.loss << " lr " << r.lr_multiplier << " gnorm "
                                  << r.grad_norm << std::endl;
                };
            auto r = train(cfg, o);
            std::cout << "trained " << cfg.steps << " steps in " << r.seconds << " s; validation loss "
                      << r.validation_loss << "; checkpoint " << cfg.out_dir << "/checkpoint\n";
        } else if (*sweep_cmd) {
            json base = sweep_s.config.empty() ? json::object() : read_json_file(sweep_s.config);
            if (sweep_s.seed) base["seed"] = *sweep_s.seed;
            const std::string out = out_dir_or(sweep_s, "runs/sweep");
            auto spec = sweep_spec_from_json(read_json_file(sweep_path));
            auto res = sweep(spec, base, out);
            const long best = best_trial(res);
            std::cout << res.size() << " trials written to " << out << "/trials.csv";
            if (best >= 0) std::cout << "; best trial " << best << " objective " << *res[std::size_t(best)].objective;
            std::cout << '\n';
        } else if (*mu_cmd) {
            RunConfig cfg = resolve(mu_s);
            cfg.model.parametrization = parametrization_from_string(mu_param);
            MuCheckSpec spec;
            spec.widths = mu_widths;
            spec.lr_grid = mu_grid;
            spec.layers = mu_layers;
            const std::string out = out_dir_or(mu_s, "runs/mu_check");
            auto rep = mu_check(spec, cfg, out, [](const MuCheckRow& r) {
                std::cout << "width " << r.width << " lr " << r.lr << " validation " << r.validation_loss
                          << (r.diverged ? " (diverged)" : "") << std::endl;
            });
            for (const auto& [w, k] : rep.argmin) std::cout << "width " << w << " argmin lr " << spec.lr_grid[k] << '\n';
            std::cout << "argmin drift " << rep.drift << " grid steps\n";
        } else if (*fc_cmd) {
            auto model = load_checkpoint<float>(checkpoint_dir(fc_ckpt, fc_s));
            RawSeries series = read_series_csv(fc_series);
            ForecastOptions fo{fc_horizon, decode_mode_from_string(fc_mode), fc_block, !fc_no_cache};
            auto f = forecast_series(model, series, fo);
            const std::string out = out_dir_or(fc_s, ".");
            std::ofstream csv(out + "/forecast.csv");
            write_forecast_csv(csv, f.forecast, series.names, series.length);
            std::cout << "wrote " << out << "/forecast.csv (" << f.forward_passes << " forward passes)\n";
        } else if (*ev_cmd) {
            auto table = read_forecast_csv(ev_forecast);
            RawSeries truth = read_series_csv(ev_truth);
            RawSeries ctx = read_series_csv(ev_context);
            const auto& f = table.forecast;
            if (truth.variates != f.variates || truth.length < f.horizon || ctx.variates != f.variates)
                throw std::invalid_argument("eval: forecast, truth and context disagree in variates or horizon");
            MetricReport rep;
            for (std::size_t v = 0; v < f.variates; ++v) {
                QuantileForecast one(1, f.horizon, true);
                std::vector<double> y(f.horizon), med(f.horizon);
                std::vector<std::uint8_t> obs(f.horizon);
                for (std::size_t t = 0; t < f.horizon; ++t) {
                    y[t] = truth.at(v, t);
                    obs[t] = truth.is_observed(v, t);
                    med[t] = f.at(v, t, kMedianIndex);
                    for (std::size_t l = 0; l < kNumQuantiles; ++l) one.at(0, t, l) = f.at(v, t, l);
                }
                std::vector<double> insample(ctx.values.begin() + std::ptrdiff_t(v * ctx.length),
                                             ctx.values.begin() + std::ptrdiff_t((v + 1) * ctx.length));
                auto naive = seasonal_naive(insample, ev_season, f.horizon);
                MetricRow row{ev_dataset + "/" + table.variates[v], ev_model, {}, {}, {}, {}};
                row.crps = crps_quantile(one, y, obs);
                row.mase = mase(med, y, insample, ev_season);
                row.owa = owa(row.mase, row.crps, mase(naive, y, insample, ev_season),
                              crps_quantile(point_as_quantiles(naive, 1, f.horizon), y, obs));
                row.pearson = pearson(med, y);
                rep.rows.push_back(row);
            }
            rep.compute_ranks();
            const std::string out = out_dir_or(ev_s, ".");
            std::ofstream(out + "/metrics.json") << rep.to_json().dump(2) << '\n';
            std::ofstream csv(out + "/metrics.csv");
            rep.write_csv(csv);
            std::cout << "wrote " << out << "/metrics.json and metrics.csv\n";
        } else if (*bl_cmd) {
            auto model = load_checkpoint<float>(checkpoint_dir(bl_ckpt, bl_s));
            RunConfig cfg = resolve(Shared{bl_s.config, bl_s.seed, {}});
            std::mt19937_64 rng(cfg.seed);
            RawSeries ctx = sample_series(cfg.data, bl_context, rng);
            std::vector<LatencyRequest> reqs;
            for (auto h : bl_horizons)
                for (const auto& m : bl_modes) reqs.push_back({h, decode_mode_from_string(m), bl_block});
            auto rows = bench_latency(model, ctx, reqs, bl_runs);
            const std::string out = out_dir_or(bl_s, ".");
            std::ofstream csv(out + "/latency.csv");
            write_latency_csv(csv, rows);
            write_latency_csv(std::cout, rows);
        } else if (*lh_cmd) {
            auto model = load_checkpoint<float>(checkpoint_dir(lh_ckpt, lh_s));
            if (lh_s.seed) lh_spec.seed = *lh_s.seed;
            auto res = long_horizon_study(model, lh_spec, lh_name);
            const std::string out = out_dir_or(lh_s, ".");
            std::ofstream csv(out + "/long_horizon.csv");
            write_long_horizon_csv(csv, res);
            for (const auto& [h, f] : res.forecasts) {
                std::vector<std::string> names;
                for (std::size_t s = 0; s < f.variates; ++s) names.push_back("s" + std::to_string(s));
                std::ofstream fc(out + "/forecast_h" + std::to_string(h) + ".csv");
                write_forecast_csv(fc, f, names);
            }
            for (const auto& [h, r] : res.mean_pearson) std::cout << "horizon " << h << " mean pearson " << r << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
