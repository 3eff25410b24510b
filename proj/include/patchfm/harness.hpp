#pragma once

// Run orchestration: sweeps, the learning-rate transfer check, latency
// benchmarking and the long-horizon study.

#include "patchfm/forecast.hpp"
#include "patchfm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace patchfm {

// ---- sweep -------------------------------------------------------------------

enum class SweepObjective { validation_loss, crps, mase };

inline SweepObjective sweep_objective_from_string(std::string_view s) {
    if (s == "validation_loss") return SweepObjective::validation_loss;
    if (s == "crps") return SweepObjective::crps;
    if (s == "mase") return SweepObjective::mase;
    throw std::invalid_argument("unknown sweep objective '" + std::string(s) + "'");
}

struct SweepAxis {
    std::string pointer;  // JSON pointer into the run config, e.g. /optimizer/normuon/lr
    std::vector<json> values;
};

struct SweepSpec {
    std::vector<SweepAxis> axes;
    bool random = false;     // sample uniformly among axis values instead of the full grid
    std::size_t trials = 0;  // random mode only; 0 means grid size
    SweepObjective objective = SweepObjective::validation_loss;
    std::uint64_t seed = 0;

    std::size_t grid_size() const {
        std::size_t n = 1;
        for (const auto& a : axes) n *= a.values.size();
        return n;
    }

    void validate() const {
        if (axes.empty()) throw std::invalid_argument("sweep: at least one parameter must vary");
        for (const auto& a : axes)
            if (a.values.empty()) throw std::invalid_argument("sweep: axis " + a.pointer + " has no values");
    }
};

inline SweepSpec sweep_spec_from_json(const json& j) {
    SweepSpec s;
    for (const auto& [ptr, vals] : j.at("grid").items()) s.axes.push_back({ptr, vals.get<std::vector<json>>()});
    s.random = j.value("mode", std::string("grid")) == "random";
    s.trials = j.value("trials", std::size_t(0));
    s.objective = sweep_objective_from_string(j.value("objective", std::string("validation_loss")));
    s.seed = j.value("seed", std::uint64_t(0));
    s.validate();
    return s;
}

struct TrialResult {
    std::size_t index = 0;
    json params;
    std::optional<double> objective;
    std::string error;
};

/// Parameter assignments in trial order: the grid in row-major axis order,
/// or seeded uniform draws.
inline std::vector<json> sweep_assignments(const SweepSpec& spec) {
    spec.validate();
    std::vector<json> out;
    if (!spec.random) {
        const std::size_t n = spec.grid_size();
        for (std::size_t i = 0; i < n; ++i) {
            json a = json::object();
            std::size_t rem = i;
            for (std::size_t k = spec.axes.size(); k-- > 0;) {
                const auto& ax = spec.axes[k];
                a[ax.pointer] = ax.values[rem % ax.values.size()];
                rem /= ax.values.size();
            }
            out.push_back(a);
        }
        return out;
    }
    std::mt19937_64 rng(spec.seed);
    const std::size_t n = spec.trials ? spec.trials : spec.grid_size();
    for (std::size_t i = 0; i < n; ++i) {
        json a = json::object();
        for (const auto& ax : spec.axes) {
            std::uniform_int_distribution<std::size_t> pick(0, ax.values.size() - 1);
            a[ax.pointer] = ax.values[pick(rng)];
        }
        out.push_back(a);
    }
    return out;
}

inline json apply_overrides(json base, const json& assignment) {
    for (const auto& [ptr, value] : assignment.items()) base[json::json_pointer(ptr)] = value;
    return base;
}

inline double objective_value(const Model<float>& model, const RunConfig& cfg, double validation, SweepObjective obj) {
    if (obj == SweepObjective::validation_loss) return validation;
    ForecastOptions fo;
    fo.horizon = cfg.eval.horizon;
    auto s = evaluate_model(model, cfg, validation_seed(cfg.seed), fo);
    const Score& sc = obj == SweepObjective::crps ? s.crps : s.mase;
    if (!sc.present()) throw std::runtime_error("objective absent: " + sc.reason);
    return *sc;
}

/// Runs every trial (failures are recorded and the sweep continues) and
/// writes <out_dir>/trials.csv.
inline std::vector<TrialResult> sweep(const SweepSpec& spec, const json& base, const std::string& out_dir) {
    std::vector<TrialResult> results;
    const auto assignments = sweep_assignments(spec);
    std::filesystem::create_directories(out_dir);
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        TrialResult r{i, assignments[i], std::nullopt, {}};
        try {
            json cj = apply_overrides(base, assignments[i]);
            cj["out_dir"] = out_dir + "/trial_" + std::to_string(i);
            RunConfig cfg = run_config_from_json(cj);
            auto tr = train(cfg);
            r.objective = objective_value(tr.model, cfg, tr.validation_loss, spec.objective);
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        results.push_back(std::move(r));
    }
    std::ofstream f(out_dir + "/trials.csv");
    f << "trial";
    for (const auto& a : spec.axes) f << ',' << a.pointer;
    f << ",objective,error\n";
    f.precision(10);
    for (const auto& r : results) {
        f << r.index;
        for (const auto& a : spec.axes) f << ',' << r.params.at(a.pointer).dump();
        f << ',';
        if (r.objective) f << *r.objective;
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        f << ',' << err << '\n';
    }
    return results;
}

/// Index of the trial with the lowest objective, or -1 if none succeeded.
inline long best_trial(const std::vector<TrialResult>& results) {
    long best = -1;
    for (std::size_t i = 0; i < results.size(); ++i)
        if (results[i].objective && (best < 0 || *results[i].objective < *results[std::size_t(best)].objective))
            best = long(i);
    return best;
}

// ---- learning-rate transfer check ---------------------------------------------

inline std::vector<double> default_lr_grid() {
    std::vector<double> g;
    for (int k = -2; k <= 2; ++k) g.push_back(0.65 * std::pow(4.0, k));
    return g;
}

struct MuCheckSpec {
    std::vector<std::size_t> widths{64, 128, 256};
    std::vector<double> lr_grid = default_lr_grid();
    std::size_t layers = 4;
    /// The NorMuon learning rate the grid is expressed in; lr / reference_lr
    /// scales both optimizers' rates.
    double reference_lr = 0.65;
};

struct MuCheckRow {
    std::size_t width = 0;
    double lr = 0;
    double final_loss = 0;       // mean of the last 50 training losses
    double validation_loss = 0;  // objective
    bool diverged = false;
};

struct MuCheckReport {
    std::vector<MuCheckRow> rows;
    std::map<std::size_t, std::size_t> argmin;  // width -> grid index
    std::size_t drift = 0;                      // max - min argmin index
};

inline MuCheckReport summarize_mu_check(std::vector<MuCheckRow> rows, const MuCheckSpec& spec) {
    MuCheckReport rep;
    rep.rows = std::move(rows);
    for (std::size_t w : spec.widths) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t idx = 0;
        for (const auto& r : rep.rows) {
            if (r.width != w) continue;
            const double v = r.diverged ? std::numeric_limits<double>::infinity() : r.validation_loss;
            const auto k = std::size_t(std::find(spec.lr_grid.begin(), spec.lr_grid.end(), r.lr) - spec.lr_grid.begin());
            if (v < best) {
                best = v;
                idx = k;
            }
        }
        rep.argmin[w] = idx;
    }
    std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
    for (const auto& [w, k] : rep.argmin) {
        lo = std::min(lo, k);
        hi = std::max(hi, k);
    }
    rep.drift = rep.argmin.empty() ? 0 : hi - lo;
    return rep;
}

inline RunConfig mu_check_config(const RunConfig& base, std::size_t width, std::size_t layers, double lr_scale) {
    RunConfig c = base;
    c.model.d_model = width;
    c.model.heads = width / c.model.d_head;
    c.model.layers = layers;
    c.model.variate_attn_positions.clear();
    c.optimizer.lr_scale = lr_scale;
    c.validate();
    return c;
}

/// Trains every (width, lr) pair on the same data stream and reports the
/// per-width argmin of held-out validation loss.
inline MuCheckReport mu_check(const MuCheckSpec& spec, const RunConfig& base, const std::string& out_dir = {},
                              const std::function<void(const MuCheckRow&)>& on_row = {}) {
    if (spec.widths.size() < 3 || spec.lr_grid.size() < 5)
        throw std::invalid_argument("mu_check: need at least 3 widths and 5 learning rates");
    std::vector<MuCheckRow> rows;
    for (std::size_t w : spec.widths)
        for (double lr : spec.lr_grid) {
            RunConfig c = mu_check_config(base, w, spec.layers, lr / spec.reference_lr);
            MuCheckRow row{w, lr, 0, 0, false};
            try {
                TrainOptions o;
                o.write_outputs = false;
                auto r = train(c, o);
                double tail = 0;
                const std::size_t n = std::min<std::size_t>(50, r.curve.size());
                for (std::size_t i = r.curve.size() - n; i < r.curve.size(); ++i) tail += r.curve[i].loss;
                row.final_loss = n ? tail / double(n) : 0;
                row.validation_loss = r.validation_loss;
                row.diverged = !std::isfinite(r.validation_loss);
            } catch (const TrainingDiverged&) {
                row.diverged = true;
                row.final_loss = row.validation_loss = std::numeric_limits<double>::infinity();
            }
            rows.push_back(row);
            if (on_row) on_row(row);
        }
    auto rep = summarize_mu_check(std::move(rows), spec);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/mu_check.csv");
        f << "width,lr,final_loss,validation_loss,diverged\n";
        f.precision(10);
        for (const auto& r : rep.rows)
            f << r.width << ',' << r.lr << ',' << r.final_loss << ',' << r.validation_loss << ',' << r.diverged << '\n';
        json j{{"drift", rep.drift}, {"parametrization", std::string(to_string(base.model.parametrization))}};
        for (const auto& [w, k] : rep.argmin) j["argmin_lr"][std::to_string(w)] = spec.lr_grid[k];
        std::ofstream(out_dir + "/mu_check.json") << j.dump(2) << '\n';
    }
    return rep;
}

// ---- latency -------------------------------------------------------------------

struct LatencyRow {
    std::size_t horizon = 0;
    DecodeMode mode = DecodeMode::single_pass;
    std::size_t block = 0;
    std::size_t forward_passes = 0;
    double median_ms = 0;
    std::size_t runs = 0;
};

struct LatencyRequest {
    std::size_t horizon;
    DecodeMode mode;
    std::size_t block = 1;
};

/// Median wall-clock of `runs` forecasts after `warmups` untimed ones.
template <class T>
std::vector<LatencyRow> bench_latency(const Model<T>& model, const RawSeries& context,
                                      const std::vector<LatencyRequest>& requests, std::size_t runs = 5,
                                      std::size_t warmups = 2) {
    if (runs < 5) throw std::invalid_argument("bench_latency: at least 5 timed runs");
    std::vector<LatencyRow> out;
    for (const auto& rq : requests) {
        ForecastOptions fo{rq.horizon, rq.mode, rq.block, true};
        std::size_t passes = 0;
        for (std::size_t i = 0; i < warmups; ++i) passes = forecast_series(model, context, fo).forward_passes;
        std::vector<double> ms;
        for (std::size_t i = 0; i < runs; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            passes = forecast_series(model, context, fo).forward_passes;
            ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        std::sort(ms.begin(), ms.end());
        const double med = runs % 2 ? ms[runs / 2] : 0.5 * (ms[runs / 2 - 1] + ms[runs / 2]);
        out.push_back({rq.horizon, rq.mode, rq.mode == DecodeMode::block ? rq.block : 0, passes, med, runs});
    }
    return out;
}

inline void write_latency_csv(std::ostream& f, const std::vector<LatencyRow>& rows) {
    f << "horizon,mode,block_size,forward_passes,median_ms,runs\n";
    for (const auto& r : rows)
        f << r.horizon << ',' << (r.mode == DecodeMode::single_pass ? "single" : "block") << ',' << r.block << ','
          << r.forward_passes << ',' << r.median_ms << ',' << r.runs << '\n';
}

// ---- long-horizon study -----------------------------------------------------------

struct LongHorizonSpec {
    std::vector<std::size_t> horizons{2048, 4096, 8192};
    std::size_t series = 20;
    std::size_t block = 4;
    std::uint64_t seed = 12345;
    GeneratorSpec generator = long_horizon_spec();
};

struct LongHorizonRow {
    std::string model;
    std::size_t horizon = 0;
    std::string series;
    Score pearson;
};

struct LongHorizonResult {
    std::vector<LongHorizonRow> rows;
    std::map<std::size_t, QuantileForecast> forecasts;  // horizon -> series as variates
    std::map<std::size_t, double> mean_pearson;
};

/// Block-decodes the longest horizon once per held-out series; shorter
/// horizons are its prefixes (block decoding is prefix-consistent when every
/// horizon is a multiple of the block). A truth-vs-truth control row is
/// added per horizon.
template <class T>
LongHorizonResult long_horizon_study(const Model<T>& model, const LongHorizonSpec& spec,
                                     const std::string& model_name = "model") {
    if (spec.horizons.empty()) throw std::invalid_argument("long_horizon_study: no horizons");
    const std::size_t P = model.config().patch_size;
    const std::size_t hmax = *std::max_element(spec.horizons.begin(), spec.horizons.end());
    for (auto h : spec.horizons)
        if (h % (spec.block * P)) throw std::invalid_argument("long_horizon_study: horizons must be multiples of block * P");
    const std::size_t context = (model.config().max_patches() - spec.block) * P;
    std::mt19937_64 rng(spec.seed);
    LongHorizonResult res;
    std::vector<QuantileForecast> per_series;
    std::vector<std::vector<double>> truths;
    for (std::size_t s = 0; s < spec.series; ++s) {
        RawSeries full = gen_sinusoid_mixture(spec.generator, context + hmax, rng);
        RawSeries ctx = slice_time(full, 0, context);
        ForecastOptions fo{hmax, DecodeMode::block, spec.block, true};
        per_series.push_back(forecast_series(model, ctx, fo).forecast);
        truths.emplace_back(full.values.begin() + std::ptrdiff_t(context), full.values.end());
    }
    for (std::size_t h : spec.horizons) {
        QuantileForecast all(spec.series, h, true);
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < spec.series; ++s) {
            std::vector<double> med(h), tr(truths[s].begin(), truths[s].begin() + std::ptrdiff_t(h));
            for (std::size_t t = 0; t < h; ++t) {
                med[t] = per_series[s].at(0, t, kMedianIndex);
                for (std::size_t l = 0; l < kNumQuantiles; ++l) all.at(s, t, l) = per_series[s].at(0, t, l);
            }
            Score r = pearson(med, tr);
            if (r.present()) {
                sum += *r;
                ++n;
            }
            res.rows.push_back({model_name, h, "s" + std::to_string(s), r});
        }
        std::vector<double> tr0(truths[0].begin(), truths[0].begin() + std::ptrdiff_t(h));
        res.rows.push_back({"ground_truth", h, "control", pearson(tr0, tr0)});
        res.mean_pearson[h] = n ? sum / double(n) : std::numeric_limits<double>::quiet_NaN();
        res.forecasts[h] = std::move(all);
    }
    return res;
}

inline void write_long_horizon_csv(std::ostream& f, const LongHorizonResult& r) {
    f << "model,horizon,series,pearson\n";
    f.precision(10);
    for (const auto& row : r.rows) {
        f << row.model << ',' << row.horizon << ',' << row.series << ',';
        if (row.pearson.present()) f << *row.pearson;
        f << '\n';
    }
}

}  // namespace patchfm
