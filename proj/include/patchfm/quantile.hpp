#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

inline constexpr std::size_t kNumQuantiles = 9;
inline constexpr std::array<double, kNumQuantiles> kQuantileLevels{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
inline constexpr std::size_t kMedianIndex = 4;

/// values[(v * horizon + t) * 9 + l]; `real_space` tags whether the values
/// have been mapped back through the scaler.
struct QuantileForecast {
    std::size_t variates = 0;
    std::size_t horizon = 0;
    std::vector<double> values;
    bool real_space = false;

    QuantileForecast() = default;
    QuantileForecast(std::size_t v, std::size_t h, bool real = false)
        : variates(v), horizon(h), values(v * h * kNumQuantiles, 0.0), real_space(real) {}

    double& at(std::size_t v, std::size_t t, std::size_t l) { return values[(v * horizon + t) * kNumQuantiles + l]; }
    double at(std::size_t v, std::size_t t, std::size_t l) const {
        return values[(v * horizon + t) * kNumQuantiles + l];
    }
    std::span<const double> levels_at(std::size_t v, std::size_t t) const {
        return std::span<const double>(values).subspan((v * horizon + t) * kNumQuantiles, kNumQuantiles);
    }
};

inline double pinball(double y, double q_hat, double tau) {
    return (y - q_hat) * (tau - (y < q_hat ? 1.0 : 0.0));
}

/// d pinball / d q_hat: -tau above, 1 - tau below, 0 on a tie.
inline double pinball_grad(double y, double q_hat, double tau) {
    if (y > q_hat) return -tau;
    if (y < q_hat) return 1.0 - tau;
    return 0.0;
}

/// Mean pinball over the nine levels for one target.
inline double quantile_loss(double y, std::span<const double> q_hat) {
    if (q_hat.size() != kNumQuantiles) throw std::invalid_argument("quantile_loss: expects 9 quantiles");
    double s = 0;
    for (std::size_t l = 0; l < kNumQuantiles; ++l) s += pinball(y, q_hat[l], kQuantileLevels[l]);
    return s / double(kNumQuantiles);
}

struct MaskedLoss {
    double loss = 0;
    double weight = 0;  // number of targets that contributed
};

/// Average of quantile_loss over the observed targets. An all-unobserved
/// batch reports loss 0 with weight 0.
inline MaskedLoss quantile_loss(std::span<const double> y, std::span<const std::uint8_t> observed,
                                std::span<const double> q_hat) {
    if (q_hat.size() != y.size() * kNumQuantiles || observed.size() != y.size())
        throw std::invalid_argument("quantile_loss: size mismatch");
    MaskedLoss out;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!observed[i]) continue;
        out.loss += quantile_loss(y[i], q_hat.subspan(i * kNumQuantiles, kNumQuantiles));
        out.weight += 1;
    }
    if (out.weight > 0) out.loss /= out.weight;
    return out;
}

/// Sorts the level axis at every position. Inference only.
inline QuantileForecast sort_quantiles(QuantileForecast f) {
    for (std::size_t i = 0; i + kNumQuantiles <= f.values.size(); i += kNumQuantiles)
        std::sort(f.values.begin() + std::ptrdiff_t(i), f.values.begin() + std::ptrdiff_t(i + kNumQuantiles));
    return f;
}

inline bool quantiles_monotone(const QuantileForecast& f) {
    for (std::size_t i = 0; i + kNumQuantiles <= f.values.size(); i += kNumQuantiles)
        for (std::size_t l = 1; l < kNumQuantiles; ++l)
            if (f.values[i + l] < f.values[i + l - 1]) return false;
    return true;
}

inline constexpr double kClampExtension = 1e4;

struct ClampBounds {
    double lower = 0, upper = 0;
};

inline ClampBounds clamp_bounds(double ctx_min, double ctx_max, double anchor_scale) {
    return {ctx_min - kClampExtension * anchor_scale, ctx_max + kClampExtension * anchor_scale};
}

/// Clips one variate's real-space quantiles to the context range widened by
/// 1e4 anchor scales on each side. Non-finite values land on a bound.
inline void clamp_forecast(std::span<double> values, double ctx_min, double ctx_max, double anchor_scale) {
    if (!(anchor_scale > 0)) throw std::invalid_argument("clamp_forecast: anchor_scale must be positive");
    const auto b = clamp_bounds(ctx_min, ctx_max, anchor_scale);
    for (auto& x : values) {
        if (std::isnan(x)) x = 0.5 * (b.lower + b.upper);
        x = std::clamp(x, b.lower, b.upper);
    }
}

/// Columns variate, t, q10..q90.
inline void write_forecast_csv(std::ostream& out, const QuantileForecast& f, const std::vector<std::string>& names,
                               std::size_t t0 = 0) {
    out << "variate,t";
    for (double tau : kQuantileLevels) out << ",q" << int(std::lround(tau * 100));
    out << '\n';
    out.precision(std::numeric_limits<double>::max_digits10);
    for (std::size_t v = 0; v < f.variates; ++v)
        for (std::size_t t = 0; t < f.horizon; ++t) {
            out << (v < names.size() ? names[v] : "v" + std::to_string(v)) << ',' << (t0 + t);
            for (std::size_t l = 0; l < kNumQuantiles; ++l) out << ',' << f.at(v, t, l);
            out << '\n';
        }
}

struct ForecastTable {
    std::vector<std::string> variates;  // distinct, in first-seen order
    QuantileForecast forecast;
    std::vector<std::size_t> t;  // timestep label per row of the first variate
};

inline ForecastTable read_forecast_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("forecast CSV: missing header");
    std::vector<std::string> names;
    std::vector<std::vector<std::array<double, kNumQuantiles>>> rows;
    std::vector<std::size_t> ts;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        std::vector<std::string> cells;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                cells.push_back(cur);
                cur.clear();
            } else if (c != '\r') {
                cur.push_back(c);
            }
        }
        cells.push_back(cur);
        if (cells.size() != 2 + kNumQuantiles)
            throw std::runtime_error("forecast CSV line " + std::to_string(lineno) + ": expected 11 columns");
        auto it = std::find(names.begin(), names.end(), cells[0]);
        std::size_t v = std::size_t(it - names.begin());
        if (it == names.end()) {
            names.push_back(cells[0]);
            rows.emplace_back();
        }
        std::array<double, kNumQuantiles> q{};
        for (std::size_t l = 0; l < kNumQuantiles; ++l) q[l] = std::stod(cells[2 + l]);
        rows[v].push_back(q);
        if (v == 0) ts.push_back(std::size_t(std::stoull(cells[1])));
    }
    if (names.empty()) throw std::runtime_error("forecast CSV: no rows");
    const std::size_t H = rows[0].size();
    for (const auto& r : rows)
        if (r.size() != H) throw std::runtime_error("forecast CSV: variates have different horizons");
    ForecastTable table{names, QuantileForecast(names.size(), H, true), ts};
    for (std::size_t v = 0; v < names.size(); ++v)
        for (std::size_t t = 0; t < H; ++t)
            for (std::size_t l = 0; l < kNumQuantiles; ++l) table.forecast.at(v, t, l) = rows[v][t][l];
    return table;
}

inline ForecastTable read_forecast_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open forecast CSV '" + path + "'");
    return read_forecast_csv(f);
}

}  // namespace patchfm
