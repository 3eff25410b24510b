#pragma once

// Forecast metrics. Scores that cannot be computed are reported as absent
// with a reason instead of an infinity or NaN.

#include "patchfm/quantile.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace patchfm {

struct Score {
    std::optional<double> value;
    std::string reason;

    static Score of(double v) { return Score{v, {}}; }
    static Score absent(std::string why) { return Score{std::nullopt, std::move(why)}; }
    bool present() const { return value.has_value(); }
    double operator*() const { return *value; }
};

/// 2 · mean over the nine levels of the pinball loss, averaged over scored
/// positions. `truth` is variate-major (v * horizon + t); `observed` (same
/// layout, optional) excludes positions from scoring.
inline Score crps_quantile(const QuantileForecast& f, std::span<const double> truth,
                           std::span<const std::uint8_t> observed = {}) {
    const std::size_t n = f.variates * f.horizon;
    if (truth.size() != n) throw std::invalid_argument("crps_quantile: truth length does not match forecast");
    if (!observed.empty() && observed.size() != n) throw std::invalid_argument("crps_quantile: observed length mismatch");
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!observed.empty() && !observed[i]) continue;
        total += quantile_loss(truth[i], f.levels_at(i / f.horizon, i % f.horizon));
        ++count;
    }
    if (count == 0) return Score::absent("no scored positions");
    return Score::of(2 * total / double(count));
}

/// Seasonal-naive continuation: repeats the last `season` in-sample values.
inline std::vector<double> seasonal_naive(std::span<const double> insample, std::size_t season, std::size_t horizon) {
    if (season == 0 || insample.size() < season) throw std::invalid_argument("seasonal_naive: in-sample shorter than season");
    std::vector<double> out(horizon);
    const std::size_t n = insample.size();
    for (std::size_t t = 0; t < horizon; ++t) out[t] = insample[n - season + t % season];
    return out;
}

/// Point forecast expressed as a degenerate quantile forecast.
inline QuantileForecast point_as_quantiles(std::span<const double> point, std::size_t variates, std::size_t horizon) {
    QuantileForecast f(variates, horizon, true);
    for (std::size_t i = 0; i < variates * horizon; ++i)
        for (std::size_t l = 0; l < kNumQuantiles; ++l) f.values[i * kNumQuantiles + l] = point[i];
    return f;
}

inline Score mase(std::span<const double> forecast, std::span<const double> truth, std::span<const double> insample,
                  std::size_t season = 1) {
    if (forecast.size() != truth.size() || forecast.empty())
        throw std::invalid_argument("mase: forecast and truth lengths differ or are empty");
    if (season == 0 || insample.size() <= season) return Score::absent("in-sample not longer than season");
    double denom = 0;
    for (std::size_t t = season; t < insample.size(); ++t) denom += std::abs(insample[t] - insample[t - season]);
    denom /= double(insample.size() - season);
    if (!(denom > 0)) return Score::absent("zero scale");
    double num = 0;
    for (std::size_t i = 0; i < forecast.size(); ++i) num += std::abs(forecast[i] - truth[i]);
    return Score::of(num / double(forecast.size()) / denom);
}

inline Score owa(const Score& mase_f, const Score& crps_f, const Score& mase_naive, const Score& crps_naive) {
    for (const Score* s : {&mase_f, &crps_f, &mase_naive, &crps_naive})
        if (!s->present()) return Score::absent("input score absent: " + s->reason);
    if (!(*mase_naive > 0) || !(*crps_naive > 0)) return Score::absent("zero naive term");
    return Score::of(0.5 * (*mase_f / *mase_naive + *crps_f / *crps_naive));
}

inline Score pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
    if (a.size() < 2) return Score::absent("fewer than two points");
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0) || !(sbb > 0)) return Score::absent("constant input");
    return Score::of(std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0));
}

/// dataset -> model -> score (lower is better).
using ScoreTable = std::map<std::string, std::map<std::string, Score>>;

/// Midranks for one dataset; ties share the mean of their ranks.
inline std::map<std::string, double> rank_dataset(const std::map<std::string, double>& scores) {
    std::vector<std::pair<double, std::string>> order;
    for (const auto& [m, s] : scores) order.push_back({s, m});
    std::sort(order.begin(), order.end());
    std::map<std::string, double> ranks;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && order[j].first == order[i].first) ++j;
        const double mid = 0.5 * double(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) ranks[order[k].second] = mid;
        i = j;
    }
    return ranks;
}

/// Average rank per model over datasets where every model has a score.
inline std::map<std::string, double> rank_models(const ScoreTable& table) {
    std::set<std::string> models;
    for (const auto& [d, row] : table)
        for (const auto& [m, s] : row) models.insert(m);
    std::map<std::string, double> sum;
    std::size_t used = 0;
    for (const auto& [d, row] : table) {
        std::map<std::string, double> scores;
        bool complete = row.size() == models.size();
        for (const auto& [m, s] : row) {
            if (!s.present()) complete = false;
            else scores[m] = *s;
        }
        if (!complete) continue;
        ++used;
        for (const auto& [m, r] : rank_dataset(scores)) sum[m] += r;
    }
    std::map<std::string, double> out;
    if (used == 0) return out;
    for (const auto& m : models) out[m] = sum[m] / double(used);
    return out;
}

struct MetricRow {
    std::string dataset, model;
    Score crps, mase, owa, pearson;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::map<std::string, double> ranks;  // by CRPS

    void compute_ranks() {
        ScoreTable t;
        for (const auto& r : rows) t[r.dataset][r.model] = r.crps;
        ranks = rank_models(t);
    }

    nlohmann::json to_json() const {
        auto score = [](const Score& s) {
            return s.present() ? nlohmann::json(*s) : nlohmann::json{{"absent", s.reason}};
        };
        nlohmann::json j;
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows)
            j["rows"].push_back({{"dataset", r.dataset},
                                 {"model", r.model},
                                 {"crps", score(r.crps)},
                                 {"mase", score(r.mase)},
                                 {"owa", score(r.owa)},
                                 {"pearson", score(r.pearson)}});
        j["average_rank"] = ranks;
        return j;
    }

    /// Columns dataset,model,crps,mase,owa,pearson; absent cells are empty.
    void write_csv(std::ostream& out) const {
        out << "dataset,model,crps,mase,owa,pearson\n";
        out.precision(12);
        auto cell = [&](const Score& s) {
            if (s.present()) out << *s;
        };
        for (const auto& r : rows) {
            out << r.dataset << ',' << r.model << ',';
            cell(r.crps);
            out << ',';
            cell(r.mase);
            out << ',';
            cell(r.owa);
            out << ',';
            cell(r.pearson);
            out << '\n';
        }
    }
};

}  // namespace patchfm
