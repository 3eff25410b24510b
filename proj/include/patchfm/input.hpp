#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

inline constexpr std::size_t kPatchSize = 32;
inline constexpr double kScaleFloor = 1e-10;
inline constexpr std::size_t kMinScalerObservations = 8;

/// Multivariate series, variate-major (values[v * length + t]).
struct RawSeries {
    std::size_t variates = 0;
    std::size_t length = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> observed;
    std::vector<std::string> names;
    std::string interval;

    RawSeries() = default;
    RawSeries(std::size_t v, std::size_t t)
        : variates(v), length(t), values(v * t, 0.0), observed(v * t, 1) {
        for (std::size_t i = 0; i < v; ++i) names.push_back("v" + std::to_string(i));
    }

    double& at(std::size_t v, std::size_t t) { return values[v * length + t]; }
    double at(std::size_t v, std::size_t t) const { return values[v * length + t]; }
    bool is_observed(std::size_t v, std::size_t t) const { return observed[v * length + t] != 0; }
    void set_missing(std::size_t v, std::size_t t) {
        observed[v * length + t] = 0;
        values[v * length + t] = 0;
    }
};

/// Values in normalized space plus the per-timestep statistics that produced
/// them. forecast_loc/forecast_scale are the statistics over the whole
/// context, used for every position past its end.
struct ScaledSeries {
    std::size_t variates = 0;
    std::size_t length = 0;
    std::size_t patch_size = kPatchSize;
    std::vector<double> z;
    std::vector<double> loc;
    std::vector<double> scale;
    std::vector<std::uint8_t> observed;
    std::vector<double> forecast_loc;
    std::vector<double> forecast_scale;
};

/// Patched model input. mask[i] == 1 marks unobserved or masked entries.
struct PatchGrid {
    std::size_t variates = 0;
    std::size_t patches = 0;
    std::size_t patch_size = kPatchSize;
    std::vector<double> values;  // (variates, patches, patch_size)
    std::vector<std::uint8_t> mask;

    std::size_t index(std::size_t v, std::size_t n, std::size_t k) const {
        return (v * patches + n) * patch_size + k;
    }
    bool patch_fully_missing(std::size_t v, std::size_t n) const {
        for (std::size_t k = 0; k < patch_size; ++k)
            if (!mask[index(v, n, k)]) return false;
        return true;
    }
};

/// Carries the last observed value into internal gaps; leading gaps stay
/// unobserved.
inline RawSeries forward_fill(const RawSeries& series) {
    RawSeries out = series;
    for (std::size_t v = 0; v < out.variates; ++v) {
        bool seen = false;
        double last = 0;
        for (std::size_t t = 0; t < out.length; ++t) {
            const std::size_t i = v * out.length + t;
            if (out.observed[i]) {
                seen = true;
                last = out.values[i];
            } else if (seen) {
                out.values[i] = last;
                out.observed[i] = 1;
            }
        }
    }
    return out;
}

/// Left-pads with unobserved entries so the length is a multiple of P.
inline RawSeries pad_left(const RawSeries& series, std::size_t patch_size = kPatchSize) {
    const std::size_t pad = (patch_size - series.length % patch_size) % patch_size;
    if (pad == 0) return series;
    RawSeries out = series;
    out.length = series.length + pad;
    out.values.assign(out.variates * out.length, 0.0);
    out.observed.assign(out.variates * out.length, 0);
    for (std::size_t v = 0; v < series.variates; ++v)
        for (std::size_t t = 0; t < series.length; ++t) {
            out.values[v * out.length + pad + t] = series.values[v * series.length + t];
            out.observed[v * out.length + pad + t] = series.observed[v * series.length + t];
        }
    return out;
}

namespace detail {

struct Welford {
    double count = 0, mean = 0, m2 = 0;
    void push(double x) {
        count += 1;
        const double d = x - mean;
        mean += d / count;
        m2 += d * (x - mean);
    }
    double std_dev() const { return count > 0 ? std::sqrt(std::max(m2 / count, 0.0)) : 0.0; }
};

}  // namespace detail

/// Causal running mean / standard deviation per variate, refreshed at patch
/// boundaries: a patch is normalized with the statistics of every observation
/// strictly before it. Patch boundaries are aligned to the end of the series.
/// Leading patches whose prefix holds fewer than `min_obs` observations reuse
/// the first statistics computed from at least that many.
inline ScaledSeries causal_scale(const RawSeries& series, std::size_t patch_size = kPatchSize,
                                 std::size_t min_obs = kMinScalerObservations, double floor = kScaleFloor) {
    if (patch_size == 0) throw std::invalid_argument("causal_scale: patch_size must be positive");
    ScaledSeries out;
    out.variates = series.variates;
    out.length = series.length;
    out.patch_size = patch_size;
    out.z.assign(series.values.size(), 0.0);
    out.loc.assign(series.values.size(), 0.0);
    out.scale.assign(series.values.size(), floor);
    out.observed = series.observed;
    out.forecast_loc.assign(series.variates, 0.0);
    out.forecast_scale.assign(series.variates, floor);
    const std::size_t T = series.length;
    const std::size_t pad = (patch_size - T % patch_size) % patch_size;
    const std::size_t npatch = (T + pad) / patch_size;
    for (std::size_t v = 0; v < series.variates; ++v) {
        std::vector<double> ploc(npatch, 0.0), pscale(npatch, floor), pcount(npatch, 0.0);
        detail::Welford acc;
        for (std::size_t p = 0; p < npatch; ++p) {
            pcount[p] = acc.count;
            ploc[p] = acc.mean;
            pscale[p] = std::max(acc.std_dev(), floor);
            const std::size_t begin = p * patch_size < pad ? 0 : p * patch_size - pad;
            const std::size_t end = (p + 1) * patch_size - pad;
            for (std::size_t t = begin; t < end; ++t)
                if (series.is_observed(v, t)) acc.push(series.at(v, t));
        }
        double floc = acc.count > 0 ? acc.mean : 0.0;
        double fscale = std::max(acc.std_dev(), floor);
        out.forecast_loc[v] = floc;
        out.forecast_scale[v] = fscale;

        std::size_t first_ok = npatch;
        for (std::size_t p = 0; p < npatch; ++p)
            if (pcount[p] >= double(min_obs)) {
                first_ok = p;
                break;
            }
        const double back_loc = first_ok < npatch ? ploc[first_ok] : floc;
        const double back_scale = first_ok < npatch ? pscale[first_ok] : fscale;
        for (std::size_t p = 0; p < std::min(first_ok, npatch); ++p) {
            ploc[p] = back_loc;
            pscale[p] = back_scale;
        }
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t p = (t + pad) / patch_size;
            const std::size_t i = v * T + t;
            out.loc[i] = ploc[p];
            out.scale[i] = pscale[p];
            out.z[i] = series.observed[i] ? (series.values[i] - ploc[p]) / pscale[p] : 0.0;
        }
    }
    return out;
}

inline double arcsinh_transform(double z) { return std::asinh(z); }

inline double inverse_transform(double q_scaled, double loc, double scale) {
    return std::sinh(q_scaled) * scale + loc;
}

/// Applies arcsinh to every normalized value; the model reads and predicts in
/// this space.
inline ScaledSeries to_model_space(ScaledSeries s) {
    for (auto& z : s.z) z = arcsinh_transform(z);
    return s;
}

inline PatchGrid patchify(const ScaledSeries& scaled, std::size_t patch_size = kPatchSize) {
    if (patch_size == 0 || scaled.length % patch_size)
        throw std::invalid_argument("patchify: length " + std::to_string(scaled.length) +
                                    " not divisible by patch size " + std::to_string(patch_size));
    PatchGrid g;
    g.variates = scaled.variates;
    g.patches = scaled.length / patch_size;
    g.patch_size = patch_size;
    g.values.assign(scaled.z.size(), 0.0);
    g.mask.assign(scaled.z.size(), 0);
    // Variate-major (v, t) maps directly onto (v, n, k).
    for (std::size_t i = 0; i < scaled.z.size(); ++i) {
        g.mask[i] = scaled.observed[i] ? 0 : 1;
        g.values[i] = scaled.observed[i] ? scaled.z[i] : 0.0;
    }
    return g;
}

/// Flattens a grid back to variate-major values and observed flags.
inline std::pair<std::vector<double>, std::vector<std::uint8_t>> unpatchify(const PatchGrid& grid) {
    std::vector<std::uint8_t> obs(grid.mask.size());
    for (std::size_t i = 0; i < obs.size(); ++i) obs[i] = grid.mask[i] ? 0 : 1;
    return {grid.values, obs};
}

// ---- CSV -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
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
    return cells;
}

inline bool blank(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace detail

/// Header row of variate names, then one row per timestep; an empty cell is
/// an unobserved entry.
inline RawSeries read_series_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("series CSV: missing header");
    RawSeries s;
    s.names = detail::split_csv_line(line);
    s.variates = s.names.size();
    std::vector<std::vector<double>> vals(s.variates);
    std::vector<std::vector<std::uint8_t>> obs(s.variates);
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (detail::blank(line)) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != s.variates)
            throw std::runtime_error("series CSV row " + std::to_string(row) + ": expected " +
                                     std::to_string(s.variates) + " cells, got " + std::to_string(cells.size()));
        for (std::size_t v = 0; v < s.variates; ++v) {
            if (detail::blank(cells[v])) {
                vals[v].push_back(0.0);
                obs[v].push_back(0);
            } else {
                std::size_t used = 0;
                double x = 0;
                try {
                    x = std::stod(cells[v], &used);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used == 0 || !detail::blank(cells[v].substr(used)))
                    throw std::runtime_error("series CSV row " + std::to_string(row) + ": cannot parse '" + cells[v] + "'");
                if (!std::isfinite(x))
                    throw std::runtime_error("series CSV row " + std::to_string(row) + ": non-finite value");
                vals[v].push_back(x);
                obs[v].push_back(1);
            }
        }
    }
    s.length = s.variates ? vals[0].size() : 0;
    if (s.length == 0) throw std::runtime_error("series CSV: no data rows");
    for (std::size_t v = 0; v < s.variates; ++v) {
        s.values.insert(s.values.end(), vals[v].begin(), vals[v].end());
        s.observed.insert(s.observed.end(), obs[v].begin(), obs[v].end());
    }
    return s;
}

inline RawSeries read_series_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open series CSV '" + path + "'");
    return read_series_csv(f);
}

inline void write_series_csv(std::ostream& out, const RawSeries& s) {
    for (std::size_t v = 0; v < s.variates; ++v) {
        if (v) out << ',';
        out << (v < s.names.size() ? s.names[v] : "v" + std::to_string(v));
    }
    out << '\n';
    out.precision(std::numeric_limits<double>::max_digits10);
    for (std::size_t t = 0; t < s.length; ++t) {
        for (std::size_t v = 0; v < s.variates; ++v) {
            if (v) out << ',';
            if (s.is_observed(v, t)) out << s.at(v, t);
        }
        out << '\n';
    }
}

inline void write_series_csv(const std::string& path, const RawSeries& s) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write series CSV '" + path + "'");
    write_series_csv(f, s);
}

/// Columns [begin, end) of every variate.
inline RawSeries slice_time(const RawSeries& s, std::size_t begin, std::size_t end) {
    if (begin >= end || end > s.length) throw std::out_of_range("slice_time: bad range");
    RawSeries out = s;
    out.length = end - begin;
    out.values.clear();
    out.observed.clear();
    for (std::size_t v = 0; v < s.variates; ++v)
        for (std::size_t t = begin; t < end; ++t) {
            out.values.push_back(s.at(v, t));
            out.observed.push_back(s.observed[v * s.length + t]);
        }
    return out;
}

}  // namespace patchfm
