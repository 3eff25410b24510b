#pragma once

// End-to-end inference: forward-fill, causal scaling, arcsinh, patching,
// decoding, quantile sorting, inverse transform and clamping.

#include "patchfm/config.hpp"
#include "patchfm/cpm.hpp"
#include "patchfm/eval.hpp"
#include "patchfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace patchfm {

struct ForecastOptions {
    std::size_t horizon = 64;
    DecodeMode mode = DecodeMode::single_pass;
    std::size_t block = 1;
    bool use_cache = true;
};

struct ForecastOutput {
    QuantileForecast forecast;     // real space, sorted, clamped; horizon steps
    QuantileForecast model_space;  // raw head outputs for the same steps
    std::size_t forward_passes = 0;
    std::size_t context_patches = 0;
    std::vector<ClampBounds> bounds;  // per variate
};

template <class T>
ForecastOutput forecast_series(const Model<T>& model, const RawSeries& context, const ForecastOptions& opt) {
    if (opt.horizon == 0) throw std::invalid_argument("forecast: horizon must be >= 1");
    if (context.length == 0 || context.variates == 0) throw std::invalid_argument("forecast: empty context");
    const std::size_t P = model.config().patch_size;
    const std::size_t cap = model.config().max_patches();
    const std::size_t K = (opt.horizon + P - 1) / P;
    const std::size_t reserve = opt.mode == DecodeMode::single_pass ? K : std::min(opt.block, K);
    if (reserve >= cap) {
        if (opt.mode == DecodeMode::single_pass)
            throw std::length_error("horizon " + std::to_string(opt.horizon) + " needs " + std::to_string(K) +
                                    " patches, beyond the single-pass capacity of " + std::to_string(cap - 1) +
                                    "; use block mode (--mode block)");
        throw std::length_error("block size leaves no room for context");
    }
    RawSeries filled = forward_fill(context);
    const std::size_t keep = (cap - reserve) * P;
    if (filled.length > keep) filled = slice_time(filled, filled.length - keep, filled.length);
    RawSeries padded = pad_left(filled, P);
    const ScaledSeries scaled = to_model_space(causal_scale(padded, P));
    const PatchGrid grid = patchify(scaled, P);

    DecodeResult dec = decode(model, grid, K, opt.mode, opt.block, opt.use_cache);
    ForecastOutput out;
    out.forward_passes = dec.forward_passes;
    out.context_patches = grid.patches;
    const std::size_t V = context.variates;
    out.model_space = QuantileForecast(V, opt.horizon);
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t t = 0; t < opt.horizon; ++t)
            for (std::size_t l = 0; l < kNumQuantiles; ++l) out.model_space.at(v, t, l) = dec.forecast.at(v, t, l);
    out.forecast = sort_quantiles(out.model_space);
    out.forecast.real_space = true;
    for (std::size_t v = 0; v < V; ++v) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t t = 0; t < context.length; ++t)
            if (context.is_observed(v, t)) {
                lo = std::min(lo, context.at(v, t));
                hi = std::max(hi, context.at(v, t));
            }
        if (!std::isfinite(lo)) lo = hi = scaled.forecast_loc[v];
        const double loc = scaled.forecast_loc[v], sc = scaled.forecast_scale[v];
        auto span = std::span<double>(out.forecast.values).subspan(v * opt.horizon * kNumQuantiles, opt.horizon * kNumQuantiles);
        for (auto& q : span) q = inverse_transform(q, loc, sc);
        clamp_forecast(span, lo, hi, sc);
        out.bounds.push_back(clamp_bounds(lo, hi, sc));
    }
    return out;
}

/// Median (tau = 0.5) path of one variate.
inline std::vector<double> median_path(const QuantileForecast& f, std::size_t v) {
    std::vector<double> m(f.horizon);
    for (std::size_t t = 0; t < f.horizon; ++t) m[t] = f.at(v, t, kMedianIndex);
    return m;
}

struct HeldOutSeries {
    RawSeries context;
    std::vector<double> truth;  // variate-major, horizon steps
    std::size_t season = 1;
};

/// Held-out single-variate series from the configured data sources; the
/// MASE season is the period of the strongest sinusoid component when known.
inline std::vector<HeldOutSeries> held_out_series(const RunConfig& cfg, std::uint64_t seed, std::size_t count,
                                                  std::size_t context, std::size_t horizon) {
    std::mt19937_64 rng(seed);
    std::vector<HeldOutSeries> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::string& src = sample_source(cfg.data.mixture, rng);
        GeneratorSpec spec;
        std::size_t season = 1;
        RawSeries full;
        if (src == "sinusoid") {
            spec = cfg.data.sinusoid.draw(rng);
            std::size_t best = 0;
            for (std::size_t c = 1; c < spec.periods.size(); ++c)
                if (std::abs(spec.amplitude(c)) > std::abs(spec.amplitude(best))) best = c;
            season = std::max<std::size_t>(1, std::size_t(std::lround(spec.periods[best])));
            full = gen_sinusoid_mixture(spec, context + horizon, rng);
        } else {
            full = gen_stochastic_prior(cfg.data.prior, context + horizon, rng);
            season = std::size_t(std::lround(cfg.data.prior.prior.season_period));
        }
        HeldOutSeries h;
        h.context = slice_time(full, 0, context);
        h.truth.assign(full.values.begin() + std::ptrdiff_t(context), full.values.end());
        h.season = season < context ? season : 1;
        out.push_back(std::move(h));
    }
    return out;
}

struct EvalSummary {
    Score crps, mase, pearson, owa;
    std::vector<double> per_series_pearson;
};

inline double mean_present(const std::vector<Score>& s, std::size_t* n = nullptr) {
    double total = 0;
    std::size_t c = 0;
    for (const auto& x : s)
        if (x.present()) {
            total += *x;
            ++c;
        }
    if (n) *n = c;
    return c ? total / double(c) : std::numeric_limits<double>::quiet_NaN();
}

/// Scores a model on held-out series: CRPS, MASE and OWA against the
/// seasonal-naive forecast, and the Pearson r of the median path.
template <class T>
EvalSummary evaluate_model(const Model<T>& model, const RunConfig& cfg, std::uint64_t seed,
                           const ForecastOptions& opt) {
    auto series = held_out_series(cfg, seed, cfg.eval.series, cfg.eval.context, opt.horizon);
    std::vector<Score> crps, ms, pr, ow;
    EvalSummary s;
    for (const auto& h : series) {
        auto f = forecast_series(model, h.context, opt);
        auto med = median_path(f.forecast, 0);
        const auto& insample = h.context.values;
        auto naive = seasonal_naive(insample, h.season, opt.horizon);
        Score c = crps_quantile(f.forecast, h.truth);
        Score m = mase(med, h.truth, insample, h.season);
        Score cn = crps_quantile(point_as_quantiles(naive, 1, opt.horizon), h.truth);
        Score mn = mase(naive, h.truth, insample, h.season);
        Score p = pearson(med, h.truth);
        crps.push_back(c);
        ms.push_back(m);
        ow.push_back(owa(m, c, mn, cn));
        pr.push_back(p);
        s.per_series_pearson.push_back(p.present() ? *p : std::numeric_limits<double>::quiet_NaN());
    }
    auto agg = [](const std::vector<Score>& v) {
        std::size_t n = 0;
        double m = mean_present(v, &n);
        return n ? Score::of(m) : Score::absent("no series scored");
    };
    s.crps = agg(crps);
    s.mase = agg(ms);
    s.pearson = agg(pr);
    s.owa = agg(ow);
    return s;
}

}  // namespace patchfm
