#pragma once

// Synthetic series: multi-scale sinusoid mixtures, a simplified stochastic
// prior (trend with changepoints, seasonality, AR(1) noise), and a
// constrained mixture over named sources.

#include "patchfm/input.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

enum class GeneratorKind { sinusoid_mixture, stochastic_prior };

struct PriorParams {
    double slope_std = 0.01;        // per-segment slope ~ N(0, slope_std)
    double level_std = 1.0;         // intercept ~ N(0, level_std)
    double changepoint_rate = 2e-3; // expected changepoints per timestep
    double jump_std = 0.5;          // level jump at each changepoint
    double season_amplitude = 1.0;
    double season_period = 24;
    double ar_phi = 0.8;
    double noise_std = 0.2;         // innovation std of the AR(1) noise
};

struct GeneratorSpec {
    GeneratorKind kind = GeneratorKind::sinusoid_mixture;
    std::vector<double> periods;
    std::vector<double> amplitudes;  // empty means all ones
    std::optional<double> noise_std; // default 0.05 of the summed amplitudes
    PriorParams prior;
    std::uint64_t seed = 0;

    void validate() const {
        if (kind != GeneratorKind::sinusoid_mixture) return;
        if (periods.empty()) throw std::invalid_argument("sinusoid mixture needs at least one period");
        for (double p : periods)
            if (!(p > 1)) throw std::invalid_argument("sinusoid period must exceed 1, got " + std::to_string(p));
        if (!amplitudes.empty() && amplitudes.size() != periods.size())
            throw std::invalid_argument("periods and amplitudes differ in length");
        for (double a : amplitudes)
            if (!std::isfinite(a)) throw std::invalid_argument("non-finite amplitude");
        if (noise_std && !(*noise_std >= 0)) throw std::invalid_argument("noise_std must be >= 0");
    }

    double amplitude(std::size_t i) const { return amplitudes.empty() ? 1.0 : amplitudes[i]; }

    double resolved_noise() const {
        if (noise_std) return *noise_std;
        double total = 0;
        for (std::size_t i = 0; i < periods.size(); ++i) total += std::abs(amplitude(i));
        return 0.05 * total;
    }
};

/// The long-horizon study family: periods 500, 100 and 20, equal amplitudes.
inline GeneratorSpec long_horizon_spec() {
    GeneratorSpec s;
    s.periods = {500, 100, 20};
    return s;
}

/// Sum of amplitude · sin(2πt/period + phase) with independent uniform
/// phases per variate, plus Gaussian noise. Fully observed.
template <class Rng>
RawSeries gen_sinusoid_mixture(const GeneratorSpec& spec, std::size_t T, Rng& rng, std::size_t variates = 1) {
    spec.validate();
    double pmax = 0;
    for (double p : spec.periods) pmax = std::max(pmax, p);
    if (double(T) < pmax)
        throw std::invalid_argument("gen_sinusoid_mixture: length " + std::to_string(T) + " shorter than period " +
                                    std::to_string(pmax));
    RawSeries s(variates, T);
    std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double sd = spec.resolved_noise();
    for (std::size_t v = 0; v < variates; ++v) {
        std::vector<double> ph(spec.periods.size());
        for (auto& p : ph) p = phase(rng);
        for (std::size_t t = 0; t < T; ++t) {
            double x = 0;
            for (std::size_t i = 0; i < spec.periods.size(); ++i)
                x += spec.amplitude(i) * std::sin(2 * std::numbers::pi * double(t) / spec.periods[i] + ph[i]);
            if (sd > 0) x += sd * noise(rng);
            s.at(v, t) = x;
        }
    }
    return s;
}

/// Random draws from the sinusoid family used for training: 1..max_components
/// components with periods uniform in [min_period, max_period] and amplitudes
/// uniform in [min_amplitude, max_amplitude].
struct SinusoidFamily {
    double min_period = 4;
    double max_period = 64;
    std::size_t max_components = 3;
    double min_amplitude = 0.5;
    double max_amplitude = 1.5;
    std::optional<double> noise_std;

    template <class Rng>
    GeneratorSpec draw(Rng& rng) const {
        if (!(min_period > 1) || max_period < min_period || max_components == 0)
            throw std::invalid_argument("sinusoid family: invalid ranges");
        GeneratorSpec s;
        std::uniform_int_distribution<std::size_t> nc(1, max_components);
        std::uniform_real_distribution<double> per(min_period, max_period), amp(min_amplitude, max_amplitude);
        const std::size_t n = nc(rng);
        for (std::size_t i = 0; i < n; ++i) {
            s.periods.push_back(per(rng));
            s.amplitudes.push_back(amp(rng));
        }
        s.noise_std = noise_std;
        return s;
    }
};

struct PriorTrace {
    std::size_t changepoints = 0;
};

/// Piecewise-linear trend whose changepoint count is Poisson(rate · T) with
/// uniform locations (each changepoint redraws the slope and adds a level
/// jump), plus a sinusoidal season and AR(1) noise.
template <class Rng>
RawSeries gen_stochastic_prior(const GeneratorSpec& spec, std::size_t T, Rng& rng, PriorTrace* trace = nullptr) {
    const auto& p = spec.prior;
    if (T == 0) throw std::invalid_argument("gen_stochastic_prior: empty length");
    if (p.changepoint_rate < 0 || p.season_period <= 1 || std::abs(p.ar_phi) >= 1)
        throw std::invalid_argument("gen_stochastic_prior: invalid prior parameters");
    RawSeries s(1, T);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::poisson_distribution<std::size_t> count(p.changepoint_rate * double(T));
    const std::size_t n_cp = p.changepoint_rate > 0 ? count(rng) : 0;
    std::vector<std::size_t> cps(n_cp);
    std::uniform_int_distribution<std::size_t> where(0, T - 1);
    for (auto& c : cps) c = where(rng);
    std::sort(cps.begin(), cps.end());
    if (trace) trace->changepoints = n_cp;

    double level = p.level_std * normal(rng);
    double slope = p.slope_std * normal(rng);
    const double phase = 2 * std::numbers::pi * unit(rng);
    double ar = 0;
    std::size_t next = 0;
    for (std::size_t t = 0; t < T; ++t) {
        while (next < cps.size() && cps[next] == t) {
            slope = p.slope_std * normal(rng);
            level += p.jump_std * normal(rng);
            ++next;
        }
        if (t > 0) level += slope;
        ar = p.ar_phi * ar + (p.noise_std > 0 ? p.noise_std * normal(rng) : 0.0);
        const double season = p.season_amplitude * std::sin(2 * std::numbers::pi * double(t) / p.season_period + phase);
        s.at(0, t) = level + season + ar;
    }
    return s;
}

template <class Rng>
RawSeries generate(const GeneratorSpec& spec, std::size_t T, Rng& rng, std::size_t variates = 1) {
    if (spec.kind == GeneratorKind::sinusoid_mixture) return gen_sinusoid_mixture(spec, T, rng, variates);
    RawSeries out(variates, T);
    for (std::size_t v = 0; v < variates; ++v) {
        auto one = gen_stochastic_prior(spec, T, rng);
        for (std::size_t t = 0; t < T; ++t) out.at(v, t) = one.at(0, t);
    }
    return out;
}

struct MixtureSource {
    std::string name;
    double weight = 0;
    double lower = 0;
    double upper = 1;
};

struct MixtureConfig {
    std::vector<MixtureSource> sources;
};

/// Every bound and simplex violation, one message each. Empty means valid.
inline std::vector<std::string> validate_mixture(const MixtureConfig& cfg) {
    std::vector<std::string> out;
    if (cfg.sources.empty()) out.push_back("mixture has no sources");
    double sum = 0;
    for (const auto& s : cfg.sources) {
        sum += s.weight;
        if (!std::isfinite(s.weight) || s.weight < 0) out.push_back("source '" + s.name + "': weight is not a probability");
        if (s.weight < s.lower) {
            std::ostringstream m;
            m << "source '" << s.name << "': weight " << s.weight << " below lower bound " << s.lower;
            out.push_back(m.str());
        }
        if (s.weight > s.upper) {
            std::ostringstream m;
            m << "source '" << s.name << "': weight " << s.weight << " above upper bound " << s.upper;
            out.push_back(m.str());
        }
    }
    if (!cfg.sources.empty() && std::abs(sum - 1.0) > 1e-9) {
        std::ostringstream m;
        m << "sum ≠ 1 (weights sum to " << sum << ")";
        out.push_back(m.str());
    }
    return out;
}

template <class Rng>
const std::string& sample_source(const MixtureConfig& cfg, Rng& rng) {
    if (cfg.sources.empty()) throw std::invalid_argument("sample_source: empty mixture");
    std::vector<double> w;
    for (const auto& s : cfg.sources) w.push_back(s.weight);
    std::discrete_distribution<std::size_t> d(w.begin(), w.end());
    return cfg.sources[d(rng)].name;
}

}  // namespace patchfm
