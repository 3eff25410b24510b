#pragma once

// CPM training: sample series, sample a mask plan, scale with the masked
// entries hidden from the scaler, forward, weighted pinball loss, clip, step.

#include "patchfm/checkpoint.hpp"
#include "patchfm/config.hpp"
#include "patchfm/cpm.hpp"
#include "patchfm/optim.hpp"
#include "patchfm/synth.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

/// Series of `length` steps with data.variates variates from one mixture source.
template <class Rng>
RawSeries sample_series(const DataConfig& data, std::size_t length, Rng& rng) {
    const std::string& source = sample_source(data.mixture, rng);
    RawSeries out(data.variates, length);
    for (std::size_t v = 0; v < data.variates; ++v) {
        RawSeries one;
        if (source == "sinusoid") {
            GeneratorSpec spec = data.sinusoid.draw(rng);
            std::size_t len = length;
            for (double p : spec.periods) len = std::max(len, std::size_t(std::ceil(p)));
            one = gen_sinusoid_mixture(spec, len, rng);
        } else {
            one = gen_stochastic_prior(data.prior, length, rng);
        }
        for (std::size_t t = 0; t < length; ++t) out.at(v, t) = one.at(0, t);
    }
    return out;
}

template <class T>
struct CpmBatch {
    TokenBatch<T> tokens;
    Array<T> target;  // rows x P, model space
    Array<T> weight;  // rows x P
    std::vector<MaskPlan> plans;
};

/// Builds the training batch for equally shaped samples. Targets are the
/// original values mapped through the same per-step statistics the inputs
/// used; unobserved targets get weight zero.
template <class T>
CpmBatch<T> make_cpm_batch(const std::vector<RawSeries>& samples, const std::vector<MaskPlan>& plans,
                           const CpmConfig& cpm, std::size_t P = kPatchSize) {
    if (samples.empty() || samples.size() != plans.size()) throw std::invalid_argument("make_cpm_batch: bad sample count");
    const std::size_t V = samples[0].variates, L = samples[0].length;
    if (L % P) throw std::invalid_argument("make_cpm_batch: series length must be a multiple of the patch size");
    const std::size_t N = L / P;
    CpmBatch<T> b;
    b.plans = plans;
    b.tokens.batch = samples.size();
    b.tokens.variates = V;
    b.tokens.positions = N;
    b.tokens.features = Array<T>({b.tokens.rows(), 2 * P});
    b.tokens.missing.assign(b.tokens.rows(), 0);
    b.target = Array<T>({b.tokens.rows(), P});
    b.weight = Array<T>({b.tokens.rows(), P});
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto& raw = samples[s];
        const auto& plan = plans[s];
        if (raw.variates != V || raw.length != L || plan.patches != N)
            throw std::invalid_argument("make_cpm_batch: samples differ in shape");
        RawSeries hidden = raw;
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t n = 0; n < N; ++n)
                if (plan.masked[n])
                    for (std::size_t k = 0; k < P; ++k) hidden.set_missing(v, n * P + k);
        const ScaledSeries sc = to_model_space(causal_scale(hidden, P));
        const PatchGrid grid = patchify(sc, P);
        for (std::size_t v = 0; v < V; ++v) {
            // With every entry hidden there are no statistics to express targets in.
            bool visible = false;
            for (std::size_t t = 0; t < L && !visible; ++t) visible = hidden.is_observed(v, t);
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t r = b.tokens.row(s, v, n);
                bool any = false;
                for (std::size_t k = 0; k < P; ++k) {
                    const std::size_t t = n * P + k, i = grid.index(v, n, k);
                    b.tokens.features.at(r, k) = grid.mask[i] ? T(0) : T(grid.values[i]);
                    b.tokens.features.at(r, P + k) = grid.mask[i] ? T(1) : T(0);
                    const bool obs = raw.is_observed(v, t);
                    any = any || obs;
                    const std::size_t j = v * L + t;
                    b.target.at(r, k) = obs ? T(std::asinh((raw.at(v, t) - sc.loc[j]) / sc.scale[j])) : T(0);
                    b.weight.at(r, k) = obs && visible && (!cpm.loss_on_masked_only || plan.masked[n]) ? T(1) : T(0);
                }
                b.tokens.missing[r] = !any;
            }
        }
    }
    return b;
}

template <class Rng>
std::pair<std::vector<RawSeries>, std::vector<MaskPlan>> sample_cpm_inputs(const RunConfig& cfg, Rng& rng) {
    std::vector<RawSeries> series;
    std::vector<MaskPlan> plans;
    const std::size_t N = cfg.model.max_patches();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        series.push_back(sample_series(cfg.data, cfg.model.context_length, rng));
        plans.push_back(sample_mask(N, cfg.cpm.c_max, cfg.cpm.p_max, rng));
    }
    return {std::move(series), std::move(plans)};
}

template <class T>
Var cpm_loss(Graph<T>& g, const Model<T>& model, const CpmBatch<T>& batch) {
    auto out = model.forward(g, batch.tokens);
    return g.quantile_loss(out.quantiles, batch.target, batch.weight, kQuantileLevels);
}

struct LossRecord {
    std::size_t step = 0;
    double loss = 0;
    double lr_multiplier = 0;
    double grad_norm = 0;
};

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainResult {
    Model<float> model;
    std::vector<LossRecord> curve;
    double validation_loss = 0;
    double seconds = 0;
};

inline std::uint64_t model_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ull + 0x5851F42D4C957F2Dull; }
inline std::uint64_t validation_seed(std::uint64_t seed) { return seed + 0xA5A5A5A5ull; }

/// Mean CPM loss over eval.validation_batches batches drawn from a held-out seed.
template <class T>
double validation_loss(const Model<T>& model, const RunConfig& cfg) {
    std::mt19937_64 rng(validation_seed(cfg.seed));
    double total = 0;
    for (std::size_t i = 0; i < cfg.eval.validation_batches; ++i) {
        auto [series, plans] = sample_cpm_inputs(cfg, rng);
        auto batch = make_cpm_batch<T>(series, plans, cfg.cpm, cfg.model.patch_size);
        Graph<T> g;
        total += double(g.value(cpm_loss(g, model, batch))[0]);
    }
    return cfg.eval.validation_batches ? total / double(cfg.eval.validation_batches) : 0.0;
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& curve) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << "step,loss,lr_multiplier,grad_norm\n";
    f.precision(9);
    for (const auto& r : curve) f << r.step << ',' << r.loss << ',' << r.lr_multiplier << ',' << r.grad_norm << '\n';
}

struct TrainOptions {
    bool write_outputs = true;
    bool compute_validation = true;
    std::function<void(const LossRecord&)> on_step;
};

/// Trains from scratch. Writes <out_dir>/config.json, loss.csv and the
/// checkpoint under <out_dir>/checkpoint when write_outputs is set.
inline TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(cfg.seed);
    TrainResult res{Model<float>(cfg.model, model_seed(cfg.seed)), {}, 0, 0};
    Optimizer<float> opt(cfg.optimizer_config());
    double last_lr = 0, last_norm = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto [series, plans] = sample_cpm_inputs(cfg, rng);
        auto batch = make_cpm_batch<float>(series, plans, cfg.cpm, cfg.model.patch_size);
        Graph<float> g;
        Var loss = cpm_loss(g, res.model, batch);
        const double value = double(g.value(loss)[0]);
        if (!std::isfinite(value)) {
            std::ostringstream m;
            m << "non-finite loss at step " << step << " (last lr multiplier " << last_lr << ", last grad norm "
              << last_norm << ")";
            throw TrainingDiverged(m.str());
        }
        g.backward(loss);
        StepStats st;
        try {
            st = opt.step(res.model, g.parameter_grads(), step + 1);
        } catch (const std::domain_error& e) {
            std::ostringstream m;
            m << e.what() << " at step " << step << " (loss " << value << ", last lr multiplier " << last_lr
              << ", last grad norm " << last_norm << ")";
            throw TrainingDiverged(m.str());
        }
        last_lr = st.lr_multiplier;
        last_norm = st.grad_norm;
        LossRecord rec{step, value, st.lr_multiplier, st.grad_norm};
        res.curve.push_back(rec);
        if (opts.on_step) opts.on_step(rec);
    }
    if (opts.compute_validation) res.validation_loss = validation_loss(res.model, cfg);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.write_outputs) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream(cfg.out_dir + "/config.json") << to_json(cfg).dump(2) << '\n';
        write_loss_csv(cfg.out_dir + "/loss.csv", res.curve);
        save_checkpoint(res.model, cfg.out_dir + "/checkpoint",
                        json{{"steps", cfg.steps}, {"seed", cfg.seed}, {"validation_loss", res.validation_loss}});
    }
    return res;
}

}  // namespace patchfm
