// Acceptance checks, one per criterion: `acceptance <1..10> [--workdir DIR]`.
// Each prints a single PASS/FAIL line and exits non-zero on failure.

#include "patchfm/patchfm.hpp"

#include <CLI11.hpp>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

using namespace patchfm;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double x) {
    std::ostringstream o;
    o.precision(6);
    o << x;
    return o.str();
}

using Mat = Eigen::MatrixXd;

Mat gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = nd(rng);
    return m;
}

Array<double> to_array(const Mat& m) {
    Array<double> a({std::size_t(m.rows()), std::size_t(m.cols())});
    a.mat() = m;
    return a;
}

// ---- 1: gradient fidelity -------------------------------------------------------

Outcome criterion_1() {
    constexpr double kStep = 1e-4, kTol = 1e-4, kFloor = 1e-6, kGap = 0.02;
    RunConfig cfg;
    cfg.model = preset("desk-64");
    cfg.model.context_length = 8 * cfg.model.patch_size;
    cfg.data.variates = 2;
    Model<double> model(cfg.model, 1);
    std::mt19937_64 rng(2);
    RawSeries series = sample_series(cfg.data, cfg.model.context_length, rng);
    MaskPlan plan;
    do plan = sample_mask(8, cfg.cpm.c_max, cfg.cpm.p_max, rng);
    while (plan.masked_count() == 0 || plan.masked_count() == 8);
    auto batch = make_cpm_batch<double>({series}, {plan}, cfg.cpm, cfg.model.patch_size);

    // Move every target at least kGap away from all nine predictions.
    Graph<double> g0;
    const auto pred = g0.value(model.forward(g0, batch.tokens).quantiles);
    for (std::size_t i = 0; i < batch.target.size(); ++i) {
        double& y = batch.target[i];
        auto gap = [&] {
            double m = std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < kNumQuantiles; ++l) m = std::min(m, std::abs(y - pred[i * kNumQuantiles + l]));
            return m;
        };
        while (gap() < kGap) y += kGap;
    }

    Graph<double> g;
    Var loss = cpm_loss(g, model, batch);
    g.backward(loss);
    const auto grads = g.parameter_grads();
    auto loss_at = [&] {
        Graph<double> h;
        return h.value(cpm_loss(h, model, batch))[0];
    };
    double worst = 0;
    std::string worst_at;
    std::size_t probes = 0;
    for (const auto& info : model.layout()) {
        auto& leaf = model.param(info.name).leaf;
        const auto& an = grads.at(info.name);
        std::vector<std::size_t> idx;
        std::size_t big = 0;
        for (std::size_t i = 1; i < an.size(); ++i)
            if (std::abs(an[i]) > std::abs(an[big])) big = i;
        idx.push_back(big);
        std::uniform_int_distribution<std::size_t> pick(0, leaf.size() - 1);
        for (int k = 0; k < 3; ++k) idx.push_back(pick(rng));
        for (std::size_t i : idx) {
            const double orig = leaf[i];
            leaf[i] = orig + kStep;
            const double up = loss_at();
            leaf[i] = orig - kStep;
            const double dn = loss_at();
            leaf[i] = orig;
            const double fd = (up - dn) / (2 * kStep);
            const double rel = std::abs(fd - an[i]) / std::max({std::abs(fd), std::abs(an[i]), kFloor});
            ++probes;
            if (rel > worst) {
                worst = rel;
                worst_at = info.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return {worst <= kTol, "max rel error " + fmt(worst) + " at " + worst_at + " over " + std::to_string(probes) +
                               " coordinates (tol " + fmt(kTol) + ")"};
}

// ---- 2: pinball gradient ---------------------------------------------------------------

Outcome criterion_2() {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0, 3);
    std::uniform_real_distribution<double> ut(0, 1);
    std::size_t mismatches = 0, n = 0;
    Array<double> target({1, 1}), weight = Array<double>::ones({1, 1});
    while (n < 100000) {
        const double y = nd(rng), q = nd(rng);
        const double tau = ut(rng);
        if (y == q || tau == 0) continue;
        const double eq4 = y > q ? -tau : 1.0 - tau;
        Graph<double> g;
        Array<double> p({1, 1});
        p[0] = q;
        target[0] = y;
        Var pv = g.parameter("q", p);
        const double levels[1] = {tau};
        g.backward(g.quantile_loss(pv, target, weight, levels));
        if (g.grad(pv)[0] != eq4 || pinball_grad(y, q, tau) != eq4) ++mismatches;
        ++n;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches over " + std::to_string(n) + " triples (exact)"};
}

// ---- 3: orthogonalization -------------------------------------------------------------

Outcome criterion_3() {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<Eigen::Index> rows(2, 128), cols(2, 64);
    double worst_sv = 0, worst_rel = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::Index r = rows(rng), c = cols(rng);
        if (trial == 0) r = 128, c = 64;
        if (trial == 1) r = 64, c = 128;
        const Mat b = gaussian(r, c, rng);
        Mat o = orthogonalize(to_array(b)).mat();
        const auto sv = Eigen::JacobiSVD<Mat>(o).singularValues();
        worst_sv = std::max(worst_sv, (sv.array() - 1.0).abs().maxCoeff());
        Eigen::JacobiSVD<Mat> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Mat polar = svd.matrixU() * svd.matrixV().transpose();
        worst_rel = std::max(worst_rel, (o - polar).norm() / polar.norm());
    }
    return {worst_sv <= 0.05 && worst_rel <= 0.05,
            "max |sigma - 1| " + fmt(worst_sv) + " (tol 0.05), max Frobenius rel error vs SVD polar " + fmt(worst_rel) +
                " (tol 0.05) over 100 matrices"};
}

// ---- 4: NorMuon step equivalence -----------------------------------------------------

Mat reference_orthogonalize(const Mat& b) {
    Mat x = b / (b.norm() * 1.01 + 1e-7);
    const auto& sched = polar_schedule();
    for (std::size_t i = 0; i < kDefaultOrthoIterations; ++i) {
        const auto& c = sched[std::min(i, sched.size() - 1)];
        const Mat a = x * x.transpose();
        x = c[0] * x + c[1] * a * x + c[2] * a * a * x;
    }
    return x;
}

Outcome criterion_4() {
    std::mt19937_64 rng(5);
    const Mat target = gaussian(8, 8, rng), w0 = gaussian(8, 8, rng);
    NorMuonConfig cfg;
    cfg.weight_decay = 0.3;
    const double scale = 0.05, decay_scale = 0.65;
    Array<double> w = to_array(w0);
    NorMuonState<double> st;
    for (int step = 0; step < 2; ++step) {
        Array<double> grad = to_array(Mat(w.mat()) - target);
        normuon_step(w, grad, st, cfg, scale, decay_scale);
    }
    // Hand-unrolled: Nesterov lookahead, orthogonalize, row EMA normalization,
    // cautious decay where W and the update agree in sign.
    Mat W = w0, B = Mat::Zero(8, 8);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(8);
    for (int step = 0; step < 2; ++step) {
        const Mat G = W - target;
        B = 0.96 * B + G;
        const Mat O = reference_orthogonalize(G + 0.96 * B);
        Mat U(8, 8);
        for (int r = 0; r < 8; ++r) {
            v(r) = 0.999 * v(r) + 0.001 * O.row(r).squaredNorm() / 8.0;
            U.row(r) = O.row(r) / std::sqrt(v(r) + 1e-8);
        }
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) {
                if (W(i, j) * U(i, j) > 0) W(i, j) -= 0.3 * decay_scale * W(i, j);
                W(i, j) -= scale * U(i, j);
            }
    }
    const double err = (Mat(w.mat()) - W).cwiseAbs().maxCoeff();
    return {err <= 1e-10, "max abs difference " + fmt(err) + " (tol 1e-10)"};
}

// ---- 5: learning-rate transfer -------------------------------------------------------

Outcome criterion_5(const std::string& workdir) {
    RunConfig base;
    base.model = preset("desk-64");
    base.steps = 2000;
    base.seed = 0;
    MuCheckSpec spec;
    spec.widths = {64, 128, 256};
    spec.layers = 4;
    const auto rep = mu_check(spec, base, workdir + "/criterion_5", [](const MuCheckRow& r) {
        std::cerr << "width " << r.width << " lr " << r.lr << " validation " << r.validation_loss
                  << (r.diverged ? " diverged" : "") << std::endl;
    });
    std::string argmins;
    for (const auto& [w, k] : rep.argmin) argmins += " " + std::to_string(w) + ":" + fmt(spec.lr_grid[k]);
    return {rep.drift <= 1, "argmin lr per width" + argmins + "; drift " + std::to_string(rep.drift) + " grid steps (max 1)"};
}

// ---- 6: decoding equivalences --------------------------------------------------------

RawSeries noisy_sines(std::size_t V, std::size_t T, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0, 0.2);
    RawSeries s(V, T);
    for (std::size_t v = 0; v < V; ++v)
        for (std::size_t t = 0; t < T; ++t)
            s.at(v, t) = 5.0 * double(v) + std::sin(2 * std::numbers::pi * double(t) / (17.0 + 6.0 * double(v))) + nd(rng);
    return s;
}

Outcome criterion_6() {
    ModelConfig mc = preset("desk-64");
    mc.context_length = 2048;
    Model<float> model(mc, 6);
    const auto ctx = noisy_sines(2, 600, 7);
    bool bitwise = true;
    double cache_err = 0;
    std::string passes;
    bool counts = true;
    for (std::size_t horizon : {32, 256, 1024}) {
        const std::size_t K = horizon / mc.patch_size;
        const auto single = forecast_series(model, ctx, {horizon, DecodeMode::single_pass, 1, true});
        const auto block = forecast_series(model, ctx, {horizon, DecodeMode::block, K, true});
        bitwise = bitwise && single.forecast.values == block.forecast.values;
        counts = counts && single.forward_passes == 1;
        passes += " " + std::to_string(horizon) + ":" + std::to_string(single.forward_passes);
    }
    for (std::size_t B : {1, 3, 4}) {
        const auto on = forecast_series(model, ctx, {256, DecodeMode::block, B, true});
        const auto off = forecast_series(model, ctx, {256, DecodeMode::block, B, false});
        for (std::size_t i = 0; i < on.model_space.values.size(); ++i)
            cache_err = std::max(cache_err, std::abs(on.model_space.values[i] - off.model_space.values[i]));
    }
    return {bitwise && counts && cache_err <= 1e-4,
            std::string("block(B=K) bitwise equal to single pass: ") + (bitwise ? "yes" : "no") +
                "; single-pass forward passes" + passes + "; cached vs recomputed max abs diff " + fmt(cache_err) +
                " (tol 1e-4, float32)"};
}

// ---- 7: mask sampler ---------------------------------------------------------------

// Independent implementation of the span scan.
double oracle_masked_fraction(std::size_t N, std::size_t c_max, double p_max, std::size_t draws, std::uint64_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    double total = 0;
    for (std::size_t d = 0; d < draws; ++d) {
        const double p = u(rng) * p_max;
        std::size_t pos = 0, masked = 0;
        while (pos < N) {
            if (u(rng) < p) {
                const std::size_t len = 1 + std::size_t(u(rng) * double(c_max)) % c_max;
                const std::size_t take = std::min(len, N - pos);
                masked += take;
                pos += take;
            } else {
                pos += 1;
            }
        }
        total += double(masked) / double(N);
    }
    return total / double(draws);
}

Outcome criterion_7() {
    std::mt19937_64 rng(8);
    const std::size_t draws = 100000;
    double total = 0;
    for (std::size_t d = 0; d < draws; ++d) total += double(sample_mask(128, 16, 0.4, rng).masked_count()) / 128.0;
    const double ours = total / double(draws), oracle = oracle_masked_fraction(128, 16, 0.4, draws, 9);
    return {std::abs(ours - oracle) <= 0.01,
            "masked fraction " + fmt(ours) + " vs oracle " + fmt(oracle) + " (tol 0.01, 1e5 draws)"};
}

// ---- 8: quantile validity -----------------------------------------------------------

Outcome criterion_8() {
    std::size_t forecasts = 0, violations = 0;
    auto check = [&](const ForecastOutput& out, const RawSeries& ctx) {
        ++forecasts;
        if (!quantiles_monotone(out.forecast)) ++violations;
        for (std::size_t v = 0; v < ctx.variates; ++v) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo;
            for (std::size_t t = 0; t < ctx.length; ++t)
                if (ctx.is_observed(v, t)) lo = std::min(lo, ctx.at(v, t)), hi = std::max(hi, ctx.at(v, t));
            const auto& b = out.bounds[v];
            if (std::isfinite(lo) && (b.lower > lo || b.upper < hi)) ++violations;
            for (std::size_t t = 0; t < out.forecast.horizon; ++t)
                for (std::size_t l = 0; l < kNumQuantiles; ++l) {
                    const double q = out.forecast.at(v, t, l);
                    if (!(q >= b.lower && q <= b.upper)) ++violations;
                }
        }
    };
    ModelConfig mc = preset("desk-64");
    mc.context_length = 1024;
    std::mt19937_64 rng(10);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        Model<float> model(mc, seed);
        std::vector<RawSeries> contexts{noisy_sines(2, 300, seed), noisy_sines(1, 41, seed + 1)};
        RawSeries spiky = noisy_sines(3, 500, seed + 2);
        for (std::size_t t = 0; t < 500; t += 37) spiky.at(1, t) = 1e6;
        for (std::size_t t = 100; t < 180; ++t) spiky.set_missing(2, t);
        contexts.push_back(spiky);
        RawSeries flat(1, 200);
        for (auto& x : flat.values) x = 42.0;
        contexts.push_back(flat);
        for (const auto& ctx : contexts) {
            check(forecast_series(model, ctx, {64, DecodeMode::single_pass, 1, true}), ctx);
            check(forecast_series(model, ctx, {200, DecodeMode::block, 2, true}), ctx);
        }
    }
    // Scores on held-out synthetic series.
    RunConfig cfg;
    const auto series = held_out_series(cfg, 11, 20, 448, 64);
    double worst_owa = 0;
    bool perfect_zero = true;
    for (const auto& h : series) {
        const auto naive = seasonal_naive(h.context.values, h.season, 64);
        const Score mn = mase(naive, h.truth, h.context.values, h.season);
        const Score cn = crps_quantile(point_as_quantiles(naive, 1, 64), h.truth);
        const Score o = owa(mn, cn, mn, cn);
        worst_owa = std::max(worst_owa, o.present() ? std::abs(*o - 1.0) : 1.0);
        const Score perfect = crps_quantile(point_as_quantiles(h.truth, 1, 64), h.truth);
        perfect_zero = perfect_zero && perfect.present() && *perfect == 0.0;
    }
    return {violations == 0 && perfect_zero && worst_owa <= 1e-9,
            std::to_string(violations) + " monotonicity/clamp violations over " + std::to_string(forecasts) +
                " forecasts; perfect CRPS exactly 0: " + (perfect_zero ? "yes" : "no") + "; max |OWA(naive) - 1| " +
                fmt(worst_owa) + " (tol 1e-9)"};
}

// ---- 9: desk-scale learning ---------------------------------------------------------

Outcome criterion_9(const std::string& workdir) {
    RunConfig cfg;
    cfg.preset = "desk-128";
    cfg.model = preset("desk-128");
    cfg.steps = 10000;
    cfg.batch_size = 16;
    cfg.optimizer.lr_scale = 0.25;
    cfg.seed = 0;
    cfg.eval.series = 20;
    cfg.eval.horizon = 64;
    cfg.out_dir = workdir + "/criterion_9";
    TrainOptions opts;
    opts.on_step = [](const LossRecord& r) {
        if (r.step % 500 == 0) std::cerr << "step " << r.step << " loss " << r.loss << std::endl;
    };
    const auto run = train(cfg, opts);
    ForecastOptions fo;
    fo.horizon = 64;
    const auto s = evaluate_model(run.model, cfg, 999, fo);
    const double r = s.pearson.present() ? *s.pearson : std::numeric_limits<double>::quiet_NaN();
    std::ofstream(cfg.out_dir + "/eval.json") << json{{"pearson", r},
                                                      {"crps", s.crps.present() ? *s.crps : -1},
                                                      {"mase", s.mase.present() ? *s.mase : -1},
                                                      {"per_series_pearson", s.per_series_pearson}}
                                                     .dump(2)
                                              << '\n';
    return {r >= 0.8, "mean median-forecast Pearson r " + fmt(r) + " on 20 held-out series at horizon 64 (min 0.8); " +
                          "validation loss " + fmt(run.validation_loss)};
}

// ---- 10: structural audits ----------------------------------------------------------

Outcome criterion_10() {
    std::size_t audit_violations = 0;
    for (const auto& name : preset_names()) {
        const auto c = preset(name);
        const auto layout = model_layout(c);
        audit_violations += metadata_audit(layout, c).size() + partition_audit(layout).size();
    }
    Model<double> live(preset("desk-64"), 1);
    audit_violations += live.metadata_audit().size() + live.partition_audit().size();

    ModelConfig mc = preset("desk-64");
    mc.context_length = 512;
    mc.variate_attn_positions = {2, 4};
    Model<double> model(mc, 12);
    const std::size_t P = mc.patch_size, N = 8, V = 3;
    auto outputs = [&](const RawSeries& s) {
        const PatchGrid grid = patchify(to_model_space(causal_scale(s, P)), P);
        auto tb = tokens_from_grid<double>(grid, 0, N);
        Graph<double> g;
        return std::make_pair(g.value(model.forward(g, tb).quantiles), tb);
    };
    std::mt19937_64 rng(13);
    std::normal_distribution<double> nd;
    std::size_t causal_fail = 0;
    double perm_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
        RawSeries s(V, N * P);
        for (auto& x : s.values) x = 3 * nd(rng) + double(trial % 7);
        const auto [base, tb] = outputs(s);
        // Causality: rewrite everything after a random cut.
        const std::size_t cut = std::uniform_int_distribution<std::size_t>(0, N - 2)(rng);
        RawSeries fut = s;
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t t = (cut + 1) * P; t < N * P; ++t) fut.at(v, t) = 100 * nd(rng);
        const auto [pert, tb2] = outputs(fut);
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t n = 0; n <= cut; ++n)
                for (std::size_t c = 0; c < base.cols(); ++c)
                    if (base.at(tb.row(0, v, n), c) != pert.at(tb.row(0, v, n), c)) ++causal_fail;
        // Equivariance: permute variates.
        std::vector<std::size_t> perm(V);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        RawSeries ps(V, N * P);
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t t = 0; t < N * P; ++t) ps.at(v, t) = s.at(perm[v], t);
        const auto [pout, ptb] = outputs(ps);
        for (std::size_t v = 0; v < V; ++v)
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < base.cols(); ++c)
                    perm_err = std::max(perm_err, std::abs(pout.at(ptb.row(0, v, n), c) - base.at(tb.row(0, perm[v], n), c)));
    }
    return {audit_violations == 0 && causal_fail == 0 && perm_err <= 1e-12,
            std::to_string(audit_violations) + " audit violations over " + std::to_string(preset_names().size()) +
                " presets; " + std::to_string(causal_fail) + " causality violations and max permutation error " +
                fmt(perm_err) + " (tol 1e-12) over 100 random inputs"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchfm acceptance checks"};
    int criterion = 0;
    std::string workdir = "acceptance_runs";
    app.add_option("criterion", criterion, "criterion number")->required()->check(CLI::Range(1, 10));
    app.add_option("--workdir", workdir, "directory for run outputs");
    CLI11_PARSE(app, argc, argv);
    std::filesystem::create_directories(workdir);
    Outcome out;
    try {
        switch (criterion) {
            case 1: out = criterion_1(); break;
            case 2: out = criterion_2(); break;
            case 3: out = criterion_3(); break;
            case 4: out = criterion_4(); break;
            case 5: out = criterion_5(workdir); break;
            case 6: out = criterion_6(); break;
            case 7: out = criterion_7(); break;
            case 8: out = criterion_8(); break;
            case 9: out = criterion_9(workdir); break;
            case 10: out = criterion_10(); break;
        }
    } catch (const std::exception& e) {
        out = {false, std::string("error: ") + e.what()};
    }
    std::cout << "criterion " << criterion << ": " << (out.pass ? "PASS" : "FAIL") << " - " << out.detail << std::endl;
    return out.pass ? 0 : 1;
}
