#pragma once

// NorMuon for internal matrices, AdamW for everything else, cautious weight
// decay, global-norm clipping and the warmup-stable-decay schedule.

#include "patchfm/model.hpp"

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

using QuinticCoeffs = std::array<double, 3>;

/// Per-iteration odd quintic coefficients p(x) = a x + b x^3 + c x^5, fitted
/// greedily in minimax sense for singular values in [1e-4, 1]. The last
/// entries settle on a contraction around one, so further iterations are safe.
inline const std::vector<QuinticCoeffs>& polar_schedule() {
    static const std::vector<QuinticCoeffs> s{
        {8.50985792203652, -25.264051914025618, 18.753250178487356},
        {4.210961821872644, -3.0696528517342134, 0.5597061106770913},
        {4.2254021199037926, -3.1382246459539864, 0.5839715508738216},
        {4.125983790319552, -3.069107930392737, 0.5760846859499718},
        {3.7616539289855186, -2.811910378999599, 0.5467806186060709},
        {2.8631038021964663, -2.1395371988630183, 0.4707244505607512},
        {2.0233611102431457, -1.4065036793517776, 0.39096264336910846},
        {1.875927507965654, -1.2510347861336464, 0.3751076180100501},
        {1.8750001443701994, -1.2500002884969301, 0.37500014412673077},
    };
    return s;
}

/// The fixed Muon quintic, kept as an alternative schedule.
inline std::vector<QuinticCoeffs> muon_schedule(std::size_t iterations = 5) {
    return std::vector<QuinticCoeffs>(iterations, QuinticCoeffs{3.4445, -4.7750, 2.0315});
}

inline constexpr std::size_t kDefaultOrthoIterations = 8;

/// Approximate polar factor U·Vᵀ of `B`. Iteration i uses schedule[min(i, last)].
template <class T>
RowMat<T> orthogonalize(const RowMat<T>& B, std::size_t iterations = kDefaultOrthoIterations,
                        const std::vector<QuinticCoeffs>& schedule = polar_schedule()) {
    if (!B.allFinite()) throw std::domain_error("orthogonalize: non-finite input");
    if (schedule.empty()) throw std::invalid_argument("orthogonalize: empty coefficient schedule");
    RowMat<T> X = B / (T(B.norm() * 1.01) + T(1e-7));
    const bool tall = X.rows() > X.cols();
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto& c = schedule[std::min(i, schedule.size() - 1)];
        // The Gram matrix is taken on the short side; both forms give the same polynomial in X.
        RowMat<T> A = tall ? RowMat<T>(X.transpose() * X) : RowMat<T>(X * X.transpose());
        RowMat<T> P = T(c[1]) * A + T(c[2]) * (A * A);
        X = tall ? RowMat<T>(T(c[0]) * X + X * P) : RowMat<T>(T(c[0]) * X + P * X);
    }
    return X;
}

template <class T>
Array<T> orthogonalize(const Array<T>& B, std::size_t iterations = kDefaultOrthoIterations,
                       const std::vector<QuinticCoeffs>& schedule = polar_schedule()) {
    if (B.rank() != 2) throw ShapeError("orthogonalize: expects a matrix, got " + shape_str(B.shape()));
    RowMat<T> O = orthogonalize<T>(RowMat<T>(B.mat()), iterations, schedule);
    Array<T> out(B.shape());
    out.mat() = O;
    return out;
}

struct NorMuonConfig {
    double lr = 0.65;
    double momentum = 0.96;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 2e-8;
    bool nesterov = true;
    std::size_t iterations = kDefaultOrthoIterations;
    std::vector<QuinticCoeffs> schedule = polar_schedule();
};

struct AdamWConfig {
    double lr = 0.012;
    double beta1 = 0.91;
    double beta2 = 0.972;
    double eps = 1e-8;
    double weight_decay = 0;
};

template <class T>
struct NorMuonState {
    Array<T> momentum;    // B, shape of the parameter
    std::vector<T> v;     // one EMA per row
    std::size_t step = 0;
};

template <class T>
struct AdamWState {
    Array<T> m, v;
    std::size_t step = 0;
};

/// 1 where sign(w) == sign(update) and both are nonzero.
template <class T>
std::vector<std::uint8_t> cautious_decay_mask(const Array<T>& w, const Array<T>& update) {
    if (w.shape() != update.shape())
        throw ShapeError("cautious_decay_mask: " + shape_str(w.shape()) + " vs " + shape_str(update.shape()));
    std::vector<std::uint8_t> m(w.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        m[i] = (w[i] > 0 && update[i] > 0) || (w[i] < 0 && update[i] < 0);
    return m;
}

/// One NorMuon step on leaf `w`. `update_scale` is C_W times the schedule
/// multiplier; `decay_scale` multiplies weight_decay (learning rate times the
/// schedule multiplier, or zero to disable). Returns the normalized update.
template <class T>
Array<T> normuon_step(Array<T>& w, const Array<T>& grad, NorMuonState<T>& st, const NorMuonConfig& cfg,
                      double update_scale, double decay_scale) {
    if (w.rank() != 2) throw ShapeError("normuon_step: parameter must be a matrix, got " + shape_str(w.shape()));
    if (grad.shape() != w.shape())
        throw ShapeError("normuon_step: gradient " + shape_str(grad.shape()) + " vs parameter " + shape_str(w.shape()));
    if (st.momentum.empty()) {
        st.momentum = Array<T>(w.shape());
        st.v.assign(w.rows(), T(0));
    }
    if (st.momentum.shape() != w.shape() || st.v.size() != w.rows())
        throw ShapeError("normuon_step: optimizer state does not match parameter " + shape_str(w.shape()));
    ++st.step;
    st.momentum.mat() = T(cfg.momentum) * st.momentum.mat() + grad.mat();
    RowMat<T> lookahead = cfg.nesterov ? RowMat<T>(grad.mat() + T(cfg.momentum) * st.momentum.mat())
                                       : RowMat<T>(st.momentum.mat());
    RowMat<T> O = orthogonalize<T>(lookahead, cfg.iterations, cfg.schedule);
    Array<T> U(w.shape());
    const auto cols = T(w.cols());
    for (Eigen::Index r = 0; r < O.rows(); ++r) {
        const T ms = O.row(r).squaredNorm() / cols;
        st.v[r] = T(cfg.beta2) * st.v[r] + T(1 - cfg.beta2) * ms;
        U.mat().row(r) = O.row(r) / std::sqrt(st.v[r] + T(cfg.eps));
    }
    if (cfg.weight_decay != 0 && decay_scale != 0) {
        const auto mask = cautious_decay_mask(w, U);
        const T d = T(decay_scale * cfg.weight_decay);
        for (std::size_t i = 0; i < w.size(); ++i)
            if (mask[i]) w[i] -= d * w[i];
    }
    w.mat() -= T(update_scale) * U.mat();
    return U;
}

/// Bias-corrected AdamW on leaf `w`; decay is decoupled and skipped when
/// decay_scale is zero.
template <class T>
void adamw_step(Array<T>& w, const Array<T>& grad, AdamWState<T>& st, const AdamWConfig& cfg, double update_scale,
                double decay_scale) {
    if (grad.shape() != w.shape())
        throw ShapeError("adamw_step: gradient " + shape_str(grad.shape()) + " vs parameter " + shape_str(w.shape()));
    if (st.m.empty()) {
        st.m = Array<T>(w.shape());
        st.v = Array<T>(w.shape());
    }
    if (st.m.shape() != w.shape()) throw ShapeError("adamw_step: optimizer state does not match parameter");
    ++st.step;
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    const T c1 = T(1 - std::pow(cfg.beta1, double(st.step)));
    const T c2 = T(1 - std::pow(cfg.beta2, double(st.step)));
    const T d = T(decay_scale * cfg.weight_decay);
    for (std::size_t i = 0; i < w.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (T(1) - b1) * grad[i];
        st.v[i] = b2 * st.v[i] + (T(1) - b2) * grad[i] * grad[i];
        const T mh = st.m[i] / c1, vh = st.v[i] / c2;
        if (d != T(0)) w[i] -= d * w[i];
        w[i] -= T(update_scale) * mh / (std::sqrt(vh) + T(cfg.eps));
    }
}

enum class DecayShape { linear, one_minus_sqrt };

struct Schedule {
    std::size_t warmup_steps = 6000;
    std::size_t total_steps = 30000;
    std::size_t decay_steps = 10500;
    DecayShape decay_shape = DecayShape::linear;

    void validate() const {
        if (warmup_steps + decay_steps > total_steps)
            throw std::invalid_argument("schedule: warmup (" + std::to_string(warmup_steps) + ") + decay (" +
                                        std::to_string(decay_steps) + ") exceeds total steps (" +
                                        std::to_string(total_steps) + ")");
    }
};

/// Learning-rate multiplier in [0, 1] at `step` (0-based, up to total).
inline double wsd_lr(const Schedule& s, std::size_t step) {
    if (step > s.total_steps)
        throw std::out_of_range("wsd_lr: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
    if (step < s.warmup_steps) return double(step) / double(s.warmup_steps);
    const std::size_t decay_start = s.total_steps - s.decay_steps;
    if (step < decay_start || s.decay_steps == 0) return 1.0;
    const double frac = double(step - decay_start) / double(s.decay_steps);
    return s.decay_shape == DecayShape::linear ? 1.0 - frac : 1.0 - std::sqrt(frac);
}

inline DecayShape decay_shape_from_string(std::string_view v) {
    if (v == "linear") return DecayShape::linear;
    if (v == "one_minus_sqrt") return DecayShape::one_minus_sqrt;
    throw std::invalid_argument("unknown decay shape '" + std::string(v) + "'");
}

inline std::string_view to_string(DecayShape d) { return d == DecayShape::linear ? "linear" : "one_minus_sqrt"; }

/// Global-norm clipping in place; returns the norm before clipping.
template <class T>
double clip_gradients(std::map<std::string, Array<T>>& grads, double threshold = 7.0) {
    if (!(threshold > 0)) throw std::invalid_argument("clip_gradients: threshold must be positive");
    double sq = 0;
    for (const auto& [name, g] : grads) {
        for (const T& x : g.vec()) {
            if (!std::isfinite(double(x))) throw std::domain_error("non-finite gradient in parameter '" + name + "'");
            sq += double(x) * double(x);
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > threshold) {
        const T s = T(threshold / norm);
        for (auto& [name, g] : grads) g.mat() *= s;
    }
    return norm;
}

struct OptimizerConfig {
    NorMuonConfig normuon;
    AdamWConfig adamw;
    Schedule schedule;
    double clip = 7.0;
    /// Multiplies both learning rates; used by learning-rate sweeps.
    double lr_scale = 1.0;
};

struct StepStats {
    double grad_norm = 0;
    double lr_multiplier = 0;
};

/// Applies clipping, the schedule and the per-group optimizers to a model.
template <class T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.schedule.validate(); }

    const OptimizerConfig& config() const { return cfg_; }

    /// `step` is the 0-based index of the update being taken.
    StepStats step(Model<T>& model, std::map<std::string, Array<T>> grads, std::size_t step) {
        StepStats st;
        st.grad_norm = clip_gradients(grads, cfg_.clip);
        st.lr_multiplier = wsd_lr(cfg_.schedule, std::min(step, cfg_.schedule.total_steps));
        for (auto& p : model.params()) {
            auto it = grads.find(p.name);
            if (it == grads.end()) throw std::logic_error("optimizer: no gradient for parameter '" + p.name + "'");
            const double s = st.lr_multiplier;
            if (p.group == OptimizerGroup::normuon) {
                const double eta = cfg_.normuon.lr * cfg_.lr_scale;
                normuon_step(p.leaf, it->second, normuon_[p.name], cfg_.normuon, update_multiplier(p.meta, eta) * s,
                             p.decay ? eta * s : 0.0);
            } else {
                const double eta = cfg_.adamw.lr * cfg_.lr_scale;
                adamw_step(p.leaf, it->second, adamw_[p.name], cfg_.adamw, update_multiplier(p.meta, eta) * s,
                           p.decay ? eta * s : 0.0);
            }
        }
        return st;
    }

private:
    OptimizerConfig cfg_;
    std::map<std::string, NorMuonState<T>> normuon_;
    std::map<std::string, AdamWState<T>> adamw_;
};

}  // namespace patchfm
