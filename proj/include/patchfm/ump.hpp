#pragma once

// Unit-scaled maximal-update parametrization: each weight is stored as a
// unit-variance leaf w and used as A_W · w; optimizer steps on the leaf are
// scaled by C_W. The multiplier table below is what makes one learning rate
// serve every width.
//
//   kind    A_W (forward)     C_W (update)
//   hidden  1/sqrt(fan_in)    eta/sqrt(fan_in)
//   input   1/sqrt(fan_in)    eta            (fan_in is a data dimension)
//   output  1/fan_in          eta
//   bias    1                 eta
//   norm    1                 eta

#include "patchfm/tensor/array.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace patchfm {

enum class ParamKind { hidden, input, output, bias, norm };
enum class Parametrization { ump, standard };

inline std::string_view to_string(ParamKind k) {
    switch (k) {
        case ParamKind::hidden: return "hidden";
        case ParamKind::input: return "input";
        case ParamKind::output: return "output";
        case ParamKind::bias: return "bias";
        case ParamKind::norm: return "norm";
    }
    return "?";
}

inline ParamKind param_kind_from_string(std::string_view s) {
    if (s == "hidden") return ParamKind::hidden;
    if (s == "input") return ParamKind::input;
    if (s == "output") return ParamKind::output;
    if (s == "bias") return ParamKind::bias;
    if (s == "norm") return ParamKind::norm;
    throw std::invalid_argument("unknown parameter kind '" + std::string(s) + "'");
}

inline Parametrization parametrization_from_string(std::string_view s) {
    if (s == "ump") return Parametrization::ump;
    if (s == "standard") return Parametrization::standard;
    throw std::invalid_argument("unknown parametrization '" + std::string(s) + "'");
}

inline std::string_view to_string(Parametrization p) { return p == Parametrization::ump ? "ump" : "standard"; }

struct MuMetadata {
    std::size_t fan_in = 1;
    std::size_t fan_out = 1;
    ParamKind kind = ParamKind::hidden;
    double forward_multiplier = 1;      // A_W
    double update_multiplier_base = 1;  // C_W / eta
    Parametrization parametrization = Parametrization::ump;
};

/// Weights are (fan_out, fan_in); vectors have fan_in 1.
inline MuMetadata make_metadata(const Shape& shape, ParamKind kind, Parametrization p = Parametrization::ump) {
    if (shape.empty() || numel(shape) == 0) throw std::invalid_argument("make_metadata: empty shape");
    MuMetadata m;
    m.kind = kind;
    m.parametrization = p;
    const bool vector_kind = kind == ParamKind::bias || kind == ParamKind::norm;
    if (vector_kind) {
        if (shape.size() != 1) throw std::invalid_argument(std::string(to_string(kind)) + " must be rank 1, got " + shape_str(shape));
        m.fan_in = 1;
        m.fan_out = shape[0];
    } else {
        if (shape.size() != 2) throw std::invalid_argument(std::string(to_string(kind)) + " must be rank 2, got " + shape_str(shape));
        m.fan_out = shape[0];
        m.fan_in = shape[1];
    }
    if (p == Parametrization::standard) return m;
    const double s = 1.0 / std::sqrt(double(m.fan_in));
    switch (kind) {
        case ParamKind::hidden:
            m.forward_multiplier = s;
            m.update_multiplier_base = s;
            break;
        case ParamKind::input: m.forward_multiplier = s; break;
        case ParamKind::output: m.forward_multiplier = 1.0 / double(m.fan_in); break;
        case ParamKind::bias:
        case ParamKind::norm: break;
    }
    return m;
}

/// Unit-normal leaf for weight kinds (scaled to 1/sqrt(fan_in) variance under
/// the standard parametrization); biases start at zero and norm gains at one.
template <class T, class Rng>
std::pair<Array<T>, MuMetadata> init_param(const Shape& shape, ParamKind kind, Rng& rng,
                                           Parametrization p = Parametrization::ump) {
    if (shape.empty() || numel(shape) == 0) throw std::invalid_argument("init_param: zero-sized shape");
    for (auto d : shape)
        if (d == 0) throw std::invalid_argument("init_param: zero-sized shape " + shape_str(shape));
    MuMetadata meta = make_metadata(shape, kind, p);
    Array<T> leaf(shape);
    if (kind == ParamKind::bias) return {leaf, meta};
    if (kind == ParamKind::norm) {
        leaf.fill(T(1));
        return {leaf, meta};
    }
    const double sd = p == Parametrization::ump ? 1.0 : 1.0 / std::sqrt(double(meta.fan_in));
    std::normal_distribution<double> dist(0.0, sd);
    for (auto& x : leaf.vec()) x = T(dist(rng));
    return {leaf, meta};
}

template <class T>
Array<T> effective_weight(const Array<T>& leaf, const MuMetadata& meta) {
    Array<T> out = leaf;
    out.mat() *= T(meta.forward_multiplier);
    return out;
}

inline double update_multiplier(const MuMetadata& meta, double eta) { return eta * meta.update_multiplier_base; }

struct ResidualScales {
    double alpha_res = 0.75;
    double alpha_res_attn_ratio = 1;
    std::size_t S = 2;
};

/// Residual branch weights for a context of S = context_length / patch_size
/// tokens. Attention branches carry the extra sqrt(S / ln S) factor.
inline ResidualScales residual_scales(std::size_t context_length, std::size_t patch_size) {
    if (patch_size == 0 || context_length % patch_size)
        throw std::invalid_argument("context_length " + std::to_string(context_length) +
                                    " is not a multiple of patch_size " + std::to_string(patch_size));
    const std::size_t S = context_length / patch_size;
    if (S < 2) throw std::invalid_argument("residual_scales: need at least 2 patches, got " + std::to_string(S));
    return ResidualScales{0.75, std::sqrt(double(S) / std::log(double(S))), S};
}

}  // namespace patchfm
