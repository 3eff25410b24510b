#pragma once

// Decoder-only patched transformer. Tokens are laid out row-major as
// (batch, variate, patch); time-axis layers attend causally along patches
// within one (batch, variate) sequence, variate-axis layers attend over the
// variates of one (batch, patch) slice.

#include "patchfm/input.hpp"
#include "patchfm/quantile.hpp"
#include "patchfm/tensor/graph.hpp"
#include "patchfm/ump.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace patchfm {

struct ModelConfig {
    std::size_t d_model = 256;
    std::size_t layers = 12;
    std::size_t heads = 4;
    std::size_t d_head = 64;
    std::size_t patch_size = kPatchSize;
    std::size_t context_length = 4096;
    /// 1-based layer indices that attend over variates; empty means the last.
    std::vector<std::size_t> variate_attn_positions;
    std::size_t max_variates = 32;
    std::size_t mlp_ratio = 4;
    double norm_eps = 1e-4;
    double rope_base = 10000;
    bool per_head_scale = true;
    Parametrization parametrization = Parametrization::ump;

    std::size_t max_patches() const { return context_length / patch_size; }
    std::size_t input_dim() const { return 2 * patch_size; }
    std::size_t output_dim() const { return patch_size * kNumQuantiles; }

    std::vector<std::size_t> variate_layers() const {
        return variate_attn_positions.empty() ? std::vector<std::size_t>{layers} : variate_attn_positions;
    }
    bool is_variate_layer(std::size_t layer0) const {
        auto v = variate_layers();
        return std::find(v.begin(), v.end(), layer0 + 1) != v.end();
    }

    void validate() const {
        if (d_model == 0 || layers == 0 || heads == 0 || d_head == 0 || patch_size == 0)
            throw std::invalid_argument("model config: dimensions must be positive");
        if (heads * d_head != d_model)
            throw std::invalid_argument("model config: heads x d_head (" + std::to_string(heads) + " x " +
                                        std::to_string(d_head) + ") != d_model " + std::to_string(d_model));
        if (d_head % 2) throw std::invalid_argument("model config: d_head must be even for rotary embeddings");
        if (context_length % patch_size || context_length / patch_size < 2)
            throw std::invalid_argument("model config: context_length must hold at least two whole patches");
        for (auto p : variate_layers())
            if (p < 1 || p > layers)
                throw std::invalid_argument("model config: variate_attn_position " + std::to_string(p) +
                                            " outside [1, " + std::to_string(layers) + "]");
    }
};

/// Geometry presets. desk-* sizes are the laptop-scale ladder; the named
/// sizes follow the published width/depth/head table with d_head = 64.
inline ModelConfig preset(std::string_view name) {
    ModelConfig c;
    auto geo = [&](std::size_t d, std::size_t l, std::size_t h, double eps) {
        c.d_model = d;
        c.layers = l;
        c.heads = h;
        c.norm_eps = eps;
    };
    if (name == "desk-64") {
        geo(64, 4, 1, 1e-4);
        c.context_length = 512;
    } else if (name == "desk-128") {
        geo(128, 6, 2, 1e-4);
        c.context_length = 512;
    } else if (name == "desk-256" || name == "proxy-10m") {
        geo(256, 12, 4, 1e-4);
        c.context_length = name == "proxy-10m" ? 4096 : 512;
    } else if (name == "4m") {
        geo(256, 4, 4, 1e-4);
    } else if (name == "22m") {
        geo(512, 6, 8, 1e-4);
    } else if (name == "313m") {
        geo(1024, 24, 16, 1e-4);
    } else if (name == "1b") {
        geo(1536, 36, 24, 5e-4);
    } else if (name == "2.5b") {
        geo(2048, 48, 32, 5e-4);
    } else {
        throw std::invalid_argument("unknown model preset '" + std::string(name) + "'");
    }
    return c;
}

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"desk-64", "desk-128", "desk-256", "proxy-10m",
                                                "4m",      "22m",      "313m",     "1b", "2.5b"};
    return names;
}

enum class OptimizerGroup { normuon, adamw };

inline std::string_view to_string(OptimizerGroup g) { return g == OptimizerGroup::normuon ? "normuon" : "adamw"; }

template <class T>
struct Param {
    std::string name;
    Array<T> leaf;
    MuMetadata meta;
    bool projection = false;  // part of the input or output projection
    OptimizerGroup group = OptimizerGroup::adamw;
    bool decay = false;
};

/// Internal matrices go to NorMuon with cautious decay; projections, biases
/// and norms go to AdamW without decay.
inline OptimizerGroup expected_group(ParamKind kind, bool projection) {
    return kind == ParamKind::hidden && !projection ? OptimizerGroup::normuon : OptimizerGroup::adamw;
}

/// Shape and bookkeeping of one parameter without its values.
struct ParamInfo {
    std::string name;
    Shape shape;
    MuMetadata meta;
    bool projection = false;
    OptimizerGroup group = OptimizerGroup::adamw;
    bool decay = false;
};

/// Every parameter a model with this config owns, in construction order.
inline std::vector<ParamInfo> model_layout(const ModelConfig& c) {
    std::vector<ParamInfo> out;
    auto add = [&](Shape shape, const std::string& name, ParamKind kind, bool projection) {
        const auto group = expected_group(kind, projection);
        out.push_back({name, shape, make_metadata(shape, kind, c.parametrization), projection, group,
                       group == OptimizerGroup::normuon});
    };
    const std::size_t d = c.d_model, in = c.input_dim(), o = c.output_dim(), hid = c.mlp_ratio * d;
    add({d, in}, "embed.res", ParamKind::input, true);
    add({d, in}, "embed.fc1", ParamKind::input, true);
    add({d, d}, "embed.fc2", ParamKind::hidden, true);
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        add({d}, b + "norm1", ParamKind::norm, false);
        for (const char* proj : {"q", "k", "v", "o"}) {
            add({d, d}, b + "attn." + proj + ".weight", ParamKind::hidden, false);
            add({d}, b + "attn." + proj + ".bias", ParamKind::bias, false);
        }
        add({c.per_head_scale ? d : c.d_head}, b + "attn.qscale", ParamKind::norm, false);
        add({d}, b + "norm2", ParamKind::norm, false);
        add({hid, d}, b + "mlp.fc1", ParamKind::hidden, false);
        add({d, hid}, b + "mlp.fc2", ParamKind::hidden, false);
    }
    add({d}, "final_norm", ParamKind::norm, false);
    add({o, d}, "head.res", ParamKind::output, true);
    add({d, d}, "head.fc1", ParamKind::hidden, true);
    add({o, d}, "head.fc2", ParamKind::output, true);
    return out;
}

inline std::vector<std::string> expected_param_names(const ModelConfig& c) {
    std::vector<std::string> names{"embed.res", "embed.fc1", "embed.fc2", "final_norm", "head.res", "head.fc1", "head.fc2"};
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        for (const char* s : {"norm1", "norm2", "mlp.fc1", "mlp.fc2", "attn.qscale"}) names.push_back(b + s);
        for (const char* proj : {"q", "k", "v", "o"}) {
            names.push_back(b + "attn." + proj + ".weight");
            names.push_back(b + "attn." + proj + ".bias");
        }
    }
    return names;
}

/// Parameters with missing or inconsistent u-muP metadata.
inline std::vector<std::string> metadata_audit(const std::vector<ParamInfo>& params, const ModelConfig& c) {
    std::vector<std::string> bad;
    std::map<std::string, std::size_t> seen;
    for (const auto& p : params) {
        ++seen[p.name];
        const auto& m = p.meta;
        const bool vec = m.kind == ParamKind::bias || m.kind == ParamKind::norm;
        if (p.shape.empty() || (!vec && p.shape.size() != 2)) {
            bad.push_back(p.name + ": unexpected rank " + shape_str(p.shape));
            continue;
        }
        const std::size_t fi = vec ? 1 : p.shape[1];
        const std::size_t fo = p.shape[0];
        if (m.fan_in != fi || m.fan_out != fo) bad.push_back(p.name + ": fan_in/fan_out disagree with shape");
        if (!(m.forward_multiplier > 0) || !(m.update_multiplier_base > 0))
            bad.push_back(p.name + ": non-positive multiplier");
        if (m.parametrization == Parametrization::ump) {
            if (m.kind == ParamKind::hidden && std::abs(m.forward_multiplier - 1.0 / std::sqrt(double(fi))) > 1e-12)
                bad.push_back(p.name + ": hidden A_W != 1/sqrt(fan_in)");
            if (vec && m.forward_multiplier != 1.0) bad.push_back(p.name + ": bias/norm A_W != 1");
        }
    }
    for (const auto& expected : expected_param_names(c))
        if (!seen.count(expected)) bad.push_back(expected + ": parameter without metadata record");
    for (const auto& [name, n] : seen)
        if (n > 1) bad.push_back(name + ": duplicate parameter name");
    return bad;
}

/// Parameters assigned to the wrong optimizer or decay policy.
inline std::vector<std::string> partition_audit(const std::vector<ParamInfo>& params) {
    std::vector<std::string> bad;
    for (const auto& p : params) {
        const auto want = expected_group(p.meta.kind, p.projection);
        if (p.group != want)
            bad.push_back(p.name + ": assigned " + std::string(to_string(p.group)) + ", expected " +
                          std::string(to_string(want)));
        if (p.decay != (want == OptimizerGroup::normuon)) bad.push_back(p.name + ": decay policy mismatch");
    }
    return bad;
}

/// One forward's worth of tokens. Row r = (b * variates + v) * positions + i
/// is patch start + i of variate v in batch element b.
template <class T>
struct TokenBatch {
    std::size_t batch = 1;
    std::size_t variates = 1;
    std::size_t start = 0;
    std::size_t positions = 0;
    Array<T> features;                  // rows x 2P: zero-filled values then mask channel
    std::vector<std::uint8_t> missing;  // per row: no observed entry in the original data

    std::size_t rows() const { return batch * variates * positions; }
    std::size_t row(std::size_t b, std::size_t v, std::size_t i) const { return (b * variates + v) * positions + i; }
};

/// Builds a single-sample batch from patches [begin, end) of a grid.
/// `missing` marks patches to exclude as attention keys; by default a patch
/// counts as missing when its mask channel is all ones.
template <class T>
TokenBatch<T> tokens_from_grid(const PatchGrid& g, std::size_t begin, std::size_t end,
                               const std::vector<std::uint8_t>* missing = nullptr) {
    if (begin >= end || end > g.patches) throw std::out_of_range("tokens_from_grid: bad patch range");
    TokenBatch<T> tb;
    tb.batch = 1;
    tb.variates = g.variates;
    tb.start = begin;
    tb.positions = end - begin;
    const std::size_t P = g.patch_size;
    tb.features = Array<T>({tb.rows(), 2 * P});
    tb.missing.assign(tb.rows(), 0);
    for (std::size_t v = 0; v < g.variates; ++v)
        for (std::size_t n = begin; n < end; ++n) {
            const std::size_t r = tb.row(0, v, n - begin);
            for (std::size_t k = 0; k < P; ++k) {
                const std::size_t i = g.index(v, n, k);
                tb.features.at(r, k) = g.mask[i] ? T(0) : T(g.values[i]);
                tb.features.at(r, P + k) = g.mask[i] ? T(1) : T(0);
            }
            tb.missing[r] = missing ? (*missing)[v * g.patches + n] : std::uint8_t(g.patch_fully_missing(v, n));
        }
    return tb;
}

template <class T>
class KvCache;

template <class T>
class Model {
public:
    struct LayerKv {
        Var k, v;
    };
    struct Output {
        Var quantiles;  // rows x (P * 9), step-major then level
        Var hidden;     // rows x d_model after the final norm
        std::vector<LayerKv> kv;  // per layer; invalid for variate layers
    };
    /// Named inputs of every hidden-kind matmul, for scale diagnostics.
    using Taps = std::vector<std::pair<std::string, Var>>;

    Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        std::mt19937_64 rng(seed);
        build(rng);
    }

    Model(ModelConfig config, std::vector<Param<T>> params) : config_(std::move(config)), params_(std::move(params)) {
        config_.validate();
        reindex();
    }

    const ModelConfig& config() const { return config_; }
    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }

    Param<T>& param(const std::string& name) { return params_.at(index_of(name)); }
    const Param<T>& param(const std::string& name) const { return params_.at(index_of(name)); }

    ResidualScales residual() const { return residual_scales(config_.context_length, config_.patch_size); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.leaf.size();
        return n;
    }

    template <class U>
    Model<U> cast() const {
        std::vector<Param<U>> out;
        for (const auto& p : params_) out.push_back(Param<U>{p.name, p.leaf.template cast<U>(), p.meta, p.projection, p.group, p.decay});
        return Model<U>(config_, std::move(out));
    }

    /// Effective weight A_W · w as a graph node over the leaf.
    Var weight(Graph<T>& g, const std::string& name) const {
        const auto& p = param(name);
        Var leaf = g.parameter(name, p.leaf);
        return p.meta.forward_multiplier == 1.0 ? leaf : g.scale(leaf, T(p.meta.forward_multiplier));
    }

    /// Residual two-layer SiLU patch embedding: res(x) + fc2(silu(fc1(x))).
    Var patch_embed(Graph<T>& g, Var features) const {
        Var res = g.linear(features, weight(g, "embed.res"));
        Var hid = g.silu(g.linear(features, weight(g, "embed.fc1")));
        return g.add(res, g.linear(hid, weight(g, "embed.fc2")));
    }

    /// Residual two-layer SiLU quantile head; P steps x 9 levels per token.
    Var output_head(Graph<T>& g, Var hidden, Taps* taps = nullptr) const {
        Var res = g.linear(hidden, weight(g, "head.res"));
        if (taps) taps->push_back({"head.fc1", hidden});
        Var hid = g.silu(g.linear(hidden, weight(g, "head.fc1")));
        return g.add(res, g.linear(hid, weight(g, "head.fc2")));
    }

    /// softplus(s) / softplus(0): one at initialization.
    Var per_dim_scale(Graph<T>& g, std::size_t layer) const {
        const std::string name = "blocks." + std::to_string(layer) + ".attn.qscale";
        Var f = g.scale(g.softplus(weight(g, name)), T(1.0 / std::log(2.0)));
        if (config_.per_head_scale) return f;
        std::vector<Var> tiles(config_.heads, f);
        return config_.heads == 1 ? f : g.concat_cols(tiles);
    }

    Output forward(Graph<T>& g, const TokenBatch<T>& in, const KvCache<T>* cache = nullptr, Taps* taps = nullptr) const;

    std::vector<ParamInfo> layout() const {
        std::vector<ParamInfo> out;
        for (const auto& p : params_) out.push_back({p.name, p.leaf.shape(), p.meta, p.projection, p.group, p.decay});
        return out;
    }

    std::vector<std::string> metadata_audit() const { return patchfm::metadata_audit(layout(), config_); }
    std::vector<std::string> partition_audit() const { return patchfm::partition_audit(layout()); }

private:
    void build(std::mt19937_64& rng) {
        for (auto& info : model_layout(config_)) {
            auto [leaf, meta] = init_param<T>(info.shape, info.meta.kind, rng, config_.parametrization);
            // qscale leaves are raw softplus arguments: zero means unit scale.
            if (info.name.ends_with("attn.qscale")) leaf.fill(T(0));
            params_.push_back(Param<T>{info.name, std::move(leaf), meta, info.projection, info.group, info.decay});
        }
        reindex();
    }

    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
    }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return it->second;
    }

    ModelConfig config_;
    std::vector<Param<T>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Time-axis keys and values of committed patches for one decode session.
/// Rows are stored (sequence, position)-major per layer.
template <class T>
class KvCache {
public:
    KvCache(std::uint64_t session, std::size_t layers, std::size_t sequences, std::size_t d_model)
        : session_(session), sequences_(sequences), d_model_(d_model), k_(layers), v_(layers) {}

    std::uint64_t session() const { return session_; }
    std::size_t length() const { return length_; }
    std::size_t sequences() const { return sequences_; }
    /// Cached scalars across all layers.
    std::size_t entries() const {
        std::size_t n = 0;
        for (const auto& k : k_) n += 2 * k.size();
        return n;
    }

    void require_session(std::uint64_t session) const {
        if (session != session_)
            throw std::logic_error("KV cache bound to session " + std::to_string(session_) +
                                   " used by session " + std::to_string(session));
    }

    void clear() {
        length_ = 0;
        for (auto& k : k_) k.clear();
        for (auto& v : v_) v.clear();
        missing_.clear();
        committed_.clear();
    }

    bool has_layer(std::size_t layer) const { return layer < k_.size(); }

    Array<T> keys(std::size_t layer) const { return as_array(k_[layer]); }
    Array<T> values(std::size_t layer) const { return as_array(v_[layer]); }
    const std::vector<std::uint8_t>& missing() const { return missing_; }

    /// Appends the first `count` processed positions of a forward whose
    /// inputs were `in`, taking keys/values from the recorded graph.
    void append(const Graph<T>& g, const typename Model<T>::Output& out, const TokenBatch<T>& in, std::size_t count) {
        if (in.start != length_) throw std::logic_error("KV cache append out of order");
        if (count > in.positions) throw std::out_of_range("KV cache append beyond processed positions");
        if (in.batch * in.variates != sequences_) throw std::logic_error("KV cache sequence count mismatch");
        const std::size_t newlen = length_ + count;
        for (std::size_t l = 0; l < k_.size(); ++l) {
            if (!out.kv[l].k.valid()) continue;
            k_[l] = merge(k_[l], g.value(out.kv[l].k), in.positions, count);
            v_[l] = merge(v_[l], g.value(out.kv[l].v), in.positions, count);
        }
        std::vector<std::uint8_t> miss;
        std::vector<T> comm;
        const std::size_t F = in.features.cols();
        for (std::size_t s = 0; s < sequences_; ++s) {
            for (std::size_t j = 0; j < length_; ++j) {
                miss.push_back(missing_[s * length_ + j]);
                comm.insert(comm.end(), committed_.begin() + std::ptrdiff_t((s * length_ + j) * F),
                            committed_.begin() + std::ptrdiff_t((s * length_ + j + 1) * F));
            }
            for (std::size_t j = 0; j < count; ++j) {
                const std::size_t r = s * in.positions + j;
                miss.push_back(in.missing[r]);
                comm.insert(comm.end(), in.features.vec().begin() + std::ptrdiff_t(r * F),
                            in.features.vec().begin() + std::ptrdiff_t((r + 1) * F));
            }
        }
        missing_ = std::move(miss);
        committed_ = std::move(comm);
        feature_cols_ = F;
        length_ = newlen;
    }

    /// Checks that the cached positions were computed from `prefix` (features
    /// of positions [0, length), same row layout). Clears the cache and
    /// returns false on any difference.
    bool validate_prefix(const Array<T>& prefix) {
        if (length_ == 0) return true;
        if (prefix.size() != committed_.size() || !std::equal(committed_.begin(), committed_.end(), prefix.vec().begin())) {
            clear();
            return false;
        }
        return true;
    }

private:
    Array<T> as_array(const std::vector<T>& rows) const {
        if (rows.empty()) return Array<T>();
        return Array<T>({rows.size() / d_model_, d_model_}, rows);
    }

    std::vector<T> merge(const std::vector<T>& old, const Array<T>& fresh, std::size_t processed, std::size_t count) const {
        std::vector<T> out;
        out.reserve(old.size() + sequences_ * count * d_model_);
        for (std::size_t s = 0; s < sequences_; ++s) {
            out.insert(out.end(), old.begin() + std::ptrdiff_t(s * length_ * d_model_),
                       old.begin() + std::ptrdiff_t((s + 1) * length_ * d_model_));
            for (std::size_t j = 0; j < count; ++j) {
                const std::size_t r = s * processed + j;
                out.insert(out.end(), fresh.vec().begin() + std::ptrdiff_t(r * d_model_),
                           fresh.vec().begin() + std::ptrdiff_t((r + 1) * d_model_));
            }
        }
        return out;
    }

    std::uint64_t session_;
    std::size_t sequences_;
    std::size_t d_model_;
    std::size_t length_ = 0;
    std::size_t feature_cols_ = 0;
    std::vector<std::vector<T>> k_, v_;
    std::vector<std::uint8_t> missing_;
    std::vector<T> committed_;
};

template <class T>
typename Model<T>::Output Model<T>::forward(Graph<T>& g, const TokenBatch<T>& in, const KvCache<T>* cache,
                                            Taps* taps) const {
    const auto& c = config_;
    if (in.start + in.positions > c.max_patches())
        throw std::length_error("input spans patches [" + std::to_string(in.start) + ", " +
                                std::to_string(in.start + in.positions) + ") but the model holds at most " +
                                std::to_string(c.max_patches()) + " (context_length / patch_size)");
    if (in.features.cols() != c.input_dim() || in.features.rows() != in.rows())
        throw ShapeError("forward: features " + shape_str(in.features.shape()) + " do not match batch layout");
    if (in.variates > c.max_variates)
        throw std::length_error("forward: " + std::to_string(in.variates) + " variates exceeds max_variates " +
                                std::to_string(c.max_variates));
    const std::size_t cached = cache ? cache->length() : 0;
    if (cached != in.start)
        throw std::logic_error("forward: tokens start at patch " + std::to_string(in.start) + " but the cache holds " +
                               std::to_string(cached));
    const std::size_t S = in.batch * in.variates, n = in.positions;
    if (cache && cached && cache->sequences() != S) throw std::logic_error("forward: cache sequence count mismatch");

    // Time-axis layout, shared by every time layer.
    AttentionLayout time_layout;
    time_layout.causal = true;
    time_layout.key_masked.reserve(S * (cached + n));
    if (cached) time_layout.key_masked = cache->missing();
    time_layout.key_masked.insert(time_layout.key_masked.end(), in.missing.begin(), in.missing.end());
    std::vector<int> positions(in.rows());
    for (std::size_t s = 0; s < S; ++s) {
        AttentionLayout::Sequence seq;
        for (std::size_t j = 0; j < cached; ++j) {
            seq.key_rows.push_back(s * cached + j);
            seq.key_pos.push_back(int(j));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = s * n + i;
            positions[r] = int(in.start + i);
            seq.query_rows.push_back(r);
            seq.query_pos.push_back(positions[r]);
            seq.key_rows.push_back(S * cached + r);
            seq.key_pos.push_back(positions[r]);
        }
        time_layout.sequences.push_back(std::move(seq));
    }
    AttentionLayout variate_layout;
    variate_layout.causal = false;
    variate_layout.key_masked = in.missing;
    for (std::size_t b = 0; b < in.batch; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            AttentionLayout::Sequence seq;
            for (std::size_t v = 0; v < in.variates; ++v) {
                seq.query_rows.push_back(in.row(b, v, i));
                seq.query_pos.push_back(0);
                seq.key_rows.push_back(in.row(b, v, i));
                seq.key_pos.push_back(0);
            }
            variate_layout.sequences.push_back(std::move(seq));
        }

    const auto rs = residual();
    const T alpha_res = T(rs.alpha_res), attn_ratio = T(rs.alpha_res_attn_ratio);
    const T logit_scale = T(1) / T(c.d_head);

    Output out;
    out.kv.resize(c.layers);
    Var x = patch_embed(g, g.input(in.features, "features"));
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string b = "blocks." + std::to_string(l) + ".";
        const bool variate = c.is_variate_layer(l);
        Var h = g.rms_norm(x, weight(g, b + "norm1"), T(c.norm_eps));
        if (taps) taps->push_back({b + "attn.qkv", h});
        auto proj = [&](const char* p, Var src) {
            return g.add_row(g.linear(src, weight(g, b + "attn." + p + ".weight")), weight(g, b + "attn." + p + ".bias"));
        };
        Var q = g.mul_row(proj("q", h), per_dim_scale(g, l));
        Var k = proj("k", h);
        Var v = proj("v", h);
        Var mix;
        if (variate) {
            mix = g.attention(q, k, v, variate_layout, c.heads, logit_scale);
        } else {
            q = g.rope(q, positions, c.d_head, T(c.rope_base));
            k = g.rope(k, positions, c.d_head, T(c.rope_base));
            out.kv[l] = {k, v};
            Var kf = k, vf = v;
            if (cached) {
                kf = g.concat_rows({g.input(cache->keys(l), "cache.k"), k});
                vf = g.concat_rows({g.input(cache->values(l), "cache.v"), v});
            }
            mix = g.attention(q, kf, vf, time_layout, c.heads, logit_scale);
        }
        if (taps) taps->push_back({b + "attn.o", mix});
        Var o = proj("o", mix);
        x = g.add(x, g.scale(o, alpha_res * attn_ratio));

        Var h2 = g.rms_norm(x, weight(g, b + "norm2"), T(c.norm_eps));
        if (taps) taps->push_back({b + "mlp.fc1", h2});
        Var a = g.silu(g.linear(h2, weight(g, b + "mlp.fc1")));
        if (taps) taps->push_back({b + "mlp.fc2", a});
        x = g.add(x, g.scale(g.linear(a, weight(g, b + "mlp.fc2")), alpha_res));
    }
    out.hidden = g.rms_norm(x, weight(g, "final_norm"), T(c.norm_eps));
    out.quantiles = output_head(g, out.hidden, taps);
    return out;
}

}  // namespace patchfm
