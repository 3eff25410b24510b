#pragma once

// Run configuration. Every field has a default; a JSON file only needs to
// name the fields it overrides.

#include "patchfm/model.hpp"
#include "patchfm/optim.hpp"
#include "patchfm/synth.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

namespace patchfm {

using nlohmann::json;

struct CpmConfig {
    std::size_t c_max = 16;
    double p_max = 0.4;
    bool loss_on_masked_only = false;
};

struct DataConfig {
    std::size_t variates = 2;
    SinusoidFamily sinusoid;
    GeneratorSpec prior{GeneratorKind::stochastic_prior, {}, {}, std::nullopt, {}, 0};
    MixtureConfig mixture{{{"sinusoid", 1.0, 0.0, 1.0}}};
};

struct EvalConfig {
    std::size_t series = 20;
    std::size_t context = 448;
    std::size_t horizon = 64;
    std::size_t validation_batches = 8;
};

struct RunConfig {
    std::string preset = "desk-64";
    ModelConfig model = patchfm::preset("desk-64");
    OptimizerConfig optimizer;
    std::optional<std::size_t> warmup_steps;  // default: 20% of steps
    std::optional<std::size_t> decay_steps;   // default: 35% of steps
    DecayShape decay_shape = DecayShape::linear;
    CpmConfig cpm;
    DataConfig data;
    EvalConfig eval;
    std::size_t batch_size = 8;
    std::size_t steps = 30000;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    std::size_t log_every = 0;

    /// Warmup and decay default to the 6000 / 10500 of 30000 proportions.
    Schedule schedule() const {
        Schedule s;
        s.total_steps = steps;
        s.warmup_steps = warmup_steps.value_or(std::size_t(std::llround(0.2 * double(steps))));
        s.decay_steps = decay_steps.value_or(std::size_t(std::llround(0.35 * double(steps))));
        s.decay_shape = decay_shape;
        return s;
    }

    OptimizerConfig optimizer_config() const {
        OptimizerConfig o = optimizer;
        o.schedule = schedule();
        return o;
    }

    void validate() const {
        model.validate();
        schedule().validate();
        if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
        if (data.variates == 0 || data.variates > model.max_variates)
            throw std::invalid_argument("data.variates must lie in [1, max_variates]");
        if (cpm.c_max == 0 || cpm.p_max < 0 || cpm.p_max > 1) throw std::invalid_argument("invalid cpm settings");
        auto v = validate_mixture(data.mixture);
        if (!v.empty()) throw std::invalid_argument("invalid data mixture: " + v.front());
        for (const auto& s : data.mixture.sources)
            if (s.name != "sinusoid" && s.name != "prior")
                throw std::invalid_argument("unknown data source '" + s.name + "' (expected sinusoid or prior)");
        if (eval.context % model.patch_size || eval.horizon == 0)
            throw std::invalid_argument("eval.context must be a multiple of the patch size and horizon positive");
    }
};

namespace detail {

template <class V>
void read(const json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

inline json schedule_list(const std::vector<QuinticCoeffs>& s) {
    json a = json::array();
    for (const auto& c : s) a.push_back({c[0], c[1], c[2]});
    return a;
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
    using detail::read;
    RunConfig c;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        read(m, "preset", c.preset);
        c.model = preset(c.preset);
        read(m, "d_model", c.model.d_model);
        read(m, "layers", c.model.layers);
        read(m, "heads", c.model.heads);
        read(m, "d_head", c.model.d_head);
        read(m, "context_length", c.model.context_length);
        read(m, "variate_attn_positions", c.model.variate_attn_positions);
        read(m, "max_variates", c.model.max_variates);
        read(m, "mlp_ratio", c.model.mlp_ratio);
        read(m, "norm_eps", c.model.norm_eps);
        read(m, "rope_base", c.model.rope_base);
        read(m, "per_head_scale", c.model.per_head_scale);
        if (m.contains("parametrization"))
            c.model.parametrization = parametrization_from_string(m.at("parametrization").get<std::string>());
        if (m.contains("d_model") && !m.contains("heads")) c.model.heads = c.model.d_model / c.model.d_head;
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        if (o.contains("normuon")) {
            const auto& n = o.at("normuon");
            read(n, "lr", c.optimizer.normuon.lr);
            read(n, "momentum", c.optimizer.normuon.momentum);
            read(n, "beta2", c.optimizer.normuon.beta2);
            read(n, "eps", c.optimizer.normuon.eps);
            read(n, "weight_decay", c.optimizer.normuon.weight_decay);
            read(n, "nesterov", c.optimizer.normuon.nesterov);
            read(n, "iterations", c.optimizer.normuon.iterations);
            if (n.contains("coefficients")) {
                c.optimizer.normuon.schedule.clear();
                for (const auto& abc : n.at("coefficients"))
                    c.optimizer.normuon.schedule.push_back({abc.at(0).get<double>(), abc.at(1).get<double>(),
                                                            abc.at(2).get<double>()});
            }
        }
        if (o.contains("adamw")) {
            const auto& a = o.at("adamw");
            read(a, "lr", c.optimizer.adamw.lr);
            read(a, "beta1", c.optimizer.adamw.beta1);
            read(a, "beta2", c.optimizer.adamw.beta2);
            read(a, "eps", c.optimizer.adamw.eps);
        }
        read(o, "clip", c.optimizer.clip);
        read(o, "lr_scale", c.optimizer.lr_scale);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        if (s.contains("warmup_steps")) c.warmup_steps = s.at("warmup_steps").get<std::size_t>();
        if (s.contains("decay_steps")) c.decay_steps = s.at("decay_steps").get<std::size_t>();
        if (s.contains("decay_shape")) c.decay_shape = decay_shape_from_string(s.at("decay_shape").get<std::string>());
    }
    if (j.contains("cpm")) {
        const auto& m = j.at("cpm");
        read(m, "c_max", c.cpm.c_max);
        read(m, "p_max", c.cpm.p_max);
        read(m, "loss_on_masked_only", c.cpm.loss_on_masked_only);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        read(d, "variates", c.data.variates);
        if (d.contains("sinusoid")) {
            const auto& s = d.at("sinusoid");
            read(s, "min_period", c.data.sinusoid.min_period);
            read(s, "max_period", c.data.sinusoid.max_period);
            read(s, "max_components", c.data.sinusoid.max_components);
            read(s, "min_amplitude", c.data.sinusoid.min_amplitude);
            read(s, "max_amplitude", c.data.sinusoid.max_amplitude);
            if (s.contains("noise_std")) c.data.sinusoid.noise_std = s.at("noise_std").get<double>();
        }
        if (d.contains("prior")) {
            const auto& p = d.at("prior");
            auto& q = c.data.prior.prior;
            read(p, "slope_std", q.slope_std);
            read(p, "level_std", q.level_std);
            read(p, "changepoint_rate", q.changepoint_rate);
            read(p, "jump_std", q.jump_std);
            read(p, "season_amplitude", q.season_amplitude);
            read(p, "season_period", q.season_period);
            read(p, "ar_phi", q.ar_phi);
            read(p, "noise_std", q.noise_std);
        }
        if (d.contains("mixture")) {
            c.data.mixture.sources.clear();
            for (const auto& s : d.at("mixture")) {
                MixtureSource src;
                src.name = s.at("name").get<std::string>();
                src.weight = s.at("weight").get<double>();
                read(s, "lower", src.lower);
                read(s, "upper", src.upper);
                c.data.mixture.sources.push_back(src);
            }
        }
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        read(e, "series", c.eval.series);
        read(e, "context", c.eval.context);
        read(e, "horizon", c.eval.horizon);
        read(e, "validation_batches", c.eval.validation_batches);
    }
    read(j, "batch_size", c.batch_size);
    read(j, "steps", c.steps);
    read(j, "seed", c.seed);
    read(j, "out_dir", c.out_dir);
    read(j, "log_every", c.log_every);
    c.validate();
    return c;
}

inline json to_json(const ModelConfig& m) {
    return {{"d_model", m.d_model},
            {"layers", m.layers},
            {"heads", m.heads},
            {"d_head", m.d_head},
            {"patch_size", m.patch_size},
            {"context_length", m.context_length},
            {"variate_attn_positions", m.variate_layers()},
            {"max_variates", m.max_variates},
            {"mlp_ratio", m.mlp_ratio},
            {"norm_eps", m.norm_eps},
            {"rope_base", m.rope_base},
            {"per_head_scale", m.per_head_scale},
            {"parametrization", std::string(to_string(m.parametrization))}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig m;
    j.at("d_model").get_to(m.d_model);
    j.at("layers").get_to(m.layers);
    j.at("heads").get_to(m.heads);
    j.at("d_head").get_to(m.d_head);
    j.at("patch_size").get_to(m.patch_size);
    j.at("context_length").get_to(m.context_length);
    j.at("variate_attn_positions").get_to(m.variate_attn_positions);
    j.at("max_variates").get_to(m.max_variates);
    j.at("mlp_ratio").get_to(m.mlp_ratio);
    j.at("norm_eps").get_to(m.norm_eps);
    j.at("rope_base").get_to(m.rope_base);
    j.at("per_head_scale").get_to(m.per_head_scale);
    m.parametrization = parametrization_from_string(j.at("parametrization").get<std::string>());
    m.validate();
    return m;
}

/// Fully resolved configuration, suitable for reproducing a run.
inline json to_json(const RunConfig& c) {
    const auto s = c.schedule();
    json mix = json::array();
    for (const auto& m : c.data.mixture.sources)
        mix.push_back({{"name", m.name}, {"weight", m.weight}, {"lower", m.lower}, {"upper", m.upper}});
    json j = to_json(c.model);
    j["preset"] = c.preset;
    const auto& pr = c.data.prior.prior;
    json sin = {{"min_period", c.data.sinusoid.min_period},
                {"max_period", c.data.sinusoid.max_period},
                {"max_components", c.data.sinusoid.max_components},
                {"min_amplitude", c.data.sinusoid.min_amplitude},
                {"max_amplitude", c.data.sinusoid.max_amplitude}};
    if (c.data.sinusoid.noise_std) sin["noise_std"] = *c.data.sinusoid.noise_std;
    return {{"model", j},
            {"optimizer",
             {{"normuon",
               {{"lr", c.optimizer.normuon.lr},
                {"momentum", c.optimizer.normuon.momentum},
                {"beta2", c.optimizer.normuon.beta2},
                {"eps", c.optimizer.normuon.eps},
                {"weight_decay", c.optimizer.normuon.weight_decay},
                {"nesterov", c.optimizer.normuon.nesterov},
                {"iterations", c.optimizer.normuon.iterations},
                {"coefficients", detail::schedule_list(c.optimizer.normuon.schedule)}}},
              {"adamw",
               {{"lr", c.optimizer.adamw.lr},
                {"beta1", c.optimizer.adamw.beta1},
                {"beta2", c.optimizer.adamw.beta2},
                {"eps", c.optimizer.adamw.eps}}},
              {"clip", c.optimizer.clip},
              {"lr_scale", c.optimizer.lr_scale}}},
            {"schedule",
             {{"warmup_steps", s.warmup_steps},
              {"decay_steps", s.decay_steps},
              {"decay_shape", std::string(to_string(s.decay_shape))}}},
            {"cpm", {{"c_max", c.cpm.c_max}, {"p_max", c.cpm.p_max}, {"loss_on_masked_only", c.cpm.loss_on_masked_only}}},
            {"data",
             {{"variates", c.data.variates},
              {"sinusoid", sin},
              {"prior",
               {{"slope_std", pr.slope_std},
                {"level_std", pr.level_std},
                {"changepoint_rate", pr.changepoint_rate},
                {"jump_std", pr.jump_std},
                {"season_amplitude", pr.season_amplitude},
                {"season_period", pr.season_period},
                {"ar_phi", pr.ar_phi},
                {"noise_std", pr.noise_std}}},
              {"mixture", mix}}},
            {"eval",
             {{"series", c.eval.series},
              {"context", c.eval.context},
              {"horizon", c.eval.horizon},
              {"validation_batches", c.eval.validation_batches}}},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"seed", c.seed},
            {"out_dir", c.out_dir},
            {"log_every", c.log_every}};
}

inline json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config '" + path + "': " + e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_json_file(path)); }

}  // namespace patchfm
