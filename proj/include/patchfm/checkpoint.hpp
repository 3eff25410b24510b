#pragma once

// Checkpoint layout: <dir>/manifest.json lists the model config and every
// parameter (name, shape, kind, multipliers, optimizer group); <dir>/params.bin
// holds their row-major float32 values back to back in manifest order.

#include "patchfm/config.hpp"
#include "patchfm/model.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace patchfm {

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& dir, const json& extra = json::object()) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "patchfm-checkpoint-1";
    manifest["config"] = to_json(model.config());
    manifest["params"] = json::array();
    manifest["extra"] = extra;
    std::ofstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write '" + dir + "/params.bin'");
    std::size_t offset = 0;
    for (const auto& p : model.params()) {
        const auto& m = p.meta;
        manifest["params"].push_back({{"name", p.name},
                                      {"shape", p.leaf.shape()},
                                      {"kind", std::string(to_string(m.kind))},
                                      {"fan_in", m.fan_in},
                                      {"fan_out", m.fan_out},
                                      {"forward_multiplier", m.forward_multiplier},
                                      {"update_multiplier_base", m.update_multiplier_base},
                                      {"parametrization", std::string(to_string(m.parametrization))},
                                      {"projection", p.projection},
                                      {"optimizer", std::string(to_string(p.group))},
                                      {"decay", p.decay},
                                      {"offset", offset}});
        std::vector<float> buf(p.leaf.vec().begin(), p.leaf.vec().end());
        bin.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
        offset += buf.size();
    }
    std::ofstream man(dir + "/manifest.json");
    man << manifest.dump(2) << '\n';
}

template <class T>
Model<T> load_checkpoint(const std::string& dir) {
    const json manifest = read_json_file(dir + "/manifest.json");
    if (manifest.value("format", "") != "patchfm-checkpoint-1")
        throw std::runtime_error("'" + dir + "' is not a patchfm checkpoint");
    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    std::ifstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot read '" + dir + "/params.bin'");
    std::vector<Param<T>> params;
    for (const auto& e : manifest.at("params")) {
        Param<T> p;
        p.name = e.at("name").get<std::string>();
        Shape shape = e.at("shape").get<Shape>();
        p.meta = make_metadata(shape, param_kind_from_string(e.at("kind").get<std::string>()),
                               parametrization_from_string(e.at("parametrization").get<std::string>()));
        p.projection = e.at("projection").get<bool>();
        p.group = e.at("optimizer").get<std::string>() == "normuon" ? OptimizerGroup::normuon : OptimizerGroup::adamw;
        p.decay = e.at("decay").get<bool>();
        std::vector<float> buf(numel(shape));
        bin.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
        if (!bin) throw std::runtime_error("params.bin truncated at parameter '" + p.name + "'");
        p.leaf = Array<T>(shape, std::vector<T>(buf.begin(), buf.end()));
        params.push_back(std::move(p));
    }
    if (bin.peek() != std::char_traits<char>::eof()) throw std::runtime_error("params.bin longer than the manifest");
    Model<T> model(cfg, std::move(params));
    auto bad = model.metadata_audit();
    if (!bad.empty()) throw std::runtime_error("checkpoint '" + dir + "': " + bad.front());
    return model;
}

}  // namespace patchfm
