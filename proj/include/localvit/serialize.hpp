#pragma once

// JSON serialization: model checkpoints (a flat manifest of named parameter
// tensors with shapes, plus batch-norm running state) and the config file
// schema used by the CLI. Unknown config keys are hard errors so ablation
// typos cannot silently fall back to defaults.

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "localvit/model.hpp"

namespace localvit {

inline constexpr int kCheckpointVersion = 1;

inline std::string base_act_name(BaseAct b) {
    return b == BaseAct::ReLU6 ? "relu6" : "hswish";
}

inline std::string gate_kind_name(GateKind g) {
    switch (g) {
        case GateKind::None: return "none";
        case GateKind::SE: return "se";
        case GateKind::ECA: return "eca";
    }
    return "none";
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["embed_dim"] = cfg.embed_dim;
    j["depth"] = cfg.depth;
    j["heads"] = cfg.heads;
    j["gamma"] = cfg.gamma;
    j["activation"] = {{"base", base_act_name(cfg.activation.base)},
                       {"gate", gate_kind_name(cfg.activation.gate)},
                       {"se_reduction", cfg.activation.se_reduction},
                       {"eca_kernel", cfg.activation.eca_kernel}};
    j["locality_layers"] = cfg.locality_layers;
    j["conv_layers"] = cfg.conv_layers;
    j["num_classes"] = cfg.num_classes;
    j["seed"] = cfg.seed;
    j["bn_momentum"] = cfg.bn_momentum;
    j["bn_eps"] = cfg.bn_eps;
    j["ln_eps"] = cfg.ln_eps;
    j["dw_kernel"] = cfg.dw_kernel;
    return j;
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        check(known.count(it.key()) > 0,
              "unknown key '" + it.key() + "' in " + where);
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"image_size", "patch_size", "embed_dim", "depth", "heads",
                            "gamma", "activation", "locality_layers", "conv_layers",
                            "num_classes", "seed", "bn_momentum", "bn_eps", "ln_eps",
                            "dw_kernel"},
                        "model config");
    ModelConfig cfg;
    if (j.contains("image_size")) cfg.image_size = j["image_size"].get<int>();
    if (j.contains("patch_size")) cfg.patch_size = j["patch_size"].get<int>();
    if (j.contains("embed_dim")) cfg.embed_dim = j["embed_dim"].get<int>();
    if (j.contains("depth")) cfg.depth = j["depth"].get<int>();
    if (j.contains("heads")) cfg.heads = j["heads"].get<int>();
    if (j.contains("gamma")) cfg.gamma = j["gamma"].get<double>();
    if (j.contains("activation")) {
        const auto& a = j["activation"];
        reject_unknown_keys(a, {"base", "gate", "se_reduction", "eca_kernel"},
                            "activation spec");
        if (a.contains("base")) {
            std::string b = a["base"].get<std::string>();
            check(b == "relu6" || b == "hswish",
                  "activation.base must be relu6 or hswish, got '" + b + "'");
            cfg.activation.base = b == "relu6" ? BaseAct::ReLU6 : BaseAct::HSwish;
        }
        if (a.contains("gate")) {
            std::string g = a["gate"].get<std::string>();
            check(g == "none" || g == "se" || g == "eca",
                  "activation.gate must be none, se or eca, got '" + g + "'");
            cfg.activation.gate = g == "none" ? GateKind::None
                                              : (g == "se" ? GateKind::SE : GateKind::ECA);
        }
        if (a.contains("se_reduction"))
            cfg.activation.se_reduction = a["se_reduction"].get<int>();
        if (a.contains("eca_kernel")) cfg.activation.eca_kernel = a["eca_kernel"].get<int>();
    }
    if (j.contains("locality_layers"))
        cfg.locality_layers = j["locality_layers"].get<std::set<int>>();
    if (j.contains("conv_layers")) cfg.conv_layers = j["conv_layers"].get<std::set<int>>();
    if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int>();
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("bn_momentum")) cfg.bn_momentum = j["bn_momentum"].get<double>();
    if (j.contains("bn_eps")) cfg.bn_eps = j["bn_eps"].get<double>();
    if (j.contains("ln_eps")) cfg.ln_eps = j["ln_eps"].get<double>();
    if (j.contains("dw_kernel")) cfg.dw_kernel = j["dw_kernel"].get<int>();
    cfg.validate();
    return cfg;
}

inline nlohmann::json checkpoint_to_json(Model& m) {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["kind"] = "localvit-checkpoint";
    j["config"] = config_to_json(m.config);
    auto& params = j["params"] = nlohmann::json::array();
    for (auto& p : named_params(m))
        params.push_back({{"name", p.name}, {"shape", p.tensor.shape()},
                          {"data", p.tensor.data()}});
    auto& states = j["bn_states"] = nlohmann::json::array();
    for (auto& s : named_bn_states(m))
        states.push_back({{"name", s.name}, {"running_mean", s.state->running_mean},
                          {"running_var", s.state->running_var}});
    return j;
}

inline Model checkpoint_from_json(const nlohmann::json& j) {
    check(j.contains("format_version") && j["format_version"].get<int>() == kCheckpointVersion,
          "checkpoint: unsupported or missing format_version");
    check(j.contains("kind") && j["kind"] == "localvit-checkpoint",
          "checkpoint: not a model checkpoint file");
    Model m = build_model(config_from_json(j.at("config")));
    auto params = named_params(m);
    check(j.at("params").size() == params.size(),
          "checkpoint: expected " + std::to_string(params.size()) + " parameter tensors, got " +
              std::to_string(j.at("params").size()));
    size_t i = 0;
    for (const auto& entry : j.at("params")) {
        check(entry.at("name") == params[i].name,
              "checkpoint: parameter order mismatch at '" + params[i].name + "'");
        Shape shape = entry.at("shape").get<Shape>();
        check(shape == params[i].tensor.shape(),
              "checkpoint: shape mismatch for '" + params[i].name + "'");
        params[i].tensor.data() = entry.at("data").get<std::vector<double>>();
        check(params[i].tensor.size() == numel(shape),
              "checkpoint: data length mismatch for '" + params[i].name + "'");
        ++i;
    }
    auto states = named_bn_states(m);
    check(j.at("bn_states").size() == states.size(), "checkpoint: batch-norm state mismatch");
    i = 0;
    for (const auto& entry : j.at("bn_states")) {
        check(entry.at("name") == states[i].name, "checkpoint: batch-norm state order mismatch");
        states[i].state->running_mean = entry.at("running_mean").get<std::vector<double>>();
        states[i].state->running_var = entry.at("running_var").get<std::vector<double>>();
        ++i;
    }
    return m;
}

inline void save_checkpoint(Model& m, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "cannot open '" + path + "' for writing");
    out << checkpoint_to_json(m).dump(1) << "\n";
    check(out.good(), "failed writing checkpoint to '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

}  // namespace localvit
