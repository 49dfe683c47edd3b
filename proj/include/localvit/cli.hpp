#pragma once

// Command implementations behind the command-line tool: model summaries,
// ablation-table emission, gradient checks, and desk-scale training
// comparisons. Every command resolves its options fully, writes a manifest
// before any results, and can be re-executed from that manifest alone,
// reproducing its CSV outputs byte for byte.

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "localvit/complexity.hpp"
#include "localvit/model.hpp"
#include "localvit/report.hpp"
#include "localvit/serialize.hpp"
#include "localvit/train.hpp"

namespace localvit::cli {

inline constexpr const char* kToolName = "localvit";
inline constexpr const char* kToolVersion = "1.0.0";

inline constexpr int kOk = 0;
inline constexpr int kValidationError = 1;
inline constexpr int kNumericalFailure = 2;

// Output directory resolution: explicit flag, then LOCALVIT_OUT_DIR, then ./out.
inline std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("LOCALVIT_OUT_DIR"); env && *env) return env;
    return "out";
}

inline std::string activation_label(const ActivationSpec& a) {
    std::string s = base_act_name(a.base);
    if (a.gate == GateKind::SE) s += "+se" + std::to_string(a.se_reduction);
    if (a.gate == GateKind::ECA) s += "+eca" + std::to_string(a.eca_kernel);
    return s;
}

inline std::string human_macs(int64_t macs) {
    char buf[64];
    if (macs >= 100000000)
        std::snprintf(buf, sizeof(buf), "%.2fG", static_cast<double>(macs) / 1e9);
    else if (macs >= 100000)
        std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(macs) / 1e6);
    else
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(macs));
    return buf;
}

// ---- option structs and their JSON forms ------------------------------------

inline nlohmann::json toy_to_json(const ToySpec& t) {
    return {{"image_size", t.image_size},       {"num_classes", t.num_classes},
            {"motif_size", t.motif_size},       {"train_per_class", t.train_per_class},
            {"eval_per_class", t.eval_per_class}, {"noise_std", t.noise_std},
            {"seed", t.seed}};
}

inline ToySpec toy_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"image_size", "num_classes", "motif_size", "train_per_class",
                            "eval_per_class", "noise_std", "seed"},
                        "toy spec");
    ToySpec t;
    if (j.contains("image_size")) t.image_size = j["image_size"].get<int>();
    if (j.contains("num_classes")) t.num_classes = j["num_classes"].get<int>();
    if (j.contains("motif_size")) t.motif_size = j["motif_size"].get<int>();
    if (j.contains("train_per_class")) t.train_per_class = j["train_per_class"].get<int>();
    if (j.contains("eval_per_class")) t.eval_per_class = j["eval_per_class"].get<int>();
    if (j.contains("noise_std")) t.noise_std = j["noise_std"].get<double>();
    if (j.contains("seed")) t.seed = j["seed"].get<uint64_t>();
    t.validate();
    return t;
}

inline nlohmann::json optimizer_to_json(const OptimizerConfig& o) {
    return {{"lr", o.lr},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"adam_eps", o.adam_eps},
            {"weight_decay", o.weight_decay},
            {"epochs", o.epochs},
            {"batch_size", o.batch_size},
            {"lr_floor", o.lr_floor},
            {"label_smoothing", o.label_smoothing}};
}

inline OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"lr", "beta1", "beta2", "adam_eps", "weight_decay", "epochs",
                            "batch_size", "lr_floor", "label_smoothing"},
                        "optimizer config");
    OptimizerConfig o;
    if (j.contains("lr")) o.lr = j["lr"].get<double>();
    if (j.contains("beta1")) o.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) o.beta2 = j["beta2"].get<double>();
    if (j.contains("adam_eps")) o.adam_eps = j["adam_eps"].get<double>();
    if (j.contains("weight_decay")) o.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("epochs")) o.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) o.batch_size = j["batch_size"].get<int>();
    if (j.contains("lr_floor")) o.lr_floor = j["lr_floor"].get<double>();
    if (j.contains("label_smoothing")) o.label_smoothing = j["label_smoothing"].get<double>();
    o.validate();
    return o;
}

inline ModelConfig resolve_model_config(const std::string& preset_name,
                                        const std::string& config_path) {
    check(preset_name.empty() != config_path.empty(),
          "give exactly one of a preset name or a config file");
    if (!preset_name.empty()) return preset(preset_name);
    nlohmann::json j = nlohmann::json::parse(read_file(config_path));
    return config_from_json(j);
}

inline nlohmann::json manifest_skeleton(const std::string& command,
                                        const std::string& out_dir) {
    nlohmann::json m;
    m["tool"] = kToolName;
    m["version"] = kToolVersion;
    m["command"] = command;
    m["out_dir"] = out_dir;
    m["outputs"] = nlohmann::json::array();
    return m;
}

inline std::string manifest_path(const std::string& out_dir, const std::string& command) {
    return (std::filesystem::path(out_dir) / ("manifest_" + command + ".json")).string();
}

inline void write_manifest(const nlohmann::json& m) {
    write_file(manifest_path(m["out_dir"].get<std::string>(),
                             m["command"].get<std::string>()),
               m.dump(1) + "\n");
}

// ---- summarize -----------------------------------------------------------------

struct SummarizeOptions {
    std::string preset_name;
    std::string config_path;
    std::string out_dir;  // empty = resolve via env / default
};

inline int run_summarize(const SummarizeOptions& opts, std::ostream& out) {
    ModelConfig cfg = resolve_model_config(opts.preset_name, opts.config_path);
    std::string out_dir = resolve_out_dir(opts.out_dir);

    nlohmann::json m = manifest_skeleton("summarize", out_dir);
    m["options"] = {{"preset", opts.preset_name}, {"config", config_to_json(cfg)}};
    write_manifest(m);

    ComplexityReport rep = audit(cfg);
    std::map<std::string, const ComplexityRow*> by_name;
    for (const auto& r : rep.rows) by_name[r.name] = &r;

    if (!opts.preset_name.empty()) out << "preset: " << opts.preset_name << "\n";
    out << "geometry: image " << cfg.image_size << ", patch " << cfg.patch_size
        << ", embed " << cfg.embed_dim << ", depth " << cfg.depth << ", heads "
        << cfg.heads << ", classes " << cfg.num_classes << "\n";
    out << "convention: " << rep.convention << "\n\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-6s %-9s %-6s %-14s %12s %14s\n", "layer",
                  "variant", "gamma", "activation", "params", "macs");
    out << line;
    for (int l = 1; l <= cfg.depth; ++l) {
        std::string tag = localvit::detail::layer_tag(l - 1);
        int64_t params = by_name[tag + ".attn"]->params + by_name[tag + ".ffn"]->params;
        int64_t macs = by_name[tag + ".attn"]->macs + by_name[tag + ".ffn"]->macs;
        FfnVariant v = cfg.variant_of_layer(l);
        std::snprintf(line, sizeof(line), "%-6d %-9s %-6g %-14s %12lld %14lld\n", l,
                      ffn_variant_name(v), cfg.gamma,
                      v == FfnVariant::Locality ? activation_label(cfg.activation).c_str()
                                                : base_act_name(cfg.activation.base).c_str(),
                      static_cast<long long>(params), static_cast<long long>(macs));
        out << line;
    }
    for (const char* name : {"patch_embed", "class_token", "pos_embed", "final_norm", "head"}) {
        std::snprintf(line, sizeof(line), "%-38s %12lld %14lld\n", name,
                      static_cast<long long>(by_name[name]->params),
                      static_cast<long long>(by_name[name]->macs));
        out << line;
    }
    double params_m = static_cast<double>(rep.total_params()) / 1e6;
    std::snprintf(line, sizeof(line), "\nparams=%lld (%.1fM) macs≈%s\n",
                  static_cast<long long>(rep.total_params()), params_m,
                  human_macs(rep.total_macs()).c_str());
    out << line;
    return kOk;
}

// ---- tables ----------------------------------------------------------------------

struct TablesOptions {
    std::vector<int> tables;
    std::string results_path;  // optional comparison.csv from a prior train run
    std::string out_dir;
};

// preset -> mean final eval accuracy over its non-aborted seeds
inline std::map<std::string, double> parse_comparison_csv(const std::string& text) {
    std::istringstream in(text);
    std::string header;
    check(static_cast<bool>(std::getline(in, header)) &&
              header.rfind("preset,seed,params,final_train_loss", 0) == 0,
          "results file is not a comparison.csv");
    std::map<std::string, std::pair<double, int>> acc;
    std::string row;
    while (std::getline(in, row)) {
        if (row.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream rs(row);
        std::string cell;
        while (std::getline(rs, cell, ',')) cells.push_back(cell);
        check(cells.size() >= 8, "malformed comparison.csv row: " + row);
        if (cells[7] == "1" || cells[5].empty()) continue;
        acc[cells[0]].first += std::stod(cells[5]);
        acc[cells[0]].second += 1;
    }
    std::map<std::string, double> out;
    for (auto& [name, sum_count] : acc) out[name] = sum_count.first / sum_count.second;
    return out;
}

inline int run_tables_resolved(const std::vector<int>& tables,
                               const std::map<std::string, double>& accuracy,
                               const std::string& out_dir, std::ostream& out) {
    for (int id : tables) (void)table_presets(id);  // validates ids up front

    nlohmann::json m = manifest_skeleton("tables", out_dir);
    m["options"] = {{"tables", tables}, {"accuracy", accuracy}};
    for (int id : tables) m["outputs"].push_back("table" + std::to_string(id) + ".csv");
    write_manifest(m);

    for (int id : tables) {
        std::string path =
            (std::filesystem::path(out_dir) / ("table" + std::to_string(id) + ".csv"))
                .string();
        write_file(path, emit_ablation_table(id, accuracy.empty() ? nullptr : &accuracy));
        out << "wrote " << path << "\n";
    }
    return kOk;
}

inline int run_tables(const TablesOptions& opts, std::ostream& out) {
    std::map<std::string, double> accuracy;
    if (!opts.results_path.empty())
        accuracy = parse_comparison_csv(read_file(opts.results_path));
    return run_tables_resolved(opts.tables, accuracy, resolve_out_dir(opts.out_dir), out);
}

// ---- gradcheck --------------------------------------------------------------------

struct GradcheckOptions {
    std::string preset_name = "micro-localvit";
    std::string config_path;
    double tolerance = 1e-4;
    std::string corrupt_block;  // negative-control fixture
    int batch = 2;
    ToySpec toy;
    std::string out_dir;
};

inline int run_gradcheck(const GradcheckOptions& opts, std::ostream& out) {
    ModelConfig cfg = resolve_model_config(opts.preset_name, opts.config_path);
    check(opts.batch >= 1, "batch must be positive");
    check(opts.tolerance > 0, "tolerance must be positive");
    ToySpec toy = opts.toy;
    toy.image_size = cfg.image_size;
    toy.num_classes = cfg.num_classes;
    toy.validate();
    {
        ComplexityReport rep = audit(cfg);
        check(rep.total_params() <= 20000,
              "finite differences over " + std::to_string(rep.total_params()) +
                  " parameters is intractable; use a micro-* preset");
    }
    std::string out_dir = resolve_out_dir(opts.out_dir);

    nlohmann::json m = manifest_skeleton("gradcheck", out_dir);
    m["options"] = {{"preset", opts.preset_name}, {"config", config_to_json(cfg)},
                    {"tolerance", opts.tolerance}, {"corrupt", opts.corrupt_block},
                    {"batch", opts.batch},         {"toy", toy_to_json(toy)}};
    m["outputs"].push_back("gradcheck_report.csv");
    write_manifest(m);

    Model model = build_model(cfg);
    auto [train_set, eval_set] = generate_toy_dataset(toy);
    check(opts.batch <= train_set.size(), "batch exceeds the toy training set");
    std::vector<int> idx(opts.batch);
    for (int i = 0; i < opts.batch; ++i)
        idx[i] = i * train_set.size() / opts.batch;  // spread across classes
    std::vector<int> labels(opts.batch);
    for (int i = 0; i < opts.batch; ++i) labels[i] = train_set.labels[idx[i]];

    GradCheckReport rep = grad_check(model, gather_images(train_set, idx), labels,
                                     opts.tolerance, opts.corrupt_block);
    std::string csv = "block,rel_err,pass\n";
    for (const auto& b : rep.blocks) {
        csv += b.name + "," + format_double(b.rel_err) + "," + (b.pass ? "1" : "0") + "\n";
        char line[160];
        std::snprintf(line, sizeof(line), "%-26s %11.3e  %s\n", b.name.c_str(), b.rel_err,
                      b.pass ? "pass" : "FAIL");
        out << line;
    }
    write_file((std::filesystem::path(out_dir) / "gradcheck_report.csv").string(), csv);
    out << (rep.all_pass ? "all blocks pass" : "FAILING blocks present") << " (max rel err "
        << format_double(rep.max_rel_err) << ", tolerance "
        << format_double(rep.tolerance) << ")\n";
    return rep.all_pass ? kOk : kNumericalFailure;
}

// ---- train ------------------------------------------------------------------------

struct TrainOptions {
    std::vector<std::string> presets;
    int seeds = 3;
    ToySpec toy;
    OptimizerConfig optimizer;
    bool checkpoints = false;
    std::string out_dir;
};

inline std::string run_csv_name(const std::string& preset_name, uint64_t seed) {
    return "train_" + preset_name + "_seed" + std::to_string(seed) + ".csv";
}

inline int run_train(const TrainOptions& opts, std::ostream& out) {
    check(!opts.presets.empty(), "at least one preset is required");
    check(opts.seeds >= 1, "seeds must be positive");
    for (const auto& name : opts.presets) (void)preset(name);
    opts.toy.validate();
    opts.optimizer.validate();
    std::string out_dir = resolve_out_dir(opts.out_dir);

    nlohmann::json m = manifest_skeleton("train", out_dir);
    m["options"] = {{"presets", opts.presets},
                    {"seeds", opts.seeds},
                    {"toy", toy_to_json(opts.toy)},
                    {"optimizer", optimizer_to_json(opts.optimizer)},
                    {"checkpoints", opts.checkpoints}};
    for (const auto& name : opts.presets)
        for (int k = 1; k <= opts.seeds; ++k)
            m["outputs"].push_back(run_csv_name(name, static_cast<uint64_t>(k)));
    m["outputs"].push_back("comparison.csv");
    m["outputs"].push_back("curves.svg");
    write_manifest(m);

    auto [train_set, eval_set] = generate_toy_dataset(opts.toy);
    std::vector<RunSummary> summaries;
    std::vector<Series> loss_series, acc_series;
    nlohmann::json runs = nlohmann::json::array();
    bool any_aborted = false;

    for (const auto& name : opts.presets) {
        for (int k = 1; k <= opts.seeds; ++k) {
            ModelConfig cfg = preset(name);
            check(cfg.image_size == opts.toy.image_size &&
                      cfg.num_classes == opts.toy.num_classes,
                  "preset '" + name + "' expects " + std::to_string(cfg.image_size) +
                      "px/" + std::to_string(cfg.num_classes) +
                      " classes; the toy task provides " +
                      std::to_string(opts.toy.image_size) + "px/" +
                      std::to_string(opts.toy.num_classes));
            cfg.seed = static_cast<uint64_t>(k);
            Model model = build_model(cfg);
            TrainReport rep =
                train(model, train_set, eval_set, opts.optimizer, static_cast<uint64_t>(k));

            RunSummary s;
            s.preset = name;
            s.seed = static_cast<uint64_t>(k);
            s.params = enumerate_params(model);
            s.aborted = rep.aborted;
            if (!rep.aborted) {
                s.final_train_loss = rep.train_loss.back();
                s.final_train_acc = rep.train_acc.back();
                s.final_eval_acc = rep.eval_acc.back();
                s.checksum = rep.final_param_checksum;
            }
            summaries.push_back(s);
            any_aborted = any_aborted || rep.aborted;

            std::string csv_name = run_csv_name(name, s.seed);
            write_file((std::filesystem::path(out_dir) / csv_name).string(),
                       train_report_csv(rep));
            std::string label = name + " s" + std::to_string(k);
            loss_series.push_back({label, rep.train_loss});
            acc_series.push_back({label, rep.eval_acc});
            runs.push_back({{"preset", name}, {"seed", k}, {"aborted", rep.aborted},
                            {"abort_reason", rep.abort_reason}, {"csv", csv_name},
                            {"wall_seconds", rep.wall_seconds}});

            if (opts.checkpoints && !rep.aborted) {
                std::string ckpt = "checkpoint_" + name + "_seed" + std::to_string(k) + ".json";
                save_checkpoint(model, (std::filesystem::path(out_dir) / ckpt).string());
                runs.back()["checkpoint"] = ckpt;
            }
            if (rep.aborted)
                out << label << ": ABORTED (" << rep.abort_reason << ")\n";
            else {
                char line[200];
                std::snprintf(line, sizeof(line),
                              "%-22s loss=%.4f train_acc=%.3f eval_acc=%.3f (%.1fs)\n",
                              label.c_str(), s.final_train_loss, s.final_train_acc,
                              s.final_eval_acc, rep.wall_seconds);
                out << line;
            }
        }
    }

    write_file((std::filesystem::path(out_dir) / "comparison.csv").string(),
               comparison_csv(summaries));
    write_file((std::filesystem::path(out_dir) / "curves.svg").string(),
               curves_svg(loss_series, acc_series));
    m["runs"] = runs;
    write_manifest(m);
    out << "wrote " << (std::filesystem::path(out_dir) / "comparison.csv").string() << "\n";
    return any_aborted ? kNumericalFailure : kOk;
}

// ---- rerun from manifest -------------------------------------------------------------

inline int run_from_manifest(const std::string& path, const std::string& out_dir_override,
                             std::ostream& out) {
    nlohmann::json m = nlohmann::json::parse(read_file(path));
    check(m.value("tool", "") == kToolName, "not a localvit manifest: " + path);
    std::string command = m.value("command", "");
    std::string out_dir =
        out_dir_override.empty() ? m.at("out_dir").get<std::string>() : out_dir_override;
    const auto& o = m.at("options");

    if (command == "summarize") {
        SummarizeOptions opts;
        opts.config_path = "";  // config is stored resolved
        opts.preset_name = o.value("preset", "");
        opts.out_dir = out_dir;
        if (opts.preset_name.empty()) {
            // round-trip through a temp file keeps one resolution path
            std::string tmp = (std::filesystem::path(out_dir) / "rerun_config.json").string();
            write_file(tmp, o.at("config").dump());
            opts.config_path = tmp;
        }
        return run_summarize(opts, out);
    }
    if (command == "tables") {
        std::map<std::string, double> accuracy;
        if (o.contains("accuracy"))
            accuracy = o.at("accuracy").get<std::map<std::string, double>>();
        return run_tables_resolved(o.at("tables").get<std::vector<int>>(), accuracy,
                                   out_dir, out);
    }
    if (command == "gradcheck") {
        GradcheckOptions opts;
        opts.preset_name = o.value("preset", "");
        if (opts.preset_name.empty()) {
            std::string tmp = (std::filesystem::path(out_dir) / "rerun_config.json").string();
            write_file(tmp, o.at("config").dump());
            opts.config_path = tmp;
        }
        opts.tolerance = o.at("tolerance").get<double>();
        opts.corrupt_block = o.value("corrupt", "");
        opts.batch = o.at("batch").get<int>();
        opts.toy = toy_from_json(o.at("toy"));
        opts.out_dir = out_dir;
        return run_gradcheck(opts, out);
    }
    if (command == "train") {
        TrainOptions opts;
        opts.presets = o.at("presets").get<std::vector<std::string>>();
        opts.seeds = o.at("seeds").get<int>();
        opts.toy = toy_from_json(o.at("toy"));
        opts.optimizer = optimizer_from_json(o.at("optimizer"));
        opts.checkpoints = o.value("checkpoints", false);
        opts.out_dir = out_dir;
        return run_train(opts, out);
    }
    fail("manifest command '" + command + "' is not one of summarize/tables/gradcheck/train");
}

}  // namespace localvit::cli
