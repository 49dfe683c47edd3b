#pragma once

// Exact parameter and multiply-accumulate accounting, written as closed
// forms over the config so it can be cross-checked against enumeration of a
// built model. MACs follow the convention of the complexity tables: one
// multiply-accumulate counts 1, batch size is factored out, and norms plus
// elementwise activations count 0.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "localvit/model.hpp"

namespace localvit {

struct ComplexityRow {
    std::string name;
    int64_t params = 0;
    int64_t macs = 0;
};

struct ComplexityReport {
    std::vector<ComplexityRow> rows;
    std::string convention =
        "MACs (1 multiply-accumulate = 1, batch-free); norms, softmax and "
        "elementwise activations count 0";

    int64_t total_params() const {
        int64_t t = 0;
        for (const auto& r : rows) t += r.params;
        return t;
    }
    int64_t total_macs() const {
        int64_t t = 0;
        for (const auto& r : rows) t += r.macs;
        return t;
    }
};

namespace detail {

inline int64_t gate_params(const ModelConfig& cfg) {
    int64_t hidden = cfg.hidden_dim();
    switch (cfg.activation.gate) {
        case GateKind::None: return 0;
        case GateKind::SE: {
            int64_t cb = cfg.se_bottleneck();
            return hidden * cb + cb + cb * hidden + hidden;
        }
        case GateKind::ECA: return cfg.activation.eca_kernel;
    }
    return 0;
}

inline int64_t gate_macs(const ModelConfig& cfg) {
    int64_t hidden = cfg.hidden_dim();
    int64_t N = cfg.num_patches();
    switch (cfg.activation.gate) {
        case GateKind::None: return 0;
        case GateKind::SE: {
            int64_t cb = cfg.se_bottleneck();
            return hidden * cb + cb * hidden + N * hidden;  // two FCs + channel scaling
        }
        case GateKind::ECA:
            return hidden * cfg.activation.eca_kernel + N * hidden;
    }
    return 0;
}

}  // namespace detail

inline ComplexityReport audit(const ModelConfig& cfg) {
    cfg.validate();
    ComplexityReport rep;
    int64_t d = cfg.embed_dim;
    int64_t hidden = cfg.hidden_dim();
    int64_t N = cfg.num_patches();
    int64_t T = N + 1;  // image tokens plus class token
    int64_t p2 = static_cast<int64_t>(cfg.patch_size) * cfg.patch_size;
    int64_t k = cfg.dw_kernel;

    rep.rows.push_back({"patch_embed", 3 * p2 * d + d, N * 3 * p2 * d});
    rep.rows.push_back({"class_token", d, 0});
    rep.rows.push_back({"pos_embed", T * d, 0});

    for (int l = 1; l <= cfg.depth; ++l) {
        std::string tag = detail::layer_tag(l - 1);
        // attention row includes its leading layer norm
        rep.rows.push_back(
            {tag + ".attn", 2 * d + 4 * (d * d + d), 4 * T * d * d + 2 * T * T * d});
        ComplexityRow ffn{tag + ".ffn", 0, 0};
        switch (cfg.variant_of_layer(l)) {
            case FfnVariant::Plain:
            case FfnVariant::Conv1x1:
                // layer norm + two affine maps; the lattice form is the same map
                ffn.params = 2 * d + (d * hidden + hidden) + (hidden * d + d);
                ffn.macs = 2 * T * d * hidden;
                break;
            case FfnVariant::Locality:
                ffn.params = (d * hidden + 2 * hidden) + (hidden * k * k + 2 * hidden) +
                             (hidden * d + 2 * d) + detail::gate_params(cfg);
                ffn.macs = N * d * hidden + N * hidden * k * k + N * hidden * d +
                           detail::gate_macs(cfg);
                break;
        }
        rep.rows.push_back(ffn);
    }

    rep.rows.push_back({"final_norm", 2 * d, 0});
    rep.rows.push_back({"head", d * cfg.num_classes + cfg.num_classes,
                        d * cfg.num_classes});
    return rep;
}

inline ComplexityReport count_params(const ModelConfig& cfg) { return audit(cfg); }
inline ComplexityReport count_macs(const ModelConfig& cfg) { return audit(cfg); }

// ---- ablation tables ------------------------------------------------------------

inline std::vector<std::string> table_presets(int id) {
    switch (id) {
        case 1:
            return {"deit-t",    "localvit-t-conv",    "localvit-t-relu6",
                    "deit-t-g6", "localvit-t-conv-g6", "localvit-t-g6"};
        case 2:
            return {"deit-t",     "localvit-t-relu6", "localvit-t-hswish",
                    "localvit-t-eca", "localvit-t",   "localvit-t-se96",
                    "localvit-t-se48", "localvit-t-se4"};
        case 3:
            return {"placement-high", "placement-mid", "placement-low",
                    "placement-low8", "placement-all"};
        case 4:
            return {"gamma-1", "gamma-1-se", "gamma-2", "gamma-2-se",
                    "gamma-3", "gamma-3-se", "gamma-4", "gamma-4-se"};
        default:
            fail("unknown table id " + std::to_string(id) + "; known tables are 1..4");
    }
}

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

// One CSV per table; the accuracy column is only populated from supplied
// desk-scale results and is never an ImageNet number.
inline std::string emit_ablation_table(const std::vector<std::string>& presets,
                                       int decimals,
                                       const std::map<std::string, double>* accuracy =
                                           nullptr) {
    std::string csv = "preset,params_M,flops_G,accuracy_if_trained\n";
    for (const auto& name : presets) {
        ComplexityReport rep = audit(preset(name));
        csv += name;
        csv += ",";
        csv += format_fixed(static_cast<double>(rep.total_params()) / 1e6, decimals);
        csv += ",";
        csv += format_fixed(static_cast<double>(rep.total_macs()) / 1e9, decimals);
        csv += ",";
        if (accuracy) {
            auto it = accuracy->find(name);
            if (it != accuracy->end()) csv += format_fixed(it->second, 4);
        }
        csv += "\n";
    }
    return csv;
}

inline std::string emit_ablation_table(int table_id,
                                       const std::map<std::string, double>* accuracy =
                                           nullptr) {
    return emit_ablation_table(table_presets(table_id), table_id == 3 ? 2 : 1, accuracy);
}

}  // namespace localvit
