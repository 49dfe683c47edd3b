#pragma once

// Full classifier assembly: patch embedding, class token, learned positional
// embedding, a stack of encoder layers with per-layer feed-forward variants,
// and a head reading the class token. Construction is deterministic from the
// config seed. Presets cover the ablation grid of the complexity tables.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "localvit/blocks.hpp"
#include "localvit/tensor.hpp"

namespace localvit {

struct ModelConfig {
    int image_size = 224;
    int patch_size = 16;
    int embed_dim = 192;
    int depth = 12;
    int heads = 3;
    double gamma = 4.0;  // feed-forward hidden width is round(gamma * embed_dim)
    ActivationSpec activation;
    std::set<int> locality_layers;  // 1-based layer indices with the locality FFN
    std::set<int> conv_layers;      // 1-based layer indices with the 1x1-conv FFN
    int num_classes = 1000;
    uint64_t seed = 42;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    double ln_eps = 1e-6;
    int dw_kernel = 3;

    int tokens_per_side() const { return image_size / patch_size; }
    int num_patches() const { return tokens_per_side() * tokens_per_side(); }
    int hidden_dim() const {
        return static_cast<int>(std::llround(gamma * embed_dim));
    }
    int se_bottleneck() const { return hidden_dim() / activation.se_reduction; }

    FfnVariant variant_of_layer(int layer_1based) const {
        if (locality_layers.count(layer_1based)) return FfnVariant::Locality;
        if (conv_layers.count(layer_1based)) return FfnVariant::Conv1x1;
        return FfnVariant::Plain;
    }

    void validate() const {
        check(image_size >= 1, "image_size must be positive, got " +
                                   std::to_string(image_size));
        check(patch_size >= 1 && image_size % patch_size == 0,
              "patch_size " + std::to_string(patch_size) + " must divide image_size " +
                  std::to_string(image_size));
        check(embed_dim >= 1, "embed_dim must be positive, got " + std::to_string(embed_dim));
        check(depth >= 1, "depth must be positive, got " + std::to_string(depth));
        check(heads >= 1 && embed_dim % heads == 0,
              "heads " + std::to_string(heads) + " must divide embed_dim " +
                  std::to_string(embed_dim));
        check(gamma > 0.0 && hidden_dim() >= 1,
              "gamma " + std::to_string(gamma) + " gives an empty hidden layer");
        check(num_classes >= 1, "num_classes must be positive, got " +
                                    std::to_string(num_classes));
        check(dw_kernel >= 1 && dw_kernel % 2 == 1,
              "dw_kernel must be odd, got " + std::to_string(dw_kernel));
        for (int l : locality_layers)
            check(l >= 1 && l <= depth, "locality_layers entry " + std::to_string(l) +
                                            " outside 1.." + std::to_string(depth));
        for (int l : conv_layers) {
            check(l >= 1 && l <= depth, "conv_layers entry " + std::to_string(l) +
                                            " outside 1.." + std::to_string(depth));
            check(!locality_layers.count(l),
                  "layer " + std::to_string(l) + " listed in both conv_layers and locality_layers");
        }
        if (!locality_layers.empty() && activation.gate == GateKind::SE)
            check(se_bottleneck() >= 1,
                  "se_reduction " + std::to_string(activation.se_reduction) +
                      " squeezes hidden width " + std::to_string(hidden_dim()) + " to 0");
        if (activation.gate == GateKind::ECA)
            check(activation.eca_kernel >= 1 && activation.eca_kernel % 2 == 1,
                  "eca_kernel must be odd, got " + std::to_string(activation.eca_kernel));
    }
};

struct Model {
    ModelConfig config;
    Tensor patch_w, patch_b;  // [3*p*p, d], [d]
    Tensor cls_token;         // [1, d]
    Tensor pos_embed;         // [N+1, d]
    std::vector<EncoderLayerParams> layers;
    Tensor final_ln_gamma, final_ln_beta;
    Tensor head_w, head_b;  // [d, num_classes], [num_classes]
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline Tensor init_weight(Rng& rng, Shape shape) {
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = rng.truncated_normal(0.02);
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

inline std::string layer_tag(int index_0based) {
    std::string n = std::to_string(index_0based + 1);
    return "layer" + std::string(n.size() < 2 ? "0" : "") + n;
}

}  // namespace detail

inline Model build_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(cfg.seed);
    int d = cfg.embed_dim;
    int hidden = cfg.hidden_dim();
    int N = cfg.num_patches();

    m.patch_w = detail::init_weight(rng, {3 * cfg.patch_size * cfg.patch_size, d});
    m.patch_b = Tensor::zeros({d}, true);
    m.cls_token = detail::init_weight(rng, {1, d});
    m.pos_embed = detail::init_weight(rng, {N + 1, d});

    for (int l = 0; l < cfg.depth; ++l) {
        EncoderLayerParams layer;
        layer.ln_eps = cfg.ln_eps;
        layer.ln1_gamma = Tensor::full({d}, 1.0, true);
        layer.ln1_beta = Tensor::zeros({d}, true);
        layer.attn.heads = cfg.heads;
        layer.attn.wq = detail::init_weight(rng, {d, d});
        layer.attn.bq = Tensor::zeros({d}, true);
        layer.attn.wk = detail::init_weight(rng, {d, d});
        layer.attn.bk = Tensor::zeros({d}, true);
        layer.attn.wv = detail::init_weight(rng, {d, d});
        layer.attn.bv = Tensor::zeros({d}, true);
        layer.attn.wo = detail::init_weight(rng, {d, d});
        layer.attn.bo = Tensor::zeros({d}, true);

        FfnVariant variant = cfg.variant_of_layer(l + 1);
        layer.ffn.variant = variant;
        layer.ffn.activation = cfg.activation;
        layer.ffn.bn_momentum = cfg.bn_momentum;
        layer.ffn.bn_eps = cfg.bn_eps;
        if (variant == FfnVariant::Locality) {
            layer.ffn.conv1_w = detail::init_weight(rng, {hidden, d, 1, 1});
            layer.ffn.dw_w = detail::init_weight(rng, {hidden, 1, cfg.dw_kernel, cfg.dw_kernel});
            layer.ffn.conv2_w = detail::init_weight(rng, {d, hidden, 1, 1});
            layer.ffn.bn1 = {Tensor::full({hidden}, 1.0, true), Tensor::zeros({hidden}, true),
                             BatchNormState(hidden)};
            layer.ffn.bnd = {Tensor::full({hidden}, 1.0, true), Tensor::zeros({hidden}, true),
                             BatchNormState(hidden)};
            layer.ffn.bn2 = {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true),
                             BatchNormState(d)};
            if (cfg.activation.gate == GateKind::SE) {
                int cb = cfg.se_bottleneck();
                layer.ffn.se.fc1_w = detail::init_weight(rng, {hidden, cb});
                layer.ffn.se.fc1_b = Tensor::zeros({cb}, true);
                layer.ffn.se.fc2_w = detail::init_weight(rng, {cb, hidden});
                layer.ffn.se.fc2_b = Tensor::zeros({hidden}, true);
            } else if (cfg.activation.gate == GateKind::ECA) {
                layer.ffn.eca.kernel = detail::init_weight(rng, {cfg.activation.eca_kernel});
            }
        } else {
            layer.ln2_gamma = Tensor::full({d}, 1.0, true);
            layer.ln2_beta = Tensor::zeros({d}, true);
            layer.ffn.w1 = detail::init_weight(rng, {d, hidden});
            layer.ffn.b1 = Tensor::zeros({hidden}, true);
            layer.ffn.w2 = detail::init_weight(rng, {hidden, d});
            layer.ffn.b2 = Tensor::zeros({d}, true);
        }
        m.layers.push_back(std::move(layer));
    }

    m.final_ln_gamma = Tensor::full({d}, 1.0, true);
    m.final_ln_beta = Tensor::zeros({d}, true);
    m.head_w = detail::init_weight(rng, {d, cfg.num_classes});
    m.head_b = Tensor::zeros({cfg.num_classes}, true);
    return m;
}

inline std::vector<NamedParam> named_params(Model& m) {
    std::vector<NamedParam> out;
    auto push = [&](const std::string& name, const Tensor& t) {
        if (t.defined()) out.push_back({name, t});
    };
    push("patch_embed.weight", m.patch_w);
    push("patch_embed.bias", m.patch_b);
    push("cls_token", m.cls_token);
    push("pos_embed", m.pos_embed);
    for (size_t l = 0; l < m.layers.size(); ++l) {
        std::string tag = detail::layer_tag(static_cast<int>(l));
        auto& lay = m.layers[l];
        push(tag + ".ln1.gamma", lay.ln1_gamma);
        push(tag + ".ln1.beta", lay.ln1_beta);
        push(tag + ".attn.wq", lay.attn.wq);
        push(tag + ".attn.bq", lay.attn.bq);
        push(tag + ".attn.wk", lay.attn.wk);
        push(tag + ".attn.bk", lay.attn.bk);
        push(tag + ".attn.wv", lay.attn.wv);
        push(tag + ".attn.bv", lay.attn.bv);
        push(tag + ".attn.wo", lay.attn.wo);
        push(tag + ".attn.bo", lay.attn.bo);
        push(tag + ".ln2.gamma", lay.ln2_gamma);
        push(tag + ".ln2.beta", lay.ln2_beta);
        push(tag + ".ffn.w1", lay.ffn.w1);
        push(tag + ".ffn.b1", lay.ffn.b1);
        push(tag + ".ffn.w2", lay.ffn.w2);
        push(tag + ".ffn.b2", lay.ffn.b2);
        push(tag + ".ffn.conv1_w", lay.ffn.conv1_w);
        push(tag + ".ffn.bn1.gamma", lay.ffn.bn1.gamma);
        push(tag + ".ffn.bn1.beta", lay.ffn.bn1.beta);
        push(tag + ".ffn.dw_w", lay.ffn.dw_w);
        push(tag + ".ffn.bnd.gamma", lay.ffn.bnd.gamma);
        push(tag + ".ffn.bnd.beta", lay.ffn.bnd.beta);
        push(tag + ".ffn.se.fc1_w", lay.ffn.se.fc1_w);
        push(tag + ".ffn.se.fc1_b", lay.ffn.se.fc1_b);
        push(tag + ".ffn.se.fc2_w", lay.ffn.se.fc2_w);
        push(tag + ".ffn.se.fc2_b", lay.ffn.se.fc2_b);
        push(tag + ".ffn.eca.kernel", lay.ffn.eca.kernel);
        push(tag + ".ffn.conv2_w", lay.ffn.conv2_w);
        push(tag + ".ffn.bn2.gamma", lay.ffn.bn2.gamma);
        push(tag + ".ffn.bn2.beta", lay.ffn.bn2.beta);
    }
    push("final_norm.gamma", m.final_ln_gamma);
    push("final_norm.beta", m.final_ln_beta);
    push("head.weight", m.head_w);
    push("head.bias", m.head_b);
    return out;
}

struct NamedBnState {
    std::string name;
    BatchNormState* state;
};

inline std::vector<NamedBnState> named_bn_states(Model& m) {
    std::vector<NamedBnState> out;
    for (size_t l = 0; l < m.layers.size(); ++l) {
        if (m.layers[l].ffn.variant != FfnVariant::Locality) continue;
        std::string tag = detail::layer_tag(static_cast<int>(l));
        out.push_back({tag + ".ffn.bn1", &m.layers[l].ffn.bn1.state});
        out.push_back({tag + ".ffn.bnd", &m.layers[l].ffn.bnd.state});
        out.push_back({tag + ".ffn.bn2", &m.layers[l].ffn.bn2.state});
    }
    return out;
}

inline int64_t enumerate_params(Model& m) {
    int64_t total = 0;
    for (auto& p : named_params(m)) total += p.tensor.size();
    return total;
}

// patchify -> linear embed -> prepend class token -> positional embedding ->
// encoder stack -> final layer norm -> head on the class token.
inline Tensor forward_classify(Model& m, const Tensor& images, Mode mode) {
    const Shape& s = images.shape();
    check(s.size() == 4 && s[1] == 3, "forward_classify: images must be [b,3,H,W], got " +
                                          shape_str(s));
    check(s[2] == m.config.image_size && s[3] == m.config.image_size,
          "forward_classify: image size " + std::to_string(s[2]) + "x" +
              std::to_string(s[3]) + " does not match config " +
              std::to_string(m.config.image_size));
    int b = s[0];
    int side = m.config.tokens_per_side();

    Tensor tokens = add_rowvec(matmul(patchify(images, m.config.patch_size), m.patch_w),
                               m.patch_b);
    Tensor cls = tile_batch(m.cls_token, b);  // [b, 1, d]
    TokenBatch x{add_seq(concat(cls, tokens, 1), m.pos_embed), true, side, side};
    for (auto& layer : m.layers) x = encoder_layer_forward(x, layer, mode);
    Tensor normed = layer_norm(x.tokens, m.final_ln_gamma, m.final_ln_beta, m.config.ln_eps);
    Tensor cls_out = reshape(slice(normed, 1, 0, 1), {b, m.config.embed_dim});
    return add_rowvec(matmul(cls_out, m.head_w), m.head_b);
}

// ---- presets ------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"deit-t",           "deit-t-g6",         "deit-s",
            "localvit-t-conv",  "localvit-t-conv-g6", "localvit-t-relu6",
            "localvit-t-hswish", "localvit-t-eca",    "localvit-t",
            "localvit-t-se96",  "localvit-t-se48",   "localvit-t-se4",
            "localvit-t-g6",    "localvit-s",        "placement-high",
            "placement-mid",    "placement-low",     "placement-low8",
            "placement-all",    "gamma-1",           "gamma-1-se",
            "gamma-2",          "gamma-2-se",        "gamma-3",
            "gamma-3-se",       "gamma-4",           "gamma-4-se",
            "micro-plain",      "micro-conv",        "micro-localvit"};
}

inline ModelConfig preset(const std::string& name) {
    std::set<int> all12, low4, mid4, high4, low8;
    for (int i = 1; i <= 12; ++i) all12.insert(i);
    for (int i = 1; i <= 4; ++i) low4.insert(i);
    for (int i = 5; i <= 8; ++i) mid4.insert(i);
    for (int i = 9; i <= 12; ++i) high4.insert(i);
    for (int i = 1; i <= 8; ++i) low8.insert(i);

    ModelConfig tiny;  // the DeiT-T geometry every tiny ablation shares
    tiny.image_size = 224;
    tiny.patch_size = 16;
    tiny.embed_dim = 192;
    tiny.depth = 12;
    tiny.heads = 3;
    tiny.gamma = 4.0;
    tiny.num_classes = 1000;

    auto with_locality = [&](ModelConfig cfg, std::set<int> layers, BaseAct base,
                             GateKind gate, int se_r, int eca_k) {
        cfg.locality_layers = std::move(layers);
        cfg.activation.base = base;
        cfg.activation.gate = gate;
        cfg.activation.se_reduction = se_r;
        cfg.activation.eca_kernel = eca_k;
        return cfg;
    };

    ModelConfig micro;
    micro.image_size = 16;
    micro.patch_size = 4;
    micro.embed_dim = 12;
    micro.depth = 2;
    micro.heads = 2;
    micro.num_classes = 4;
    micro.activation.base = BaseAct::HSwish;

    if (name == "deit-t") return tiny;
    if (name == "deit-t-g6") {
        ModelConfig c = tiny;
        c.gamma = 6.0;
        return c;
    }
    if (name == "deit-s" || name == "localvit-s") {
        ModelConfig c = tiny;
        c.embed_dim = 384;
        c.heads = 6;
        if (name == "localvit-s")
            // squeeze keeps 4 of the 1536 hidden channels
            c = with_locality(c, all12, BaseAct::HSwish, GateKind::SE, 384, 5);
        return c;
    }
    if (name == "localvit-t-conv" || name == "localvit-t-conv-g6") {
        ModelConfig c = tiny;
        if (name == "localvit-t-conv-g6") c.gamma = 6.0;
        c.conv_layers = all12;
        return c;
    }
    if (name == "localvit-t-relu6")
        return with_locality(tiny, all12, BaseAct::ReLU6, GateKind::None, 192, 5);
    if (name == "localvit-t-hswish" || name == "gamma-4")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::None, 192, 5);
    if (name == "localvit-t-eca")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::ECA, 192, 5);
    if (name == "localvit-t" || name == "placement-all" || name == "gamma-4-se")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::SE, 192, 5);
    if (name == "localvit-t-se96")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::SE, 96, 5);
    if (name == "localvit-t-se48")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::SE, 48, 5);
    if (name == "localvit-t-se4")
        return with_locality(tiny, all12, BaseAct::HSwish, GateKind::SE, 4, 5);
    if (name == "localvit-t-g6") {
        ModelConfig c = tiny;
        c.gamma = 6.0;
        return with_locality(c, all12, BaseAct::ReLU6, GateKind::None, 192, 5);
    }
    if (name == "placement-high")
        return with_locality(tiny, high4, BaseAct::HSwish, GateKind::SE, 192, 5);
    if (name == "placement-mid")
        return with_locality(tiny, mid4, BaseAct::HSwish, GateKind::SE, 192, 5);
    if (name == "placement-low")
        return with_locality(tiny, low4, BaseAct::HSwish, GateKind::SE, 192, 5);
    if (name == "placement-low8")
        return with_locality(tiny, low8, BaseAct::HSwish, GateKind::SE, 192, 5);
    if (name.rfind("gamma-", 0) == 0 && name.size() >= 7) {
        int g = name[6] - '0';
        if (g >= 1 && g <= 4 && (name.size() == 7 || name.substr(7) == "-se")) {
            ModelConfig c = tiny;
            c.gamma = static_cast<double>(g);
            bool se = name.size() > 7;
            // SE reduction keeps 4 channels of the g*192 hidden width
            return with_locality(c, all12, BaseAct::HSwish,
                                 se ? GateKind::SE : GateKind::None, 48 * g, 5);
        }
    }
    if (name == "micro-plain") {
        ModelConfig c = micro;
        c.gamma = 4.0;  // hidden 48, parameter-matched with micro-localvit
        return c;
    }
    if (name == "micro-conv") {
        ModelConfig c = micro;
        c.gamma = 4.0;
        for (int i = 1; i <= c.depth; ++i) c.conv_layers.insert(i);
        return c;
    }
    if (name == "micro-localvit") {
        ModelConfig c = micro;
        c.gamma = 2.0;  // hidden 24
        for (int i = 1; i <= c.depth; ++i) c.locality_layers.insert(i);
        c.activation.gate = GateKind::SE;
        c.activation.se_reduction = 4;
        return c;
    }

    std::string msg = "unknown preset '" + name + "'; available:";
    for (const auto& n : preset_names()) msg += " " + n;
    fail(msg);
}

}  // namespace localvit
