#pragma once

// Transformer building blocks: multi-head self-attention, the three
// feed-forward variants (token-space, 1x1-convolutional, and the locality
// block with a depth-wise convolution), channel gates, and the class-token
// split/concat routing around the lattice-shaped feed-forward path.

#include <cmath>
#include <utility>

#include "localvit/tensor.hpp"

namespace localvit {

// One batch of token sequences together with the lattice the image tokens
// came from. When a class token is present it occupies index 0.
struct TokenBatch {
    Tensor tokens;  // [b, N(+1), d]
    bool has_class_token = false;
    int lattice_h = 0;
    int lattice_w = 0;

    int image_tokens() const { return lattice_h * lattice_w; }
    int batch() const { return tokens.dim(0); }
    int embed_dim() const { return tokens.dim(2); }

    void validate() const {
        check(tokens.rank() == 3, "TokenBatch: tokens must be [b,n,d], got " +
                                      shape_str(tokens.shape()));
        int expect = image_tokens() + (has_class_token ? 1 : 0);
        check(tokens.dim(1) == expect,
              "TokenBatch: " + std::to_string(tokens.dim(1)) + " tokens for lattice " +
                  std::to_string(lattice_h) + "x" + std::to_string(lattice_w) +
                  (has_class_token ? " plus class token" : ""));
    }
};

// ---- token <-> lattice conversion ------------------------------------------

// [b, N, d] -> [b, d, h, w]; token i lands on pixel (i / w, i % w).
inline Tensor seq2img(const Tensor& z, int h, int w) {
    const Shape& s = z.shape();
    check(s.size() == 3, "seq2img: input must be [b,N,d], got " + shape_str(s));
    check(s[1] == h * w, "seq2img: " + std::to_string(s[1]) + " tokens cannot fill a " +
                             std::to_string(h) + "x" + std::to_string(w) + " lattice");
    return permute(reshape(z, {s[0], h, w, s[2]}), {0, 3, 1, 2});
}

// [b, d, h, w] -> [b, h*w, d]; exact inverse of seq2img.
inline Tensor img2seq(const Tensor& y) {
    const Shape& s = y.shape();
    check(s.size() == 4, "img2seq: input must be [b,d,h,w], got " + shape_str(s));
    return reshape(permute(y, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

// ---- class token routing ----------------------------------------------------

inline std::pair<Tensor, TokenBatch> class_token_split(const TokenBatch& z) {
    z.validate();
    check(z.has_class_token, "class_token_split: no class token present");
    Tensor cls = slice(z.tokens, 1, 0, 1);
    TokenBatch img{slice(z.tokens, 1, 1, z.image_tokens()), false, z.lattice_h, z.lattice_w};
    return {cls, img};
}

inline TokenBatch class_token_concat(const Tensor& cls, const TokenBatch& img) {
    img.validate();
    check(!img.has_class_token, "class_token_concat: image tokens already carry a class token");
    check(cls.rank() == 3 && cls.dim(1) == 1 && cls.dim(0) == img.batch() &&
              cls.dim(2) == img.embed_dim(),
          "class_token_concat: class token " + shape_str(cls.shape()) +
              " does not match image tokens " + shape_str(img.tokens.shape()));
    return TokenBatch{concat(cls, img.tokens, 1), true, img.lattice_h, img.lattice_w};
}

// ---- attention ---------------------------------------------------------------

struct AttentionParams {
    Tensor wq, bq;  // [d,d], [d]
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;  // output projection after head concatenation
    int heads = 1;
};

inline TokenBatch multi_head_attention(const TokenBatch& x, const AttentionParams& p) {
    x.validate();
    int b = x.batch(), n = x.tokens.dim(1), d = x.embed_dim();
    check(p.heads >= 1 && d % p.heads == 0,
          "multi_head_attention: heads=" + std::to_string(p.heads) +
              " does not divide embed dim " + std::to_string(d));
    int dh = d / p.heads;

    auto project = [&](const Tensor& w, const Tensor& bias) {
        // [b,n,d] -> [b,heads,n,dh]
        Tensor t = add_rowvec(matmul(x.tokens, w), bias);
        return permute(reshape(t, {b, n, p.heads, dh}), {0, 2, 1, 3});
    };
    Tensor q = project(p.wq, p.bq);
    Tensor k = project(p.wk, p.bk);
    Tensor v = project(p.wv, p.bv);

    Tensor scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(double(dh)));
    Tensor attn = softmax_rows(scores);
    Tensor ctx = attn_apply(attn, v);
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, n, d});
    Tensor out = add_rowvec(matmul(merged, p.wo), p.bo);
    return TokenBatch{out, x.has_class_token, x.lattice_h, x.lattice_w};
}

// ---- activations and channel gates -------------------------------------------

enum class BaseAct { ReLU6, HSwish };
enum class GateKind { None, SE, ECA };

struct ActivationSpec {
    BaseAct base = BaseAct::ReLU6;
    GateKind gate = GateKind::None;
    int se_reduction = 4;  // SE: bottleneck width is floor(channels / reduction)
    int eca_kernel = 5;    // ECA: taps of the cross-channel 1D convolution
};

struct SeParams {
    Tensor fc1_w, fc1_b;  // [c, floor(c/r)], [floor(c/r)]
    Tensor fc2_w, fc2_b;  // [floor(c/r), c], [c]
};

struct EcaParams {
    Tensor kernel;  // [k], no bias
};

inline Tensor apply_base_activation(const Tensor& x, BaseAct base) {
    return base == BaseAct::ReLU6 ? relu6(x) : hswish(x);
}

// Squeeze-and-excitation: per-channel sigmoid gate from a bottleneck MLP
// over globally pooled descriptors.
inline Tensor se_gate(const Tensor& u, int reduction, const SeParams& p) {
    const Shape& s = u.shape();
    check(s.size() == 4, "se_gate: input must be [b,c,h,w], got " + shape_str(s));
    int c = s[1];
    int cb = c / reduction;
    check(cb >= 1, "se_gate: bottleneck width floor(" + std::to_string(c) + "/" +
                       std::to_string(reduction) + ") is 0");
    check(p.fc1_w.shape() == Shape{c, cb} && p.fc2_w.shape() == Shape{cb, c},
          "se_gate: parameter shapes do not match channels=" + std::to_string(c) +
              " bottleneck=" + std::to_string(cb));
    Tensor sq = global_avg_pool(u);
    Tensor hidden = relu(add_rowvec(matmul(sq, p.fc1_w), p.fc1_b));
    Tensor gate = sigmoid(add_rowvec(matmul(hidden, p.fc2_w), p.fc2_b));
    return scale_channels(u, gate);
}

// Efficient channel attention: k-tap 1D convolution across pooled channel
// descriptors, then a per-channel sigmoid gate. Exactly k parameters.
inline Tensor eca_gate(const Tensor& u, const EcaParams& p) {
    const Shape& s = u.shape();
    check(s.size() == 4, "eca_gate: input must be [b,c,h,w], got " + shape_str(s));
    Tensor gate = sigmoid(conv1d_channels(global_avg_pool(u), p.kernel));
    return scale_channels(u, gate);
}

// ---- feed-forward variants -----------------------------------------------------

enum class FfnVariant { Plain, Conv1x1, Locality };

inline const char* ffn_variant_name(FfnVariant v) {
    switch (v) {
        case FfnVariant::Plain: return "plain";
        case FfnVariant::Conv1x1: return "conv1x1";
        case FfnVariant::Locality: return "locality";
    }
    return "?";
}

struct BatchNormBlock {
    Tensor gamma, beta;
    BatchNormState state;
};

struct FfnParams {
    FfnVariant variant = FfnVariant::Plain;
    ActivationSpec activation;

    // Plain / Conv1x1: token-space weights with biases (no batch norm here).
    Tensor w1, b1;  // [d, hidden], [hidden]
    Tensor w2, b2;  // [hidden, d], [d]

    // Locality: convolution kernels, bias-free since batch norm follows each.
    Tensor conv1_w;  // [hidden, d, 1, 1]
    Tensor dw_w;     // [hidden, 1, k, k]
    Tensor conv2_w;  // [d, hidden, 1, 1]
    BatchNormBlock bn1, bnd, bn2;

    SeParams se;
    EcaParams eca;

    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
};

inline Tensor apply_channel_gate(const Tensor& u, const FfnParams& p) {
    switch (p.activation.gate) {
        case GateKind::None: return u;
        case GateKind::SE: return se_gate(u, p.activation.se_reduction, p.se);
        case GateKind::ECA: return eca_gate(u, p.eca);
    }
    return u;
}

// Position-wise two-layer map, f between the layers.
inline Tensor ffn_plain(const Tensor& z, const FfnParams& p) {
    check(p.variant == FfnVariant::Plain || p.variant == FfnVariant::Conv1x1,
          std::string("ffn_plain: params are for the ") + ffn_variant_name(p.variant) +
              " variant");
    Tensor h = apply_base_activation(add_rowvec(matmul(z, p.w1), p.b1), p.activation.base);
    return add_rowvec(matmul(h, p.w2), p.b2);
}

// The same map computed on the lattice with 1x1 convolutions; weights are
// reshaped views of w1/w2, so this agrees with ffn_plain to the last bit.
inline TokenBatch ffn_conv(const TokenBatch& z, const FfnParams& p) {
    check(p.variant == FfnVariant::Conv1x1,
          std::string("ffn_conv: params are for the ") + ffn_variant_name(p.variant) +
              " variant");
    z.validate();
    check(!z.has_class_token, "ffn_conv: class token present; split it first");
    int d = z.embed_dim();
    int hidden = p.w1.dim(1);
    Tensor img = seq2img(z.tokens, z.lattice_h, z.lattice_w);
    Tensor w1r = reshape(permute(p.w1, {1, 0}), {hidden, d, 1, 1});
    Tensor w2r = reshape(permute(p.w2, {1, 0}), {d, hidden, 1, 1});
    Tensor h = apply_base_activation(conv2d_pointwise(img, w1r, p.b1), p.activation.base);
    Tensor y = conv2d_pointwise(h, w2r, p.b2);
    return TokenBatch{img2seq(y), false, z.lattice_h, z.lattice_w};
}

// Inverted-residual style feed-forward: expand (1x1) -> depth-wise k x k ->
// project (1x1), batch norm after every convolution, base activation after
// the first two, the channel gate once after the depth-wise stage.
inline TokenBatch ffn_locality(const TokenBatch& z, FfnParams& p, Mode mode) {
    check(p.variant == FfnVariant::Locality,
          std::string("ffn_locality: params are for the ") + ffn_variant_name(p.variant) +
              " variant");
    z.validate();
    check(!z.has_class_token, "ffn_locality: class token present; split it first");
    check(p.dw_w.defined(), "ffn_locality: depth-wise kernel missing");
    int k = p.dw_w.dim(2);

    Tensor img = seq2img(z.tokens, z.lattice_h, z.lattice_w);
    Tensor h = conv2d_pointwise(img, p.conv1_w);
    h = batch_norm2d(h, p.bn1.gamma, p.bn1.beta, p.bn1.state, mode, p.bn_momentum, p.bn_eps);
    h = apply_base_activation(h, p.activation.base);

    h = conv2d_depthwise(h, p.dw_w, std::nullopt, (k - 1) / 2);
    h = batch_norm2d(h, p.bnd.gamma, p.bnd.beta, p.bnd.state, mode, p.bn_momentum, p.bn_eps);
    h = apply_base_activation(h, p.activation.base);
    h = apply_channel_gate(h, p);

    h = conv2d_pointwise(h, p.conv2_w);
    h = batch_norm2d(h, p.bn2.gamma, p.bn2.beta, p.bn2.state, mode, p.bn_momentum, p.bn_eps);
    return TokenBatch{img2seq(h), false, z.lattice_h, z.lattice_w};
}

// ---- encoder layer ---------------------------------------------------------------

struct EncoderLayerParams {
    Tensor ln1_gamma, ln1_beta;
    AttentionParams attn;
    Tensor ln2_gamma, ln2_beta;  // absent for the Locality variant
    FfnParams ffn;
    double ln_eps = 1e-6;
};

// Pre-norm residual layer. The Locality variant drops the layer norm in
// front of the feed-forward network and bypasses the class token around it;
// the class-token row of the feed-forward branch is therefore exactly zero.
inline TokenBatch encoder_layer_forward(const TokenBatch& x, EncoderLayerParams& p,
                                        Mode mode) {
    x.validate();
    TokenBatch normed{layer_norm(x.tokens, p.ln1_gamma, p.ln1_beta, p.ln_eps),
                      x.has_class_token, x.lattice_h, x.lattice_w};
    TokenBatch u{add(x.tokens, multi_head_attention(normed, p.attn).tokens),
                 x.has_class_token, x.lattice_h, x.lattice_w};

    if (p.ffn.variant == FfnVariant::Locality) {
        if (u.has_class_token) {
            auto [cls, img] = class_token_split(u);
            TokenBatch ffn_out = ffn_locality(img, p.ffn, mode);
            TokenBatch res{add(img.tokens, ffn_out.tokens), false, u.lattice_h, u.lattice_w};
            return class_token_concat(cls, res);
        }
        TokenBatch ffn_out = ffn_locality(u, p.ffn, mode);
        return TokenBatch{add(u.tokens, ffn_out.tokens), false, u.lattice_h, u.lattice_w};
    }

    Tensor normed2 = layer_norm(u.tokens, p.ln2_gamma, p.ln2_beta, p.ln_eps);
    Tensor branch;
    if (p.ffn.variant == FfnVariant::Plain) {
        branch = ffn_plain(normed2, p.ffn);
    } else {
        // Conv1x1: the lattice form on image tokens; the class token takes
        // the identical position-wise map, so the layer matches Plain.
        TokenBatch n2{normed2, u.has_class_token, u.lattice_h, u.lattice_w};
        if (n2.has_class_token) {
            auto [cls, img] = class_token_split(n2);
            Tensor cls_out = ffn_plain(cls, p.ffn);
            TokenBatch img_out = ffn_conv(img, p.ffn);
            branch = concat(cls_out, img_out.tokens, 1);
        } else {
            branch = ffn_conv(n2, p.ffn).tokens;
        }
    }
    return TokenBatch{add(u.tokens, branch), u.has_class_token, u.lattice_h, u.lattice_w};
}

}  // namespace localvit
