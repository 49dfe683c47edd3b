#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <vector>

#include "localvit/complexity.hpp"
#include "localvit/gradcheck.hpp"
#include "localvit/model.hpp"
#include "localvit/serialize.hpp"

using namespace localvit;

namespace {

Tensor rand_images(Rng& rng, int b, int size) {
    std::vector<double> data(static_cast<size_t>(b) * 3 * size * size);
    for (auto& v : data) v = 2 * rng.uniform() - 1;
    return Tensor::from_data({b, 3, size, size}, std::move(data));
}

}  // namespace

TEST_CASE("deit-t preset counts 5.7M parameters") {
    Model m = build_model(preset("deit-t"));
    CHECK(enumerate_params(m) == 5717416);
}

TEST_CASE("micro smoke configuration builds and runs forward") {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.gamma = 2.0;
    cfg.num_classes = 4;
    Model m = build_model(cfg);
    Rng rng(3);
    auto logits = forward_classify(m, rand_images(rng, 2, 16), Mode::Eval);
    CHECK(logits.shape() == Shape{2, 4});
    CHECK(all_finite(logits.data()));
}

TEST_CASE("same seed builds bit-identical models") {
    Model a = build_model(preset("micro-localvit"));
    Model b = build_model(preset("micro-localvit"));
    auto pa = named_params(a);
    auto pb = named_params(b);
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor.data() == pb[i].tensor.data());
    }
}

TEST_CASE("config validation names the offending field") {
    ModelConfig cfg = preset("micro-plain");
    cfg.depth = -3;
    REQUIRE_THROWS_WITH(build_model(cfg), Catch::Matchers::ContainsSubstring("depth"));

    ModelConfig cfg2 = preset("micro-plain");
    cfg2.patch_size = 5;
    REQUIRE_THROWS_WITH(build_model(cfg2),
                        Catch::Matchers::ContainsSubstring("patch_size"));

    ModelConfig cfg3 = preset("micro-localvit");
    cfg3.locality_layers.insert(9);
    REQUIRE_THROWS_WITH(build_model(cfg3),
                        Catch::Matchers::ContainsSubstring("locality_layers"));
}

TEST_CASE("unknown preset lists the available names") {
    REQUIRE_THROWS_WITH(preset("resnet-50"),
                        Catch::Matchers::ContainsSubstring("deit-t") &&
                            Catch::Matchers::ContainsSubstring("micro-localvit"));
}

TEST_CASE("preset fields match the ablation grid") {
    CHECK(preset("localvit-t").gamma == 4.0);
    CHECK(preset("localvit-t").activation.gate == GateKind::SE);
    CHECK(preset("localvit-t").activation.se_reduction == 192);
    CHECK(preset("placement-mid").locality_layers == std::set<int>{5, 6, 7, 8});
    CHECK(preset("placement-low").locality_layers == std::set<int>{1, 2, 3, 4});
    CHECK(preset("gamma-2-se").activation.gate == GateKind::SE);
    CHECK(preset("gamma-2-se").gamma == 2.0);
    CHECK(preset("localvit-t-g6").gamma == 6.0);
    CHECK(preset("localvit-s").embed_dim == 384);
    // LocalViT-S squeezes its 1536 hidden channels down to 4
    CHECK(preset("localvit-s").hidden_dim() / preset("localvit-s").activation.se_reduction == 4);
}

TEST_CASE("logits shape and finiteness for the locality micro model") {
    Model m = build_model(preset("micro-localvit"));
    Rng rng(5);
    auto logits = forward_classify(m, rand_images(rng, 3, 16), Mode::Train);
    CHECK(logits.shape() == Shape{3, 4});
    CHECK(all_finite(logits.data()));
}

TEST_CASE("eval-mode forward is pure") {
    Model m = build_model(preset("micro-localvit"));
    Rng rng(6);
    auto imgs = rand_images(rng, 2, 16);
    auto states = named_bn_states(m);
    auto mean_before = states[0].state->running_mean;
    auto a = forward_classify(m, imgs, Mode::Eval);
    auto b = forward_classify(m, imgs, Mode::Eval);
    CHECK(a.data() == b.data());
    CHECK(states[0].state->running_mean == mean_before);

    // train mode mutates only the batch-norm running stats
    auto params_before = checkpoint_to_json(m)["params"].dump();
    (void)forward_classify(m, imgs, Mode::Train);
    CHECK(states[0].state->running_mean != mean_before);
    CHECK(checkpoint_to_json(m)["params"].dump() == params_before);
}

TEST_CASE("image-token permutation with zeroed positional embedding keeps class logits") {
    ModelConfig cfg = preset("micro-plain");
    Model m = build_model(cfg);
    Rng rng(7);
    auto imgs = rand_images(rng, 1, 16);
    auto base = forward_classify(m, imgs, Mode::Eval);

    // permuting patch contents changes logits while the positional embedding is live
    int p = cfg.patch_size, side = cfg.image_size / p;
    auto permute_patches = [&](const Tensor& im) {
        std::vector<double> out(im.data().size());
        std::vector<int> perm = {3, 1, 2, 0, 7, 5, 6, 4, 11, 9, 10, 8, 15, 13, 14, 12};
        for (int c = 0; c < 3; ++c)
            for (int t = 0; t < side * side; ++t)
                for (int di = 0; di < p; ++di)
                    for (int dj = 0; dj < p; ++dj) {
                        int src = perm[t];
                        out[(c * 16 + (t / side) * p + di) * 16 + (t % side) * p + dj] =
                            im.data()[(c * 16 + (src / side) * p + di) * 16 +
                                      (src % side) * p + dj];
                    }
        return Tensor::from_data(im.shape(), std::move(out));
    };
    auto shuffled = forward_classify(m, permute_patches(imgs), Mode::Eval);
    CHECK(base.data() != shuffled.data());

    m.pos_embed.data().assign(m.pos_embed.data().size(), 0.0);
    auto base0 = forward_classify(m, imgs, Mode::Eval);
    auto shuf0 = forward_classify(m, permute_patches(imgs), Mode::Eval);
    CHECK(base0.data() == shuf0.data());  // exact, via attention equivariance
}

TEST_CASE("conv-variant micro model matches the plain twin") {
    ModelConfig plain_cfg = preset("micro-plain");
    ModelConfig conv_cfg = preset("micro-conv");
    REQUIRE(plain_cfg.seed == conv_cfg.seed);
    Model plain = build_model(plain_cfg);
    Model conv = build_model(conv_cfg);
    CHECK(enumerate_params(plain) == enumerate_params(conv));
    Rng rng(8);
    auto imgs = rand_images(rng, 2, 16);
    auto a = forward_classify(plain, imgs, Mode::Eval);
    auto b = forward_classify(conv, imgs, Mode::Eval);
    for (size_t i = 0; i < a.data().size(); ++i)
        CHECK(a.data()[i] == Catch::Approx(b.data()[i]).margin(1e-12));
}

TEST_CASE("micro model end-to-end gradient check") {
    Model m = build_model(preset("micro-localvit"));
    Rng rng(9);
    auto imgs = rand_images(rng, 2, 16);
    std::vector<int> labels = {1, 3};

    auto run = [&](Model& model) {
        auto states = named_bn_states(model);
        std::vector<BatchNormState> saved;
        for (auto& s : states) saved.push_back(*s.state);
        auto loss = cross_entropy_smoothed(forward_classify(model, imgs, Mode::Train),
                                           labels, 0.1);
        for (size_t i = 0; i < states.size(); ++i) *states[i].state = saved[i];
        return loss;
    };
    backward(run(m));
    auto f = [&] { return run(m).item(); };

    // spot-check representative blocks; the full sweep runs in the train suite
    for (const char* name : {"patch_embed.weight", "cls_token", "pos_embed",
                             "layer01.attn.wq", "layer01.ffn.conv1_w", "layer01.ffn.dw_w",
                             "layer02.ffn.se.fc1_w", "layer02.ffn.bn2.gamma",
                             "head.weight"}) {
        auto params = named_params(m);
        for (auto& p : params)
            if (p.name == name) {
                INFO(name);
                CHECK(max_rel_err(p.tensor.grad(), finite_diff_grad(f, p.tensor, 1e-5)) <
                      1e-4);
            }
    }
}

TEST_CASE("checkpoint round trip preserves every value") {
    Model m = build_model(preset("micro-localvit"));
    Rng rng(10);
    auto imgs = rand_images(rng, 2, 16);
    (void)forward_classify(m, imgs, Mode::Train);  // give BN states non-trivial values

    std::string path = "checkpoint_roundtrip_test.json";
    save_checkpoint(m, path);
    Model restored = load_checkpoint(path);
    std::remove(path.c_str());

    auto pa = named_params(m);
    auto pb = named_params(restored);
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor.data() == pb[i].tensor.data());
    auto sa = named_bn_states(m);
    auto sb = named_bn_states(restored);
    for (size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].state->running_mean == sb[i].state->running_mean);
        CHECK(sa[i].state->running_var == sb[i].state->running_var);
    }
    auto la = forward_classify(m, imgs, Mode::Eval);
    auto lb = forward_classify(restored, imgs, Mode::Eval);
    CHECK(la.data() == lb.data());
}

TEST_CASE("config json rejects unknown keys") {
    nlohmann::json j = config_to_json(preset("micro-plain"));
    CHECK(config_from_json(j).embed_dim == 12);
    j["embed_dmi"] = 64;
    REQUIRE_THROWS_WITH(config_from_json(j),
                        Catch::Matchers::ContainsSubstring("embed_dmi"));
}
