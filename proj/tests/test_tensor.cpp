#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "localvit/gradcheck.hpp"
#include "localvit/tensor.hpp"

using namespace localvit;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, bool requires_grad = false, double lo = -1.0,
                   double hi = 1.0) {
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = lo + (hi - lo) * rng.uniform();
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

double loss_value(const Tensor& t) { return t.item(); }

}  // namespace

TEST_CASE("matmul identity and hand products") {
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto c = matmul(eye, a);
    CHECK(c.data() == std::vector<double>{1, 2, 3, 4});

    auto row = Tensor::from_data({1, 2}, {1, 2});
    auto col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul shape errors name both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    REQUIRE_THROWS_WITH(matmul(a, b),
                        Catch::Matchers::ContainsSubstring("[2,3]") &&
                            Catch::Matchers::ContainsSubstring("[4,2]"));
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    auto a = rand_tensor(rng, {3, 4}, true);
    auto b = rand_tensor(rng, {4, 2}, true);
    auto loss = sum(matmul(a, b));
    backward(loss);

    auto fa = [&] { return loss_value(sum(matmul(a, b))); };
    auto fd_a = finite_diff_grad(fa, a, 1e-5);
    CHECK(max_rel_err(a.grad(), fd_a) < 1e-6);
    auto fd_b = finite_diff_grad(fa, b, 1e-5);
    CHECK(max_rel_err(b.grad(), fd_b) < 1e-6);
}

TEST_CASE("matmul broadcast rhs gradient") {
    Rng rng(8);
    auto a = rand_tensor(rng, {2, 3, 4}, true);
    auto w = rand_tensor(rng, {4, 5}, true);
    auto loss = sum(matmul(a, w));
    backward(loss);
    auto f = [&] { return loss_value(sum(matmul(a, w))); };
    CHECK(max_rel_err(w.grad(), finite_diff_grad(f, w, 1e-5)) < 1e-6);
    CHECK(max_rel_err(a.grad(), finite_diff_grad(f, a, 1e-5)) < 1e-6);
}

TEST_CASE("softmax_rows symmetry and stability") {
    auto y = softmax_rows(Tensor::from_data({3}, {0, 0, 0}));
    for (double v : y.data()) CHECK(v == Catch::Approx(1.0 / 3).margin(1e-15));

    auto z = softmax_rows(Tensor::from_data({2}, {1000, 0}));
    CHECK(z.data()[0] == 1.0);
    CHECK(z.data()[1] == 0.0);
    CHECK(all_finite(z.data()));
}

TEST_CASE("softmax_rows sums to one and shift invariance") {
    Rng rng(11);
    auto x = rand_tensor(rng, {4, 5}, false, -3, 3);
    auto y = softmax_rows(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int j = 0; j < 5; ++j) s += y.data()[r * 5 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
    std::vector<double> shifted = x.data();
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 5; ++j) shifted[r * 5 + j] += 0.75 * (r + 1);
    auto y2 = softmax_rows(Tensor::from_data({4, 5}, shifted));
    for (size_t i = 0; i < y.data().size(); ++i)
        CHECK(std::abs(y.data()[i] - y2.data()[i]) < 1e-12);
}

TEST_CASE("softmax_rows jacobian matches finite differences") {
    Rng rng(12);
    auto x = rand_tensor(rng, {5}, true, -2, 2);
    for (int row = 0; row < 5; ++row) {
        x.zero_grad();
        auto pick = [&] {
            auto y = softmax_rows(x);
            return slice(y, 0, row, 1);
        };
        backward(sum(pick()));
        auto f = [&] { return loss_value(sum(pick())); };
        CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-6)) < 1e-6);
    }
}

TEST_CASE("conv2d_pointwise identity kernel") {
    Rng rng(13);
    auto x = rand_tensor(rng, {1, 3, 2, 2});
    auto w = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w.data()[c * 3 + c] = 1.0;
    auto y = conv2d_pointwise(x, w, Tensor::zeros({3}));
    CHECK(y.data() == x.data());
}

TEST_CASE("conv2d_pointwise degenerate spatial equals matmul") {
    Rng rng(14);
    auto x = rand_tensor(rng, {2, 3, 1, 1});
    auto w = rand_tensor(rng, {4, 3, 1, 1});
    auto y = conv2d_pointwise(x, w);

    auto xm = reshape(x, {2, 3});
    auto wm = reshape(w, {4, 3});
    auto ref = matmul(xm, permute(wm, {1, 0}));
    for (int i = 0; i < 8; ++i)
        CHECK(y.data()[i] == Catch::Approx(ref.data()[i]).margin(1e-12));
}

TEST_CASE("conv2d_pointwise equals per-pixel matmul loop") {
    Rng rng(15);
    int B = 2, cin = 3, cout = 5, H = 4, W = 4;
    auto x = rand_tensor(rng, {B, cin, H, W}, true);
    auto w = rand_tensor(rng, {cout, cin, 1, 1}, true);
    auto bias = rand_tensor(rng, {cout}, true);
    auto y = conv2d_pointwise(x, w, bias);

    double max_diff = 0;
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < cout; ++co)
            for (int p = 0; p < H * W; ++p) {
                double acc = 0;
                for (int ci = 0; ci < cin; ++ci)
                    acc += w.data()[co * cin + ci] * x.data()[(bi * cin + ci) * H * W + p];
                acc += bias.data()[co];
                max_diff = std::max(max_diff,
                                    std::abs(acc - y.data()[(bi * cout + co) * H * W + p]));
            }
    CHECK(max_diff < 1e-12);

    backward(sum(y));
    auto f = [&] { return loss_value(sum(conv2d_pointwise(x, w, bias))); };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-5)) < 1e-6);
    CHECK(max_rel_err(w.grad(), finite_diff_grad(f, w, 1e-5)) < 1e-6);
    CHECK(max_rel_err(bias.grad(), finite_diff_grad(f, bias, 1e-5)) < 1e-6);
}

TEST_CASE("conv2d_depthwise delta kernel is identity") {
    Rng rng(16);
    auto x = rand_tensor(rng, {1, 2, 4, 4});
    auto w = Tensor::zeros({2, 1, 3, 3});
    w.data()[4] = 1.0;
    w.data()[9 + 4] = 1.0;
    auto y = conv2d_depthwise(x, w, Tensor::zeros({2}), 1);
    for (size_t i = 0; i < x.data().size(); ++i)
        CHECK(y.data()[i] == Catch::Approx(x.data()[i]).margin(1e-15));
}

TEST_CASE("conv2d_depthwise box sum with zero padding") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d_depthwise(x, w, std::nullopt, 1);
    CHECK(y.data() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
}

TEST_CASE("conv2d_depthwise even kernel rejected") {
    auto x = Tensor::zeros({1, 1, 4, 4});
    auto w = Tensor::zeros({1, 1, 2, 2});
    REQUIRE_THROWS_WITH(conv2d_depthwise(x, w, std::nullopt, 0),
                        Catch::Matchers::ContainsSubstring("even kernel"));
}

TEST_CASE("conv2d_depthwise matches naive loop oracle and finite differences") {
    Rng rng(17);
    int C = 2, H = 5, W = 5, k = 3, pad = 1;
    auto x = rand_tensor(rng, {1, C, H, W}, true);
    auto w = rand_tensor(rng, {C, 1, k, k}, true);
    auto bias = rand_tensor(rng, {C}, true);
    auto y = conv2d_depthwise(x, w, bias, pad);

    double max_diff = 0;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double acc = bias.data()[c];
                for (int u = 0; u < k; ++u)
                    for (int v = 0; v < k; ++v) {
                        int yy = i + u - pad, xx = j + v - pad;
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                        acc += w.data()[(c * k + u) * k + v] * x.data()[(c * H + yy) * W + xx];
                    }
                max_diff = std::max(max_diff, std::abs(acc - y.data()[(c * H + i) * W + j]));
            }
    CHECK(max_diff < 1e-12);

    backward(sum(y));
    auto f = [&] { return loss_value(sum(conv2d_depthwise(x, w, bias, pad))); };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-5)) < 1e-6);
    CHECK(max_rel_err(w.grad(), finite_diff_grad(f, w, 1e-5)) < 1e-6);
    CHECK(max_rel_err(bias.grad(), finite_diff_grad(f, bias, 1e-5)) < 1e-6);
}

TEST_CASE("layer_norm constant token and two-point standardization") {
    auto g = Tensor::full({3}, 1.0);
    auto b = Tensor::zeros({3});
    auto y = layer_norm(Tensor::from_data({1, 3}, {5, 5, 5}), g, b, 1e-6);
    for (double v : y.data()) CHECK(v == 0.0);

    auto g2 = Tensor::full({2}, 1.0);
    auto b2 = Tensor::zeros({2});
    auto y2 = layer_norm(Tensor::from_data({1, 2}, {1, 3}), g2, b2, 1e-14);
    CHECK(y2.data()[0] == Catch::Approx(-1.0).margin(1e-6));
    CHECK(y2.data()[1] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("layer_norm statistics and gradient") {
    Rng rng(18);
    int R = 4, d = 8;
    auto x = rand_tensor(rng, {R, d}, true, -4, 4);
    auto gamma = Tensor::full({d}, 1.0, true);
    auto beta = Tensor::zeros({d}, true);
    auto y = layer_norm(x, gamma, beta, 1e-10);
    for (int r = 0; r < R; ++r) {
        double mu = 0, var = 0;
        for (int j = 0; j < d; ++j) mu += y.data()[r * d + j];
        mu /= d;
        for (int j = 0; j < d; ++j) var += (y.data()[r * d + j] - mu) * (y.data()[r * d + j] - mu);
        var /= d;
        CHECK(std::abs(mu) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
    auto probe = rand_tensor(rng, {R, d});
    backward(sum(mul(y, probe)));
    auto f = [&] {
        auto out = layer_norm(x, gamma, beta, 1e-10);
        return loss_value(sum(mul(out, probe)));
    };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-5)) < 1e-6);
    CHECK(max_rel_err(gamma.grad(), finite_diff_grad(f, gamma, 1e-5)) < 1e-6);
    CHECK(max_rel_err(beta.grad(), finite_diff_grad(f, beta, 1e-5)) < 1e-6);
}

TEST_CASE("batch_norm2d train-mode statistics") {
    Rng rng(19);
    int C = 3;
    auto x = rand_tensor(rng, {2, C, 4, 4}, false, -2, 2);
    auto gamma = Tensor::full({C}, 1.0);
    auto beta = Tensor::zeros({C});
    BatchNormState st(C);
    auto y = batch_norm2d(x, gamma, beta, st, Mode::Train, 0.1, 1e-5);
    for (int c = 0; c < C; ++c) {
        double mu = 0, var = 0;
        int n = 0;
        for (int bi = 0; bi < 2; ++bi)
            for (int p = 0; p < 16; ++p) {
                mu += y.data()[(bi * C + c) * 16 + p];
                ++n;
            }
        mu /= n;
        for (int bi = 0; bi < 2; ++bi)
            for (int p = 0; p < 16; ++p) {
                double v = y.data()[(bi * C + c) * 16 + p] - mu;
                var += v * v;
            }
        var /= n;
        CHECK(std::abs(mu) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-4);
        CHECK(st.running_mean[c] != 0.0);  // momentum update applied
    }
}

TEST_CASE("batch_norm2d zero scale gives beta") {
    Rng rng(20);
    auto x = rand_tensor(rng, {2, 2, 3, 3});
    auto gamma = Tensor::zeros({2});
    auto beta = Tensor::from_data({2}, {0.5, -1.5});
    BatchNormState st(2);
    auto y = batch_norm2d(x, gamma, beta, st, Mode::Train, 0.1, 1e-5);
    for (int bi = 0; bi < 2; ++bi)
        for (int c = 0; c < 2; ++c)
            for (int p = 0; p < 9; ++p)
                CHECK(y.data()[(bi * 2 + c) * 9 + p] == beta.data()[c]);
}

TEST_CASE("batch_norm2d eval before any update uses initialized state") {
    Rng rng(21);
    auto x = rand_tensor(rng, {1, 2, 2, 2});
    auto gamma = Tensor::full({2}, 1.0);
    auto beta = Tensor::zeros({2});
    BatchNormState st(2);
    auto y = batch_norm2d(x, gamma, beta, st, Mode::Eval, 0.1, 1e-5);
    for (size_t i = 0; i < x.data().size(); ++i)
        CHECK(y.data()[i] == Catch::Approx(x.data()[i] / std::sqrt(1.0 + 1e-5)).margin(1e-14));
}

TEST_CASE("batch_norm2d train-mode gradient vs finite differences") {
    Rng rng(22);
    int C = 3;
    auto x = rand_tensor(rng, {2, C, 4, 4}, true, -2, 2);
    auto gamma = rand_tensor(rng, {C}, true, 0.5, 1.5);
    auto beta = rand_tensor(rng, {C}, true, -0.5, 0.5);
    auto probe = rand_tensor(rng, {2, C, 4, 4});
    auto run = [&] {
        BatchNormState st(C);
        auto y = batch_norm2d(x, gamma, beta, st, Mode::Train, 0.1, 1e-5);
        return sum(mul(y, probe));
    };
    backward(run());
    auto f = [&] { return loss_value(run()); };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-5)) < 1e-5);
    CHECK(max_rel_err(gamma.grad(), finite_diff_grad(f, gamma, 1e-5)) < 1e-5);
    CHECK(max_rel_err(beta.grad(), finite_diff_grad(f, beta, 1e-5)) < 1e-5);
}

TEST_CASE("activation clamp values") {
    auto r = relu6(Tensor::from_data({3}, {-1, 3, 7}));
    CHECK(r.data() == std::vector<double>{0, 3, 6});

    auto h = hswish(Tensor::from_data({4}, {-3, 0, 3, 10}));
    CHECK(h.data()[0] == 0.0);
    CHECK(h.data()[1] == 0.0);
    CHECK(h.data()[2] == 3.0);
    CHECK(h.data()[3] == 10.0);
}

TEST_CASE("activation gradients away from kinks") {
    Rng rng(23);
    std::vector<double> vals(16);
    for (auto& v : vals) {
        do {
            v = -8 + 16 * rng.uniform();
        } while (std::abs(v) < 0.1 || std::abs(v - 6) < 0.1 || std::abs(v + 3) < 0.1 ||
                 std::abs(v - 3) < 0.1);
    }
    auto x = Tensor::from_data({16}, vals, true);

    for (auto* fn : {&relu6, &hswish, &sigmoid, &relu}) {
        x.zero_grad();
        backward(sum((*fn)(x)));
        auto f = [&] { return loss_value(sum((*fn)(x))); };
        CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-6)) < 1e-6);
    }
}

TEST_CASE("global_avg_pool") {
    auto c = Tensor::full({1, 2, 3, 3}, 2.5);
    auto y = global_avg_pool(c);
    CHECK(y.data() == std::vector<double>{2.5, 2.5});

    Rng rng(24);
    auto one = rand_tensor(rng, {2, 3, 1, 1});
    auto y1 = global_avg_pool(one);
    CHECK(y1.data() == one.data());

    auto x = rand_tensor(rng, {1, 2, 3, 3}, true);
    auto yp = global_avg_pool(x);
    for (int cix = 0; cix < 2; ++cix) {
        double m = 0;
        for (int p = 0; p < 9; ++p) m += x.data()[cix * 9 + p];
        m /= 9;
        CHECK(std::abs(yp.data()[cix] - m) < 1e-14);
    }
    backward(sum(yp));
    auto f = [&] { return loss_value(sum(global_avg_pool(x))); };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-6)) < 1e-6);
}

TEST_CASE("conv1d_channels identities and loop oracle") {
    Rng rng(25);
    auto s = rand_tensor(rng, {1, 6});
    CHECK(conv1d_channels(s, Tensor::from_data({1}, {1})).data() == s.data());
    CHECK(conv1d_channels(s, Tensor::from_data({3}, {0, 1, 0})).data() == s.data());

    auto w = rand_tensor(rng, {5}, true);
    auto sv = rand_tensor(rng, {1, 6}, true);
    auto y = conv1d_channels(sv, w);
    int pad = 2;
    for (int i = 0; i < 6; ++i) {
        double acc = 0;
        for (int j = 0; j < 5; ++j) {
            int src = i + j - pad;
            if (src >= 0 && src < 6) acc += w.data()[j] * sv.data()[src];
        }
        CHECK(std::abs(acc - y.data()[i]) < 1e-14);
    }
    backward(sum(y));
    auto f = [&] { return loss_value(sum(conv1d_channels(sv, w))); };
    CHECK(max_rel_err(w.grad(), finite_diff_grad(f, w, 1e-6)) < 1e-6);
    CHECK(max_rel_err(sv.grad(), finite_diff_grad(f, sv, 1e-6)) < 1e-6);

    REQUIRE_THROWS_WITH(conv1d_channels(s, Tensor::zeros({4})),
                        Catch::Matchers::ContainsSubstring("even kernel"));
}

TEST_CASE("cross_entropy_smoothed uniform logits") {
    auto logits = Tensor::zeros({1, 4});
    auto loss = cross_entropy_smoothed(logits, {2}, 0.0);
    CHECK(loss.item() == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("cross_entropy_smoothed floor behaviour") {
    // With no smoothing, confidently scaled one-hot logits drive the loss to 0.
    for (double k : {5.0, 20.0, 80.0}) {
        auto logits = Tensor::zeros({1, 4});
        logits.data()[1] = k;
        auto l = cross_entropy_smoothed(logits, {1}, 0.0);
        CHECK(l.item() < std::exp(-k) * 4 + 1e-12);
    }
    // With smoothing s the floor is the entropy of the smeared target,
    // attained when the softmax equals it.
    double s = 0.1;
    int n = 4;
    std::vector<double> logq(n);
    double floor = 0.0;
    for (int i = 0; i < n; ++i) {
        double q = s / n + (i == 1 ? 1.0 - s : 0.0);
        logq[i] = std::log(q);
        floor -= q * std::log(q);
    }
    auto at_q = cross_entropy_smoothed(Tensor::from_data({1, 4}, logq), {1}, s);
    CHECK(at_q.item() == Catch::Approx(floor).margin(1e-12));
}

TEST_CASE("cross_entropy_smoothed gradient and label validation") {
    Rng rng(26);
    auto logits = rand_tensor(rng, {2, 5}, true, -2, 2);
    std::vector<int> labels = {3, 0};
    backward(cross_entropy_smoothed(logits, labels, 0.1));
    auto f = [&] { return loss_value(cross_entropy_smoothed(logits, labels, 0.1)); };
    CHECK(max_rel_err(logits.grad(), finite_diff_grad(f, logits, 1e-6)) < 1e-6);

    REQUIRE_THROWS_WITH(cross_entropy_smoothed(logits, {5, 0}, 0.1),
                        Catch::Matchers::ContainsSubstring("label"));
}

TEST_CASE("backward basic identities") {
    Rng rng(27);
    auto x = rand_tensor(rng, {7}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    auto x2 = rand_tensor(rng, {7}, true);
    backward(sum(mul(x2, x2)));
    for (int i = 0; i < 7; ++i)
        CHECK(x2.grad()[i] == Catch::Approx(2 * x2.data()[i]).margin(1e-14));
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = Tensor::zeros({3}, true);
    REQUIRE_THROWS_WITH(backward(relu(x)), Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("backward accumulation is deterministic across runs") {
    auto run = [] {
        Rng rng(99);
        auto x = rand_tensor(rng, {3, 4}, true);
        auto w = rand_tensor(rng, {4, 4}, true);
        auto y = softmax_rows(matmul(relu6(matmul(x, w)), w));
        auto loss = sum(mul(y, y));
        backward(loss);
        auto out = x.grad();
        auto wg = w.grad();
        out.insert(out.end(), wg.begin(), wg.end());
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("finite_diff_grad sanity") {
    Rng rng(28);
    auto x = rand_tensor(rng, {5}, true);
    auto f_sum = [&] { return loss_value(sum(x)); };
    for (double g : finite_diff_grad(f_sum, x, 1e-5)) CHECK(g == Catch::Approx(1.0).margin(1e-9));

    auto x1 = Tensor::from_data({1}, {3.0}, true);
    auto f_sq = [&] { return x1.data()[0] * x1.data()[0]; };
    CHECK(finite_diff_grad(f_sq, x1, 1e-5)[0] == Catch::Approx(6.0).margin(1e-9));
}

TEST_CASE("structural ops round trip and differentiate") {
    Rng rng(29);
    auto x = rand_tensor(rng, {2, 3, 4}, true);

    auto back = permute(permute(x, {2, 0, 1}), {1, 2, 0});
    CHECK(back.data() == x.data());

    auto r = reshape(reshape(x, {6, 4}), {2, 3, 4});
    CHECK(r.data() == x.data());

    auto left = slice(x, 1, 0, 1);
    auto right = slice(x, 1, 1, 2);
    CHECK(concat(left, right, 1).data() == x.data());

    auto lossfn = [&] {
        auto p = permute(x, {1, 0, 2});
        auto s = slice(p, 0, 1, 2);
        auto c = concat(s, s, 2);
        return sum(mul(c, c));
    };
    backward(lossfn());
    auto f = [&] { return loss_value(lossfn()); };
    CHECK(max_rel_err(x.grad(), finite_diff_grad(f, x, 1e-5)) < 1e-6);
}

TEST_CASE("tile_batch sums gradients over repeats") {
    Rng rng(30);
    auto x = rand_tensor(rng, {1, 4}, true);
    auto t = tile_batch(x, 3);
    CHECK(t.shape() == Shape{3, 1, 4});
    backward(sum(t));
    for (double g : x.grad()) CHECK(g == 3.0);
}

TEST_CASE("attn_apply equals matmul and is permutation invariant") {
    Rng rng(31);
    auto a = rand_tensor(rng, {2, 3, 3}, true, 0, 1);
    auto v = rand_tensor(rng, {2, 3, 5}, true);
    auto y = attn_apply(a, v);
    auto ref = matmul(a, v);
    for (size_t i = 0; i < y.data().size(); ++i)
        CHECK(y.data()[i] == Catch::Approx(ref.data()[i]).margin(1e-12));

    backward(sum(mul(y, y)));
    auto f = [&] {
        auto out = attn_apply(a, v);
        return loss_value(sum(mul(out, out)));
    };
    CHECK(max_rel_err(a.grad(), finite_diff_grad(f, a, 1e-5)) < 1e-6);
    CHECK(max_rel_err(v.grad(), finite_diff_grad(f, v, 1e-5)) < 1e-6);
}

TEST_CASE("patchify layout and gradient") {
    // 1x1 patches on a 2x2 image enumerate pixels row major.
    auto x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto t = patchify(x, 1);
    CHECK(t.shape() == Shape{1, 4, 1});
    CHECK(t.data() == std::vector<double>{1, 2, 3, 4});

    Rng rng(32);
    auto img = rand_tensor(rng, {2, 3, 4, 4}, true);
    auto tok = patchify(img, 2);
    CHECK(tok.shape() == Shape{2, 4, 12});
    backward(sum(mul(tok, tok)));
    auto f = [&] {
        auto out = patchify(img, 2);
        return loss_value(sum(mul(out, out)));
    };
    CHECK(max_rel_err(img.grad(), finite_diff_grad(f, img, 1e-5)) < 1e-6);
}

TEST_CASE("rng streams are reproducible") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.uniform() == b.uniform());
        CHECK(a.normal() == b.normal());
        CHECK(a.uniform_int(0, 41) == b.uniform_int(0, 41));
    }
    Rng c(5);
    for (int i = 0; i < 1000; ++i) CHECK(std::abs(c.truncated_normal(0.02)) <= 0.04);
}
