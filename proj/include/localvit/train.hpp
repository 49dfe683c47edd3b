#pragma once

// Desk-scale training harness: a seeded synthetic classification task whose
// label depends on which local texture motif is planted (at a uniformly
// random position, so pooling alone cannot solve it), a decoupled-weight-
// decay Adam optimizer with a cosine schedule, and a finite-difference
// gradient check over every parameter block of a model.

#include <chrono>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "localvit/gradcheck.hpp"
#include "localvit/model.hpp"

namespace localvit {

// ---- synthetic task ---------------------------------------------------------

struct ToySpec {
    int image_size = 16;
    int num_classes = 4;
    int motif_size = 3;
    int train_per_class = 40;
    int eval_per_class = 10;
    double noise_std = 0.1;
    uint64_t seed = 7;

    void validate() const {
        check(image_size >= 1, "toy image_size must be positive");
        check(num_classes >= 2, "toy num_classes must be at least 2");
        check(motif_size >= 1 && motif_size <= image_size,
              "motif size " + std::to_string(motif_size) + " larger than image " +
                  std::to_string(image_size));
        check(train_per_class >= 1 && eval_per_class >= 1,
              "toy sample counts must be positive");
        check(noise_std >= 0.0, "toy noise_std must be non-negative");
    }
};

struct ToyDataset {
    Tensor images;            // [n, 3, H, W]
    std::vector<int> labels;  // n entries
    std::vector<int> motif_row, motif_col;  // where each motif was planted

    int size() const { return static_cast<int>(labels.size()); }
};

// One +-1 texture per class, 3 channels of motif_size x motif_size.
inline std::vector<std::vector<double>> toy_motifs(const ToySpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<std::vector<double>> motifs(spec.num_classes);
    for (auto& m : motifs) {
        m.resize(static_cast<size_t>(3) * spec.motif_size * spec.motif_size);
        for (auto& v : m) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    }
    return motifs;
}

namespace detail {

inline ToyDataset draw_toy_samples(const ToySpec& spec,
                                   const std::vector<std::vector<double>>& motifs,
                                   int per_class, Rng& rng) {
    int H = spec.image_size, k = spec.motif_size;
    int n = per_class * spec.num_classes;
    ToyDataset out;
    out.labels.reserve(n);
    std::vector<double> data(static_cast<size_t>(n) * 3 * H * H);
    int idx = 0;
    for (int c = 0; c < spec.num_classes; ++c)
        for (int s = 0; s < per_class; ++s, ++idx) {
            double* img = data.data() + static_cast<int64_t>(idx) * 3 * H * H;
            for (int64_t i = 0; i < static_cast<int64_t>(3) * H * H; ++i)
                img[i] = spec.noise_std * rng.normal();
            int ri = rng.uniform_int(0, H - k);
            int ci = rng.uniform_int(0, H - k);
            for (int ch = 0; ch < 3; ++ch)
                for (int di = 0; di < k; ++di)
                    for (int dj = 0; dj < k; ++dj)
                        img[(static_cast<int64_t>(ch) * H + ri + di) * H + ci + dj] +=
                            motifs[c][(ch * k + di) * k + dj];
            out.labels.push_back(c);
            out.motif_row.push_back(ri);
            out.motif_col.push_back(ci);
        }
    out.images = Tensor::from_data({n, 3, H, H}, std::move(data));
    return out;
}

}  // namespace detail

// Deterministic from the task seed; train then eval drawn from one stream.
inline std::pair<ToyDataset, ToyDataset> generate_toy_dataset(const ToySpec& spec) {
    spec.validate();
    auto motifs = toy_motifs(spec);
    Rng rng(spec.seed + 0x517cc1b727220a95ull);
    ToyDataset train = detail::draw_toy_samples(spec, motifs, spec.train_per_class, rng);
    ToyDataset eval = detail::draw_toy_samples(spec, motifs, spec.eval_per_class, rng);
    return {std::move(train), std::move(eval)};
}

inline Tensor gather_images(const ToyDataset& ds, const std::vector<int>& indices) {
    const Shape& s = ds.images.shape();
    int64_t stride = numel(Shape(s.begin() + 1, s.end()));
    Shape out_shape = s;
    out_shape[0] = static_cast<int>(indices.size());
    std::vector<double> data(static_cast<size_t>(stride) * indices.size());
    for (size_t i = 0; i < indices.size(); ++i)
        std::memcpy(data.data() + i * stride,
                    ds.images.data().data() + static_cast<int64_t>(indices[i]) * stride,
                    sizeof(double) * static_cast<size_t>(stride));
    return Tensor::from_data(std::move(out_shape), std::move(data));
}

// ---- optimizer -----------------------------------------------------------------

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    int epochs = 160;
    int batch_size = 32;
    double lr_floor = 1e-5;
    double label_smoothing = 0.1;

    void validate() const {
        check(lr >= 0.0, "lr must be non-negative, got " + std::to_string(lr));
        check(lr_floor <= lr, "lr_floor " + std::to_string(lr_floor) +
                                  " exceeds initial lr " + std::to_string(lr));
        check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1,
              "betas must lie in [0,1)");
        check(epochs >= 1, "epochs must be positive");
        check(batch_size >= 1, "batch_size must be positive");
        check(label_smoothing >= 0.0 && label_smoothing < 1.0,
              "label_smoothing must be in [0,1)");
    }
};

// Cosine decay from lr to lr_floor across the epoch range.
inline double cosine_lr(int epoch, const OptimizerConfig& cfg) {
    if (cfg.epochs == 1) return cfg.lr;
    double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
    return cfg.lr_floor +
           0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + std::cos(std::numbers::pi * t));
}

// Decoupled weight decay: with zero gradients a step shrinks parameters by
// exactly (1 - lr * weight_decay).
class AdamW {
public:
    AdamW(std::vector<NamedParam> params, const OptimizerConfig& cfg)
        : cfg_(cfg) {
        for (auto& p : params)
            slots_.push_back({p.tensor, std::vector<double>(p.tensor.size(), 0.0),
                              std::vector<double>(p.tensor.size(), 0.0)});
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            auto& value = s.param.data();
            const auto& grad = s.param.grad();
            for (int64_t i = 0; i < s.param.size(); ++i) {
                double g = grad.empty() ? 0.0 : grad[i];
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
                value[i] -= lr * cfg_.weight_decay * value[i];
                value[i] -= lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + cfg_.adam_eps);
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    OptimizerConfig cfg_;
    int64_t t_ = 0;
};

// ---- evaluation -----------------------------------------------------------------

inline int argmax_row(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;  // ties keep the lowest index
    return best;
}

inline double evaluate(Model& m, const ToyDataset& ds, int batch_size = 64) {
    check(ds.size() > 0, "evaluate: empty dataset");
    int correct = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
        int len = std::min(batch_size, ds.size() - start);
        std::vector<int> idx(len);
        for (int i = 0; i < len; ++i) idx[i] = start + i;
        Tensor logits = forward_classify(m, gather_images(ds, idx), Mode::Eval);
        int ncls = logits.dim(1);
        for (int i = 0; i < len; ++i)
            if (argmax_row(logits.data().data() + static_cast<int64_t>(i) * ncls, ncls) ==
                ds.labels[start + i])
                ++correct;
    }
    return static_cast<double>(correct) / ds.size();
}

// ---- training --------------------------------------------------------------------

struct TrainReport {
    std::vector<double> train_loss, train_acc, eval_acc;  // one entry per epoch
    uint64_t final_param_checksum = 0;
    double wall_seconds = 0.0;
    uint64_t seed = 0;
    bool aborted = false;
    std::string abort_reason;
};

inline uint64_t param_checksum(Model& m) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a over the raw parameter bits
    for (auto& p : named_params(m))
        for (double v : p.tensor.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 1099511628211ull;
            }
        }
    return h;
}

// Full-batch-deterministic loop: seeded shuffle, train-mode forward,
// smoothed cross-entropy, backward, AdamW update, cosine schedule per epoch.
inline TrainReport train(Model& m, const ToyDataset& train_set, const ToyDataset& eval_set,
                         const OptimizerConfig& opt, uint64_t shuffle_seed) {
    opt.validate();
    auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    report.seed = shuffle_seed;
    AdamW optimizer(named_params(m), opt);
    Rng rng(shuffle_seed);
    std::vector<int> order(train_set.size());
    for (int i = 0; i < train_set.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        double lr = cosine_lr(epoch, opt);
        rng.shuffle(order);
        double loss_sum = 0.0;
        int correct = 0;
        for (int start = 0; start < train_set.size(); start += opt.batch_size) {
            int len = std::min(opt.batch_size, train_set.size() - start);
            std::vector<int> idx(order.begin() + start, order.begin() + start + len);
            std::vector<int> labels(len);
            for (int i = 0; i < len; ++i) labels[i] = train_set.labels[idx[i]];

            Tensor logits = forward_classify(m, gather_images(train_set, idx), Mode::Train);
            Tensor loss = cross_entropy_smoothed(logits, labels, opt.label_smoothing);
            if (!std::isfinite(loss.item())) {
                report.aborted = true;
                report.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                                      "; first non-finite tensor: " + first_non_finite(loss);
                report.wall_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                        .count();
                return report;
            }
            optimizer.zero_grad();
            backward(loss);
            optimizer.step(lr);
            optimizer.zero_grad();

            loss_sum += loss.item() * len;
            int ncls = logits.dim(1);
            for (int i = 0; i < len; ++i)
                if (argmax_row(logits.data().data() + static_cast<int64_t>(i) * ncls,
                               ncls) == labels[i])
                    ++correct;
        }
        report.train_loss.push_back(loss_sum / train_set.size());
        report.train_acc.push_back(static_cast<double>(correct) / train_set.size());
        report.eval_acc.push_back(evaluate(m, eval_set));
    }
    report.final_param_checksum = param_checksum(m);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---- gradient check ----------------------------------------------------------------

struct GradCheckBlock {
    std::string name;
    double rel_err = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    double tolerance = 1e-4;
    bool all_pass = true;
    double max_rel_err = 0.0;
};

// Compares backward() against the central-difference oracle on the smoothed
// cross-entropy loss, block by block. `corrupt_block` deliberately damages
// one analytic gradient so the negative control has something to catch.
inline GradCheckReport grad_check(Model& m, const Tensor& images,
                                  const std::vector<int>& labels, double tolerance,
                                  const std::string& corrupt_block = "",
                                  double label_smoothing = 0.1) {
    GradCheckReport report;
    report.tolerance = tolerance;

    auto states = named_bn_states(m);
    std::vector<BatchNormState> saved;
    for (auto& s : states) saved.push_back(*s.state);
    auto run = [&] {
        Tensor loss =
            cross_entropy_smoothed(forward_classify(m, images, Mode::Train), labels,
                                   label_smoothing);
        for (size_t i = 0; i < states.size(); ++i) *states[i].state = saved[i];
        return loss;
    };

    auto params = named_params(m);
    for (auto& p : params) p.tensor.zero_grad();
    backward(run());

    auto f = [&] { return run().item(); };
    for (auto& p : params) {
        std::vector<double> analytic =
            p.tensor.grad().empty() ? std::vector<double>(p.tensor.size(), 0.0)
                                    : p.tensor.grad();
        if (p.name == corrupt_block)
            for (auto& g : analytic) g += 0.5 * (1.0 + std::abs(g));
        std::vector<double> fd = finite_diff_grad(f, p.tensor, 1e-5);
        GradCheckBlock block{p.name, max_rel_err(analytic, fd), false};
        block.pass = block.rel_err < tolerance;
        report.all_pass = report.all_pass && block.pass;
        report.max_rel_err = std::max(report.max_rel_err, block.rel_err);
        report.blocks.push_back(std::move(block));
    }
    return report;
}

}  // namespace localvit
