#pragma once

// Deterministic n-dimensional tensor engine with reverse-mode gradients.
// Values are 64-bit floats throughout. Every operation executes eagerly and
// records an adjoint rule on the node it produces; backward() replays those
// rules in reverse topological order. Reductions over the token axis
// (softmax denominators, attention-weighted sums) accumulate in sorted order
// so their results are invariant under permutation of the addends.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace localvit {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// Accumulating in ascending value order makes the sum invariant under any
// permutation of the addends (equal values contribute identically).
inline double sorted_sum(std::vector<double>& buf) {
    std::sort(buf.begin(), buf.end());
    double acc = 0.0;
    for (double v : buf) acc += v;
    return acc;
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward() touches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backprop;  // accumulates into inputs' grad

    int64_t size() const { return static_cast<int64_t>(value.size()); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value.assign(numel(shape), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false) {
        check(numel(shape) == static_cast<int64_t>(data.size()),
              "from_data: shape " + shape_str(shape) + " does not hold " +
                  std::to_string(data.size()) + " values");
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return node_->size(); }
    int dim(int i) const { return node_->shape[i]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& grad() { return node_->grad; }
    const std::vector<double>& grad() const { return node_->grad; }

    double item() const {
        check(size() == 1, "item: tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    const NodePtr& node() const { return node_; }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    }

private:
    NodePtr node_;
};

inline Tensor make_op(const char* op, Shape shape, std::vector<NodePtr> inputs,
                      std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value.assign(numel(shape), 0.0);
    n->shape = std::move(shape);
    n->op = op;
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
    n->inputs = std::move(inputs);
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Tensor(n);
}

// Ordered record of the gradient-carrying operations reachable from a root,
// in an order compatible with forward execution (inputs precede outputs).
class Tape {
public:
    explicit Tape(const Tensor& root) {
        std::unordered_map<Node*, char> state;  // 1 = on stack, 2 = done
        std::vector<std::pair<Node*, size_t>> stack;
        Node* r = root.node().get();
        if (!r->requires_grad) return;
        stack.push_back({r, 0});
        state[r] = 1;
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            bool descended = false;
            while (next < n->inputs.size()) {
                Node* in = n->inputs[next++].get();
                if (!in->requires_grad) continue;
                auto it = state.find(in);
                if (it == state.end()) {
                    state[in] = 1;
                    stack.push_back({in, 0});
                    descended = true;
                    break;
                }
            }
            if (descended) continue;
            entries_.push_back(n);
            state[n] = 2;
            stack.pop_back();
        }
    }

    const std::vector<Node*>& entries() const { return entries_; }

private:
    std::vector<Node*> entries_;
};

// Populates grad buffers of every requires_grad tensor reachable from the
// scalar loss. Accumulates into already-allocated leaf grads.
inline void backward(const Tensor& loss) {
    check(loss.size() == 1,
          "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    check(loss.requires_grad(), "backward: loss does not require gradients");
    Tape tape(loss);
    for (Node* n : tape.entries())
        if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
    loss.node()->grad[0] += 1.0;
    const auto& order = tape.entries();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Name of the first op (in forward order) under `root` holding a non-finite
// value; empty string when everything is finite.
inline std::string first_non_finite(const Tensor& root) {
    Tape tape(root);
    for (Node* n : tape.entries())
        if (!all_finite(n->value)) return std::string(n->op) + " " + shape_str(n->shape);
    if (!all_finite(root.node()->value))
        return std::string(root.node()->op) + " " + shape_str(root.shape());
    return "";
}

// ---- deterministic random numbers ----------------------------------------
//
// mt19937_64 plus explicit bit-level conversions; none of the
// implementation-defined <random> distributions are used, so streams are
// reproducible across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    // Normal with rejection outside +/- clip standard deviations.
    double truncated_normal(double stddev, double clip = 2.0) {
        for (;;) {
            double z = normal();
            if (std::abs(z) <= clip) return z * stddev;
        }
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds, unbiased
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int>(v % range);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1))]);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---- gemm kernels ---------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<int64_t>(i) * k;
        double* crow = c + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<int64_t>(i) * k;
        double* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<int64_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<int64_t>(p) * m;
        const double* brow = b + static_cast<int64_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            double av = arow[i];
            double* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

}  // namespace detail

// ---- primitive operations -------------------------------------------------

// Batched matrix product. Leading (batch) dimensions must match exactly, or
// `b` may be rank-2 and is then broadcast across a's batch dimensions.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sa.size() >= 2 && sb.size() >= 2,
          "matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " +
              shape_str(sb));
    int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    int k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
    check(k == k2, "matmul: inner dimensions disagree between " + shape_str(sa) +
                       " and " + shape_str(sb));
    Shape batch(sa.begin(), sa.end() - 2);
    bool bcast = sb.size() == 2 && sa.size() > 2;
    if (!bcast)
        check(Shape(sb.begin(), sb.end() - 2) == batch,
              "matmul: batch dimensions disagree between " + shape_str(sa) + " and " +
                  shape_str(sb));
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    int64_t nb = numel(batch);

    Tensor out = make_op("matmul", out_shape, {a.node(), b.node()}, [=](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        const auto& dy = self.grad;
        if (self.inputs[0]->requires_grad) {
            auto& da = self.inputs[0]->grad;
            for (int64_t bi = 0; bi < nb; ++bi)
                detail::gemm_nt(m, k, n, dy.data() + bi * m * n,
                                bv.data() + (bcast ? 0 : bi * k * n), da.data() + bi * m * k);
        }
        if (self.inputs[1]->requires_grad) {
            auto& db = self.inputs[1]->grad;
            for (int64_t bi = 0; bi < nb; ++bi)
                detail::gemm_tn(k, n, m, av.data() + bi * m * k, dy.data() + bi * m * n,
                                db.data() + (bcast ? 0 : bi * k * n));
        }
    });
    for (int64_t bi = 0; bi < nb; ++bi)
        detail::gemm_nn(m, n, k, a.data().data() + bi * m * k,
                        b.data().data() + (bcast ? 0 : bi * k * n),
                        out.data().data() + bi * m * n);
    return out;
}

// Row-wise softmax over the last dimension, stabilized by row-max
// subtraction. The denominator is a sorted sum, so each output row is
// invariant under permutation of its entries.
inline Tensor softmax_rows(const Tensor& x) {
    const Shape& s = x.shape();
    check(!s.empty(), "softmax_rows: rank-0 input");
    int d = s.back();
    int64_t rows = numel(s) / d;

    Tensor out = make_op("softmax_rows", s, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        const auto& y = self.value;
        const auto& dy = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = y.data() + r * d;
            const double* gr = dy.data() + r * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
            double* dxr = dx.data() + r * d;
            for (int j = 0; j < d; ++j) dxr[j] += yr[j] * (gr[j] - dot);
        }
    });
    std::vector<double> buf(d);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double* yr = out.data().data() + r * d;
        double mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        for (int j = 0; j < d; ++j) buf[j] = std::exp(xr[j] - mx);
        std::vector<double> sorted = buf;
        double denom = sorted_sum(sorted);
        for (int j = 0; j < d; ++j) yr[j] = buf[j] / denom;
    }
    return out;
}

// 1x1 convolution: a per-pixel linear map across channels.
inline Tensor conv2d_pointwise(const Tensor& x, const Tensor& w,
                               std::optional<Tensor> bias = std::nullopt) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    check(sx.size() == 4, "conv2d_pointwise: input must be [b,c,h,w], got " + shape_str(sx));
    check(sw.size() == 4 && sw[2] == 1 && sw[3] == 1,
          "conv2d_pointwise: weight must be [c_out,c_in,1,1], got " + shape_str(sw));
    check(sw[1] == sx[1], "conv2d_pointwise: channel mismatch between input " +
                              shape_str(sx) + " and weight " + shape_str(sw));
    int B = sx[0], cin = sx[1], cout = sw[0];
    int64_t hw = static_cast<int64_t>(sx[2]) * sx[3];
    if (bias)
        check(bias->shape() == Shape{cout},
              "conv2d_pointwise: bias must be [" + std::to_string(cout) + "], got " +
                  shape_str(bias->shape()));

    std::vector<NodePtr> ins = {x.node(), w.node()};
    if (bias) ins.push_back(bias->node());
    Tensor out = make_op("conv2d_pointwise", {B, cout, sx[2], sx[3]}, std::move(ins),
                         [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& dy = self.grad;
        if (self.inputs[0]->requires_grad) {
            auto& dx = self.inputs[0]->grad;
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < cout; ++co) {
                    const double* dyp = dy.data() + (static_cast<int64_t>(bi) * cout + co) * hw;
                    for (int ci = 0; ci < cin; ++ci) {
                        double weight = wv[static_cast<int64_t>(co) * cin + ci];
                        double* dxp = dx.data() + (static_cast<int64_t>(bi) * cin + ci) * hw;
                        for (int64_t p = 0; p < hw; ++p) dxp[p] += weight * dyp[p];
                    }
                }
        }
        if (self.inputs[1]->requires_grad) {
            auto& dw = self.inputs[1]->grad;
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < cout; ++co) {
                    const double* dyp = dy.data() + (static_cast<int64_t>(bi) * cout + co) * hw;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* xp = xv.data() + (static_cast<int64_t>(bi) * cin + ci) * hw;
                        double s = 0.0;
                        for (int64_t p = 0; p < hw; ++p) s += xp[p] * dyp[p];
                        dw[static_cast<int64_t>(co) * cin + ci] += s;
                    }
                }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad;
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < cout; ++co) {
                    const double* dyp = dy.data() + (static_cast<int64_t>(bi) * cout + co) * hw;
                    double s = 0.0;
                    for (int64_t p = 0; p < hw; ++p) s += dyp[p];
                    db[co] += s;
                }
        }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < cout; ++co) {
            double* op = out.data().data() + (static_cast<int64_t>(bi) * cout + co) * hw;
            for (int ci = 0; ci < cin; ++ci) {
                double weight = w.data()[static_cast<int64_t>(co) * cin + ci];
                const double* xp = x.data().data() + (static_cast<int64_t>(bi) * cin + ci) * hw;
                for (int64_t p = 0; p < hw; ++p) op[p] += weight * xp[p];
            }
            if (bias) {
                double bv = bias->data()[co];
                for (int64_t p = 0; p < hw; ++p) op[p] += bv;
            }
        }
    return out;
}

// Depth-wise k x k correlation, one kernel per channel, zero padding
// (k-1)/2 so the spatial extent is preserved.
inline Tensor conv2d_depthwise(const Tensor& x, const Tensor& w,
                               std::optional<Tensor> bias, int padding) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    check(sx.size() == 4, "conv2d_depthwise: input must be [b,c,h,w], got " + shape_str(sx));
    check(sw.size() == 4 && sw[1] == 1 && sw[2] == sw[3],
          "conv2d_depthwise: weight must be [c,1,k,k], got " + shape_str(sw));
    check(sw[0] == sx[1], "conv2d_depthwise: channel mismatch between input " +
                              shape_str(sx) + " and weight " + shape_str(sw));
    int k = sw[2];
    check(k % 2 == 1, "conv2d_depthwise: even kernel size " + std::to_string(k) + " rejected");
    check(padding == (k - 1) / 2, "conv2d_depthwise: padding must be (k-1)/2 = " +
                                      std::to_string((k - 1) / 2) + ", got " +
                                      std::to_string(padding));
    int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    if (bias)
        check(bias->shape() == Shape{C},
              "conv2d_depthwise: bias must be [" + std::to_string(C) + "], got " +
                  shape_str(bias->shape()));

    std::vector<NodePtr> ins = {x.node(), w.node()};
    if (bias) ins.push_back(bias->node());
    Tensor out = make_op("conv2d_depthwise", sx, std::move(ins), [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& dy = self.grad;
        bool need_dx = self.inputs[0]->requires_grad;
        bool need_dw = self.inputs[1]->requires_grad;
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                int64_t plane = (static_cast<int64_t>(bi) * C + c) * H * W;
                const double* wk = wv.data() + static_cast<int64_t>(c) * k * k;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        double g = dy[plane + static_cast<int64_t>(i) * W + j];
                        for (int u = 0; u < k; ++u) {
                            int y = i + u - padding;
                            if (y < 0 || y >= H) continue;
                            for (int v = 0; v < k; ++v) {
                                int xcol = j + v - padding;
                                if (xcol < 0 || xcol >= W) continue;
                                int64_t xi = plane + static_cast<int64_t>(y) * W + xcol;
                                if (need_dx)
                                    self.inputs[0]->grad[xi] += wk[u * k + v] * g;
                                if (need_dw)
                                    self.inputs[1]->grad[static_cast<int64_t>(c) * k * k +
                                                         u * k + v] += xv[xi] * g;
                            }
                        }
                    }
            }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad;
            for (int bi = 0; bi < B; ++bi)
                for (int c = 0; c < C; ++c) {
                    const double* dyp = dy.data() + (static_cast<int64_t>(bi) * C + c) * H * W;
                    double s = 0.0;
                    for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p) s += dyp[p];
                    db[c] += s;
                }
        }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            int64_t plane = (static_cast<int64_t>(bi) * C + c) * H * W;
            const double* wk = w.data().data() + static_cast<int64_t>(c) * k * k;
            double bv = bias ? bias->data()[c] : 0.0;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = 0.0;
                    for (int u = 0; u < k; ++u) {
                        int y = i + u - padding;
                        if (y < 0 || y >= H) continue;
                        for (int v = 0; v < k; ++v) {
                            int xcol = j + v - padding;
                            if (xcol < 0 || xcol >= W) continue;
                            acc += wk[u * k + v] *
                                   x.data()[plane + static_cast<int64_t>(y) * W + xcol];
                        }
                    }
                    out.data()[plane + static_cast<int64_t>(i) * W + j] = acc + bv;
                }
        }
    return out;
}

// Per-token normalization over the last dimension followed by an affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
    const Shape& s = x.shape();
    check(!s.empty(), "layer_norm: rank-0 input");
    int d = s.back();
    check(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
          "layer_norm: affine parameters must be [" + std::to_string(d) + "], got " +
              shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    int64_t rows = numel(s) / d;

    Tensor out = make_op("layer_norm", s, {x.node(), gamma.node(), beta.node()},
                         [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        const auto& dy = self.grad;
        std::vector<double> xhat(d);
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv.data() + r * d;
            const double* gr = dy.data() + r * d;
            double mu = 0.0;
            for (int j = 0; j < d; ++j) mu += xr[j];
            mu /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= d;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < d; ++j) xhat[j] = (xr[j] - mu) * inv;
            if (self.inputs[1]->requires_grad)
                for (int j = 0; j < d; ++j) self.inputs[1]->grad[j] += gr[j] * xhat[j];
            if (self.inputs[2]->requires_grad)
                for (int j = 0; j < d; ++j) self.inputs[2]->grad[j] += gr[j];
            if (self.inputs[0]->requires_grad) {
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < d; ++j) {
                    double dyh = gr[j] * gv[j];
                    m1 += dyh;
                    m2 += dyh * xhat[j];
                }
                m1 /= d;
                m2 /= d;
                double* dxr = self.inputs[0]->grad.data() + r * d;
                for (int j = 0; j < d; ++j)
                    dxr[j] += inv * (gr[j] * gv[j] - m1 - xhat[j] * m2);
            }
        }
    });
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double* yr = out.data().data() + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= d;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j)
            yr[j] = gamma.data()[j] * ((xr[j] - mu) * inv) + beta.data()[j];
    }
    return out;
}

enum class Mode { Train, Eval };

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    explicit BatchNormState(int channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Per-channel normalization over (batch, height, width). Train mode uses
// batch statistics, differentiates through them, and updates the running
// state (unbiased variance, as is conventional); eval mode uses the state.
inline Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           BatchNormState& state, Mode mode, double momentum,
                           double eps) {
    const Shape& s = x.shape();
    check(s.size() == 4, "batch_norm2d: input must be [b,c,h,w], got " + shape_str(s));
    int B = s[0], C = s[1], H = s[2], W = s[3];
    check(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "batch_norm2d: affine parameters must be [" + std::to_string(C) + "]");
    check(static_cast<int>(state.running_mean.size()) == C,
          "batch_norm2d: state holds " + std::to_string(state.running_mean.size()) +
              " channels, input has " + std::to_string(C));
    int64_t n = static_cast<int64_t>(B) * H * W;
    int64_t hw = static_cast<int64_t>(H) * W;

    std::vector<double> mu(C), inv(C);
    if (mode == Mode::Train) {
        check(n >= 2, "batch_norm2d: train mode needs b*h*w >= 2 per channel, got " +
                          std::to_string(n));
        for (int c = 0; c < C; ++c) {
            double m = 0.0;
            for (int bi = 0; bi < B; ++bi) {
                const double* xp = x.data().data() + (static_cast<int64_t>(bi) * C + c) * hw;
                for (int64_t p = 0; p < hw; ++p) m += xp[p];
            }
            m /= static_cast<double>(n);
            double var = 0.0;
            for (int bi = 0; bi < B; ++bi) {
                const double* xp = x.data().data() + (static_cast<int64_t>(bi) * C + c) * hw;
                for (int64_t p = 0; p < hw; ++p) var += (xp[p] - m) * (xp[p] - m);
            }
            var /= static_cast<double>(n);
            mu[c] = m;
            inv[c] = 1.0 / std::sqrt(var + eps);
            double unbiased = var * static_cast<double>(n) / static_cast<double>(n - 1);
            state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * m;
            state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mu[c] = state.running_mean[c];
            inv[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
        }
    }

    bool train = mode == Mode::Train;
    Tensor out = make_op("batch_norm2d", s, {x.node(), gamma.node(), beta.node()},
                         [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        const auto& dy = self.grad;
        for (int c = 0; c < C; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int bi = 0; bi < B; ++bi) {
                int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    double xhat = (xv[off + p] - mu[c]) * inv[c];
                    sum_dy += dy[off + p];
                    sum_dy_xhat += dy[off + p] * xhat;
                }
            }
            if (self.inputs[1]->requires_grad) self.inputs[1]->grad[c] += sum_dy_xhat;
            if (self.inputs[2]->requires_grad) self.inputs[2]->grad[c] += sum_dy;
            if (!self.inputs[0]->requires_grad) continue;
            auto& dx = self.inputs[0]->grad;
            if (train) {
                double nd = static_cast<double>(n);
                for (int bi = 0; bi < B; ++bi) {
                    int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
                    for (int64_t p = 0; p < hw; ++p) {
                        double xhat = (xv[off + p] - mu[c]) * inv[c];
                        dx[off + p] += gv[c] * inv[c] *
                                       (dy[off + p] - sum_dy / nd - xhat * sum_dy_xhat / nd);
                    }
                }
            } else {
                for (int bi = 0; bi < B; ++bi) {
                    int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
                    for (int64_t p = 0; p < hw; ++p)
                        dx[off + p] += gv[c] * inv[c] * dy[off + p];
                }
            }
        }
    });
    for (int c = 0; c < C; ++c) {
        double g = gamma.data()[c], b = beta.data()[c];
        for (int bi = 0; bi < B; ++bi) {
            int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
            for (int64_t p = 0; p < hw; ++p)
                out.data()[off + p] = g * ((x.data()[off + p] - mu[c]) * inv[c]) + b;
        }
    }
    return out;
}

// ---- elementwise activations ----------------------------------------------
// Subgradients at kinks take the left-continuous value.

inline Tensor relu(const Tensor& x) {
    Tensor out = make_op("relu", x.shape(), {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        const auto& xv = self.inputs[0]->value;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i)
            if (xv[i] > 0.0) dx[i] += self.grad[i];
    });
    for (int64_t i = 0; i < x.size(); ++i) out.data()[i] = std::max(x.data()[i], 0.0);
    return out;
}

inline Tensor relu6(const Tensor& x) {
    Tensor out = make_op("relu6", x.shape(), {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        const auto& xv = self.inputs[0]->value;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i)
            if (xv[i] > 0.0 && xv[i] <= 6.0) dx[i] += self.grad[i];
    });
    for (int64_t i = 0; i < x.size(); ++i)
        out.data()[i] = std::min(std::max(x.data()[i], 0.0), 6.0);
    return out;
}

// hswish(x) = x * relu6(x + 3) / 6
inline Tensor hswish(const Tensor& x) {
    Tensor out = make_op("hswish", x.shape(), {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        const auto& xv = self.inputs[0]->value;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i) {
            double v = xv[i];
            double slope = v <= -3.0 ? 0.0 : (v <= 3.0 ? (2.0 * v + 3.0) / 6.0 : 1.0);
            dx[i] += slope * self.grad[i];
        }
    });
    for (int64_t i = 0; i < x.size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = v * std::min(std::max(v + 3.0, 0.0), 6.0) / 6.0;
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out = make_op("sigmoid", x.shape(), {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i) {
            double y = self.value[i];
            dx[i] += y * (1.0 - y) * self.grad[i];
        }
    });
    for (int64_t i = 0; i < x.size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                 : std::exp(v) / (1.0 + std::exp(v));
    }
    return out;
}

// ---- pooling and channel mixing -------------------------------------------

inline Tensor global_avg_pool(const Tensor& x) {
    const Shape& s = x.shape();
    check(s.size() == 4, "global_avg_pool: input must be [b,c,h,w], got " + shape_str(s));
    int B = s[0], C = s[1];
    int64_t hw = static_cast<int64_t>(s[2]) * s[3];
    check(hw >= 1, "global_avg_pool: empty spatial extent");

    Tensor out = make_op("global_avg_pool", {B, C}, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                double g = self.grad[static_cast<int64_t>(bi) * C + c] / static_cast<double>(hw);
                double* dxp = dx.data() + (static_cast<int64_t>(bi) * C + c) * hw;
                for (int64_t p = 0; p < hw; ++p) dxp[p] += g;
            }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            const double* xp = x.data().data() + (static_cast<int64_t>(bi) * C + c) * hw;
            double s2 = 0.0;
            for (int64_t p = 0; p < hw; ++p) s2 += xp[p];
            out.data()[static_cast<int64_t>(bi) * C + c] = s2 / static_cast<double>(hw);
        }
    return out;
}

// 1D correlation along the channel axis with zero padding; no bias.
inline Tensor conv1d_channels(const Tensor& s, const Tensor& w) {
    const Shape& ss = s.shape();
    const Shape& sw = w.shape();
    check(ss.size() == 2, "conv1d_channels: input must be [b,c], got " + shape_str(ss));
    check(sw.size() == 1, "conv1d_channels: weight must be [k], got " + shape_str(sw));
    int k = sw[0];
    check(k % 2 == 1, "conv1d_channels: even kernel size " + std::to_string(k) + " rejected");
    int B = ss[0], C = ss[1];
    int pad = (k - 1) / 2;

    Tensor out = make_op("conv1d_channels", ss, {s.node(), w.node()}, [=](Node& self) {
        const auto& sv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        const auto& dy = self.grad;
        for (int bi = 0; bi < B; ++bi)
            for (int i = 0; i < C; ++i) {
                double g = dy[static_cast<int64_t>(bi) * C + i];
                for (int j = 0; j < k; ++j) {
                    int src = i + j - pad;
                    if (src < 0 || src >= C) continue;
                    if (self.inputs[0]->requires_grad)
                        self.inputs[0]->grad[static_cast<int64_t>(bi) * C + src] += wv[j] * g;
                    if (self.inputs[1]->requires_grad)
                        self.inputs[1]->grad[j] += sv[static_cast<int64_t>(bi) * C + src] * g;
                }
            }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int i = 0; i < C; ++i) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) {
                int src = i + j - pad;
                if (src >= 0 && src < C) acc += w.data()[j] * s.data()[static_cast<int64_t>(bi) * C + src];
            }
            out.data()[static_cast<int64_t>(bi) * C + i] = acc;
        }
    return out;
}

// ---- loss ------------------------------------------------------------------

// Mean over the batch of the label-smoothed cross entropy. The smoothing
// mass s is spread uniformly over all classes, the target keeps 1-s+s/n.
inline Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& labels,
                                     double smoothing) {
    const Shape& s = logits.shape();
    check(s.size() == 2, "cross_entropy_smoothed: logits must be [b,n_cls], got " +
                             shape_str(s));
    check(smoothing >= 0.0 && smoothing < 1.0,
          "cross_entropy_smoothed: smoothing must be in [0,1), got " +
              std::to_string(smoothing));
    int B = s[0], n = s[1];
    check(static_cast<int>(labels.size()) == B,
          "cross_entropy_smoothed: " + std::to_string(labels.size()) + " labels for batch " +
              std::to_string(B));
    for (int lb : labels)
        check(lb >= 0 && lb < n, "cross_entropy_smoothed: label " + std::to_string(lb) +
                                     " outside [0," + std::to_string(n) + ")");

    auto labels_copy = labels;
    Tensor out = make_op("cross_entropy_smoothed", {1}, {logits.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        const auto& lv = self.inputs[0]->value;
        auto& dl = self.inputs[0]->grad;
        double g = self.grad[0] / static_cast<double>(B);
        for (int r = 0; r < B; ++r) {
            const double* row = lv.data() + static_cast<int64_t>(r) * n;
            double mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
            for (int j = 0; j < n; ++j) {
                double p = std::exp(row[j] - mx) / denom;
                double q = smoothing / n + (j == labels_copy[r] ? 1.0 - smoothing : 0.0);
                dl[static_cast<int64_t>(r) * n + j] += g * (p - q);
            }
        }
    });
    double total = 0.0;
    for (int r = 0; r < B; ++r) {
        const double* row = logits.data().data() + static_cast<int64_t>(r) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        double lse = mx + std::log(denom);
        double qx = 0.0;
        for (int j = 0; j < n; ++j) qx += (smoothing / n) * row[j];
        qx += (1.0 - smoothing) * row[labels[r]];
        total += lse - qx;
    }
    out.data()[0] = total / static_cast<double>(B);
    return out;
}

// ---- structural ops ---------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add: shape mismatch between " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()));
    Tensor out = make_op("add", a.shape(), {a.node(), b.node()}, [](Node& self) {
        for (int s = 0; s < 2; ++s) {
            if (!self.inputs[s]->requires_grad) continue;
            auto& d = self.inputs[s]->grad;
            for (int64_t i = 0; i < self.size(); ++i) d[i] += self.grad[i];
        }
    });
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch between " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()));
    Tensor out = make_op("mul", a.shape(), {a.node(), b.node()}, [](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (self.inputs[0]->requires_grad)
            for (int64_t i = 0; i < self.size(); ++i)
                self.inputs[0]->grad[i] += bv[i] * self.grad[i];
        if (self.inputs[1]->requires_grad)
            for (int64_t i = 0; i < self.size(); ++i)
                self.inputs[1]->grad[i] += av[i] * self.grad[i];
    });
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

inline Tensor scale(const Tensor& x, double c) {
    Tensor out = make_op("scale", x.shape(), {x.node()}, [c](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i) dx[i] += c * self.grad[i];
    });
    for (int64_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i];
    return out;
}

// x[..., d] + v[d], the bias pattern of token-space linear layers.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    const Shape& s = x.shape();
    int d = s.back();
    check(v.shape() == Shape{d}, "add_rowvec: vector must be [" + std::to_string(d) +
                                     "], got " + shape_str(v.shape()));
    int64_t rows = numel(s) / d;
    Tensor out = make_op("add_rowvec", s, {x.node(), v.node()}, [=](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& dx = self.inputs[0]->grad;
            for (int64_t i = 0; i < self.size(); ++i) dx[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& dv = self.inputs[1]->grad;
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) dv[j] += self.grad[r * d + j];
        }
    });
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] + v.data()[j];
    return out;
}

// x[b, n, d] + p[n, d], broadcast over the batch dimension.
inline Tensor add_seq(const Tensor& x, const Tensor& p) {
    const Shape& s = x.shape();
    check(s.size() == 3, "add_seq: input must be [b,n,d], got " + shape_str(s));
    check(p.shape() == Shape{s[1], s[2]},
          "add_seq: table must be [" + std::to_string(s[1]) + "," + std::to_string(s[2]) +
              "], got " + shape_str(p.shape()));
    int B = s[0];
    int64_t nd = static_cast<int64_t>(s[1]) * s[2];
    Tensor out = make_op("add_seq", s, {x.node(), p.node()}, [=](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& dx = self.inputs[0]->grad;
            for (int64_t i = 0; i < self.size(); ++i) dx[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& dp = self.inputs[1]->grad;
            for (int bi = 0; bi < B; ++bi)
                for (int64_t i = 0; i < nd; ++i) dp[i] += self.grad[bi * nd + i];
        }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int64_t i = 0; i < nd; ++i)
            out.data()[bi * nd + i] = x.data()[bi * nd + i] + p.data()[i];
    return out;
}

// u[b, c, h, w] scaled per channel by s[b, c].
inline Tensor scale_channels(const Tensor& u, const Tensor& s) {
    const Shape& su = u.shape();
    check(su.size() == 4, "scale_channels: input must be [b,c,h,w], got " + shape_str(su));
    check(s.shape() == Shape{su[0], su[1]},
          "scale_channels: gate must be [" + std::to_string(su[0]) + "," +
              std::to_string(su[1]) + "], got " + shape_str(s.shape()));
    int B = su[0], C = su[1];
    int64_t hw = static_cast<int64_t>(su[2]) * su[3];
    Tensor out = make_op("scale_channels", su, {u.node(), s.node()}, [=](Node& self) {
        const auto& uv = self.inputs[0]->value;
        const auto& sv = self.inputs[1]->value;
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
                double g = sv[static_cast<int64_t>(bi) * C + c];
                if (self.inputs[0]->requires_grad) {
                    auto& du = self.inputs[0]->grad;
                    for (int64_t p = 0; p < hw; ++p) du[off + p] += g * self.grad[off + p];
                }
                if (self.inputs[1]->requires_grad) {
                    double acc = 0.0;
                    for (int64_t p = 0; p < hw; ++p) acc += uv[off + p] * self.grad[off + p];
                    self.inputs[1]->grad[static_cast<int64_t>(bi) * C + c] += acc;
                }
            }
    });
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            int64_t off = (static_cast<int64_t>(bi) * C + c) * hw;
            double g = s.data()[static_cast<int64_t>(bi) * C + c];
            for (int64_t p = 0; p < hw; ++p) out.data()[off + p] = g * u.data()[off + p];
        }
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    check(numel(shape) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                        " as " + shape_str(shape));
    Tensor out = make_op("reshape", std::move(shape), {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int64_t i = 0; i < self.size(); ++i) dx[i] += self.grad[i];
    });
    out.data() = x.data();
    return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const Shape& s = x.shape();
    check(perm.size() == s.size(), "permute: axis list length " +
                                       std::to_string(perm.size()) + " for rank " +
                                       std::to_string(s.size()));
    Shape out_shape(s.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[perm[i]];
    auto in_strides = detail::row_major_strides(s);
    std::vector<int64_t> gather(s.size());  // out axis i advances by in_strides[perm[i]]
    for (size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];

    Tensor out = make_op("permute", out_shape, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        int rank = static_cast<int>(self.shape.size());
        std::vector<int> idx(rank, 0);
        int64_t src = 0;
        for (int64_t i = 0; i < self.size(); ++i) {
            dx[src] += self.grad[i];
            for (int a = rank - 1; a >= 0; --a) {
                src += gather[a];
                if (++idx[a] < self.shape[a]) break;
                src -= gather[a] * self.shape[a];
                idx[a] = 0;
            }
        }
    });
    {
        int rank = static_cast<int>(out_shape.size());
        std::vector<int> idx(rank, 0);
        int64_t src = 0;
        for (int64_t i = 0; i < out.size(); ++i) {
            out.data()[i] = x.data()[src];
            for (int a = rank - 1; a >= 0; --a) {
                src += gather[a];
                if (++idx[a] < out_shape[a]) break;
                src -= gather[a] * out_shape[a];
                idx[a] = 0;
            }
        }
    }
    return out;
}

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
    const Shape& s = x.shape();
    check(axis >= 0 && axis < static_cast<int>(s.size()), "slice: bad axis");
    check(start >= 0 && len >= 1 && start + len <= s[axis],
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") outside axis of extent " + std::to_string(s[axis]));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    Shape out_shape = s;
    out_shape[axis] = len;
    int full = s[axis];

    Tensor out = make_op("slice", out_shape, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int64_t o = 0; o < outer; ++o)
            for (int a = 0; a < len; ++a) {
                const double* src = self.grad.data() + (o * len + a) * inner;
                double* dst = dx.data() + (o * full + start + a) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    for (int64_t o = 0; o < outer; ++o)
        for (int a = 0; a < len; ++a) {
            const double* src = x.data().data() + (o * full + start + a) * inner;
            double* dst = out.data().data() + (o * len + a) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] = src[i];
        }
    return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check(sa.size() == sb.size() && axis >= 0 && axis < static_cast<int>(sa.size()),
          "concat: rank mismatch between " + shape_str(sa) + " and " + shape_str(sb));
    for (size_t i = 0; i < sa.size(); ++i)
        check(static_cast<int>(i) == axis || sa[i] == sb[i],
              "concat: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                  " disagree off axis " + std::to_string(axis));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sa[i];
    for (size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
    int la = sa[axis], lb = sb[axis];
    Shape out_shape = sa;
    out_shape[axis] = la + lb;

    Tensor out = make_op("concat", out_shape, {a.node(), b.node()}, [=](Node& self) {
        for (int64_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + o * (la + lb) * inner;
            if (self.inputs[0]->requires_grad) {
                double* da = self.inputs[0]->grad.data() + o * la * inner;
                for (int64_t i = 0; i < la * inner; ++i) da[i] += g[i];
            }
            if (self.inputs[1]->requires_grad) {
                double* db = self.inputs[1]->grad.data() + o * lb * inner;
                for (int64_t i = 0; i < lb * inner; ++i) db[i] += g[la * inner + i];
            }
        }
    });
    for (int64_t o = 0; o < outer; ++o) {
        double* dst = out.data().data() + o * (la + lb) * inner;
        const double* pa = a.data().data() + o * la * inner;
        const double* pb = b.data().data() + o * lb * inner;
        for (int64_t i = 0; i < la * inner; ++i) dst[i] = pa[i];
        for (int64_t i = 0; i < lb * inner; ++i) dst[la * inner + i] = pb[i];
    }
    return out;
}

// Repeats x along a fresh leading batch dimension.
inline Tensor tile_batch(const Tensor& x, int b) {
    check(b >= 1, "tile_batch: batch must be positive");
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin(), b);
    int64_t n = x.size();
    Tensor out = make_op("tile_batch", out_shape, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int bi = 0; bi < b; ++bi)
            for (int64_t i = 0; i < n; ++i) dx[i] += self.grad[bi * n + i];
    });
    for (int bi = 0; bi < b; ++bi)
        for (int64_t i = 0; i < n; ++i) out.data()[bi * n + i] = x.data()[i];
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = make_op("sum", {1}, {x.node()}, [](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        double g = self.grad[0];
        for (int64_t i = 0; i < self.inputs[0]->size(); ++i) dx[i] += g;
    });
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// Attention-weighted sum out[.., i, c] = sum_j attn[.., i, j] * v[.., j, c].
// The j-reduction runs over tokens, so it is accumulated in sorted order to
// keep the result invariant under token permutation.
inline Tensor attn_apply(const Tensor& attn, const Tensor& v) {
    const Shape& sa = attn.shape();
    const Shape& sv = v.shape();
    check(sa.size() >= 2 && sv.size() == sa.size(),
          "attn_apply: rank mismatch between " + shape_str(sa) + " and " + shape_str(sv));
    int n = sa[sa.size() - 2], m = sa[sa.size() - 1];
    check(sv[sv.size() - 2] == m, "attn_apply: token counts disagree between " +
                                      shape_str(sa) + " and " + shape_str(sv));
    int dh = sv[sv.size() - 1];
    Shape batch(sa.begin(), sa.end() - 2);
    check(Shape(sv.begin(), sv.end() - 2) == batch,
          "attn_apply: batch dimensions disagree between " + shape_str(sa) + " and " +
              shape_str(sv));
    int64_t nb = numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(n);
    out_shape.push_back(dh);

    Tensor out = make_op("attn_apply", out_shape, {attn.node(), v.node()}, [=](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& vv = self.inputs[1]->value;
        const auto& dy = self.grad;
        for (int64_t bi = 0; bi < nb; ++bi) {
            const double* A = av.data() + bi * n * m;
            const double* V = vv.data() + bi * m * dh;
            const double* G = dy.data() + bi * n * dh;
            if (self.inputs[0]->requires_grad) {
                double* dA = self.inputs[0]->grad.data() + bi * n * m;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) {
                        double s = 0.0;
                        for (int c = 0; c < dh; ++c) s += G[i * dh + c] * V[j * dh + c];
                        dA[i * m + j] += s;
                    }
            }
            if (self.inputs[1]->requires_grad) {
                double* dV = self.inputs[1]->grad.data() + bi * m * dh;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) {
                        double a = A[i * m + j];
                        for (int c = 0; c < dh; ++c) dV[j * dh + c] += a * G[i * dh + c];
                    }
            }
        }
    });
    std::vector<double> buf(m);
    for (int64_t bi = 0; bi < nb; ++bi) {
        const double* A = attn.data().data() + bi * n * m;
        const double* V = v.data().data() + bi * m * dh;
        double* O = out.data().data() + bi * n * dh;
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < dh; ++c) {
                for (int j = 0; j < m; ++j) buf[j] = A[i * m + j] * V[j * dh + c];
                O[i * dh + c] = sorted_sum(buf);
            }
    }
    return out;
}

// [b, c, H, W] -> [b, N, c*p*p] with patches enumerated row major and
// features ordered (channel, row-in-patch, col-in-patch).
inline Tensor patchify(const Tensor& x, int p) {
    const Shape& s = x.shape();
    check(s.size() == 4, "patchify: input must be [b,c,h,w], got " + shape_str(s));
    check(p >= 1 && s[2] % p == 0 && s[3] % p == 0,
          "patchify: spatial extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
              " not divisible by patch size " + std::to_string(p));
    int B = s[0], C = s[1], H = s[2], W = s[3];
    int hp = H / p, wp = W / p, N = hp * wp, F = C * p * p;

    auto map_index = [=](int bi, int t, int f) {
        int c = f / (p * p), rem = f % (p * p), di = rem / p, dj = rem % p;
        int pi = t / wp, pj = t % wp;
        return ((static_cast<int64_t>(bi) * C + c) * H + pi * p + di) * W + pj * p + dj;
    };
    Tensor out = make_op("patchify", {B, N, F}, {x.node()}, [=](Node& self) {
        if (!self.inputs[0]->requires_grad) return;
        auto& dx = self.inputs[0]->grad;
        for (int bi = 0; bi < B; ++bi)
            for (int t = 0; t < N; ++t)
                for (int f = 0; f < F; ++f)
                    dx[map_index(bi, t, f)] +=
                        self.grad[(static_cast<int64_t>(bi) * N + t) * F + f];
    });
    for (int bi = 0; bi < B; ++bi)
        for (int t = 0; t < N; ++t)
            for (int f = 0; f < F; ++f)
                out.data()[(static_cast<int64_t>(bi) * N + t) * F + f] =
                    x.data()[map_index(bi, t, f)];
    return out;
}

}  // namespace localvit
