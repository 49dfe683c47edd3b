#pragma once

// Central-finite-difference gradient oracle. Kept independent of the tape:
// it only re-runs the supplied forward function on perturbed inputs.

#include <cmath>
#include <vector>

#include "localvit/tensor.hpp"

namespace localvit {

// Gradient estimate (f(x+h e_i) - f(x-h e_i)) / 2h for a scalar-valued,
// deterministic f that reads x by reference.
template <typename F>
std::vector<double> finite_diff_grad(F&& f, Tensor& x, double h) {
    std::vector<double> g(static_cast<size_t>(x.size()));
    auto& data = x.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        double orig = data[i];
        data[i] = orig + h;
        double fp = f();
        data[i] = orig - h;
        double fm = f();
        data[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

// Block-level relative error: ||a-b||_inf / max(||a||_inf, ||b||_inf).
// Empty `a` is treated as all zeros (a gradient buffer never touched).
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> zeros;
    const std::vector<double>* pa = &a;
    if (a.empty() && !b.empty()) {
        zeros.assign(b.size(), 0.0);
        pa = &zeros;
    }
    check(pa->size() == b.size(), "max_rel_err: block sizes disagree");
    double diff = 0.0;
    for (size_t i = 0; i < b.size(); ++i) diff = std::max(diff, std::abs((*pa)[i] - b[i]));
    double scale = std::max({max_abs(*pa), max_abs(b), 1e-12});
    return diff / scale;
}

}  // namespace localvit
