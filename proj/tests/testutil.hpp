#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

// Shared test helpers. The finite-difference oracle here is the independent
// reference for every gradient check; it never touches the tape machinery.

namespace abtest {

using ab::Dtype;
using ab::Rng;
using ab::Tensor;

inline Tensor rand_tensor(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                          Dtype dtype = Dtype::F64, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), dtype, requires_grad);
    for (size_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
    return t;
}

// Keeps values away from zero so relu kinks do not break finite differences.
inline Tensor rand_tensor_nonzero(std::vector<size_t> shape, Rng& rng, double margin = 0.1,
                                  Dtype dtype = Dtype::F64, bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), dtype, requires_grad);
    for (size_t i = 0; i < t.numel(); ++i) {
        double v = rng.uniform(-1.0, 1.0);
        v += v >= 0 ? margin : -margin;
        t.set(i, v);
    }
    return t;
}

// Central finite differences of a scalar-valued evaluation with respect to
// every coordinate of t. eval() must recompute the value from t's current
// contents (run it without an active tape).
inline std::vector<double> numeric_grad(Tensor& t, const std::function<double()>& eval,
                                        double h = 1e-5) {
    std::vector<double> g(t.numel());
    for (size_t i = 0; i < t.numel(); ++i) {
        const double orig = t.at(i);
        t.set(i, orig + h);
        const double fp = eval();
        t.set(i, orig - h);
        const double fm = eval();
        t.set(i, orig);
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Same but only for a sample of coordinates (used on full models where a
// complete sweep would be too slow).
inline std::vector<std::pair<size_t, double>> numeric_grad_sampled(
    Tensor& t, const std::function<double()>& eval, const std::vector<size_t>& indices,
    double h = 1e-5) {
    std::vector<std::pair<size_t, double>> g;
    g.reserve(indices.size());
    for (size_t i : indices) {
        const double orig = t.at(i);
        t.set(i, orig + h);
        const double fp = eval();
        t.set(i, orig - h);
        const double fm = eval();
        t.set(i, orig);
        g.emplace_back(i, (fp - fm) / (2.0 * h));
    }
    return g;
}

struct GradCheck {
    bool ok = true;
    double worst = 0.0;     // worst |a-n| - (atol + rtol*max(|a|,|n|)); <=0 means pass
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

inline GradCheck compare_grads(std::span<const double> analytic, std::span<const double> numeric,
                               double rtol = 1e-4, double atol = 1e-7) {
    GradCheck r;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double tol = atol + rtol * std::max(std::abs(a), std::abs(n));
        const double excess = std::abs(a - n) - tol;
        if (excess > r.worst) {
            r.worst = excess;
            r.worst_index = i;
            r.analytic = a;
            r.numeric = n;
            r.ok = false;
        }
    }
    return r;
}

inline std::vector<double> analytic_grad(const Tensor& t) {
    std::vector<double> g(t.numel());
    for (size_t i = 0; i < t.numel(); ++i) g[i] = t.grad_at(i);
    return g;
}

}  // namespace abtest
