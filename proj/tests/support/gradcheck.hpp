#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dkn/rng.hpp"
#include "dkn/tensor.hpp"

namespace dkn::test {

// Central finite differences against the analytic gradient, in 64-bit.
// `forward` must evaluate the scalar loss from the current contents of the
// input vectors; inputs are perturbed in place with step h.
struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

inline double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

// Checks d(loss)/d(x[i]) for every i of one input tensor.
inline GradCheckResult finite_diff_check(std::vector<double>& x,
                                         const std::vector<double>& analytic,
                                         const std::function<double()>& forward,
                                         double h = 1e-4) {
    GradCheckResult r;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = forward();
        x[i] = orig - h;
        const double fm = forward();
        x[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double e = rel_err(analytic[i], num);
        if (e > r.max_rel_err) {
            r.max_rel_err = e;
            r.worst_analytic = analytic[i];
            r.worst_numeric = num;
        }
    }
    return r;
}

// Same, probing only `samples` random components (for parameter-heavy
// checks where full sweeps are too slow). Probes that straddle a relu/pool
// kink have no valid finite-difference oracle; they are detected by
// comparing secants at h and h/2 and re-sampled.
inline GradCheckResult finite_diff_check_sampled(std::vector<double>& x,
                                                 const std::vector<double>& analytic,
                                                 const std::function<double()>& forward,
                                                 Rng& rng, int samples, double h = 1e-4) {
    GradCheckResult r;
    auto secant = [&](std::size_t i, double step) {
        const double orig = x[i];
        x[i] = orig + step;
        const double fp = forward();
        x[i] = orig - step;
        const double fm = forward();
        x[i] = orig;
        return (fp - fm) / (2.0 * step);
    };
    int taken = 0, attempts = 0;
    while (taken < samples && attempts < samples * 4) {
        ++attempts;
        const std::size_t i =
            static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(x.size()) - 1));
        const double s1 = secant(i, h);
        const double s2 = secant(i, h / 2.0);
        if (rel_err(s1, s2) > 1e-5) continue;  // non-smooth point, no oracle
        ++taken;
        const double e = rel_err(analytic[i], s2);
        if (e > r.max_rel_err) {
            r.max_rel_err = e;
            r.worst_analytic = analytic[i];
            r.worst_numeric = s2;
        }
    }
    return r;
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape), 0.0);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Uniform values bounded away from zero, for kink-free relu/maxpool checks.
inline Tensor<double> random_tensor_nonzero(std::vector<int> shape, Rng& rng) {
    Tensor<double> t(std::move(shape), 0.0);
    for (auto& v : t.data) {
        const double m = rng.uniform(0.15, 1.0);
        v = rng.uniform(0.0, 1.0) < 0.5 ? -m : m;
    }
    return t;
}

}  // namespace dkn::test
