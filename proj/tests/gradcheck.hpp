#pragma once

// Central finite-difference checks for the autodiff engine (64-bit).

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "l2s/random.hpp"
#include "l2s/tensor.hpp"

namespace l2s::testing {

using TensorD = Tensor<double>;

inline TensorD random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0, bool track = true) {
    std::vector<double> d(numel(s));
    for (double& x : d) x = rng.uniform(lo, hi);
    return TensorD(s, std::move(d), track);
}

/// Largest relative error between the analytic gradient of f w.r.t. each
/// input and central differences with step h. The error of one entry is
/// |a - n| / max(|a|, |n|, floor).
inline double gradcheck(const std::function<TensorD()>& f, std::vector<TensorD> inputs, double h = 1e-5,
                        double floor = 1e-6) {
    for (auto& t : inputs) t.clear_grad();
    TensorD out = f();
    backward(out);
    double worst = 0.0;
    for (auto& t : inputs) {
        const std::vector<double> analytic(t.grad().begin(), t.grad().end());
        auto data = t.data_mut();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            double fp, fm;
            {
                NoGradGuard g;
                data[i] = keep + h;
                fp = f().item();
                data[i] = keep - h;
                fm = f().item();
            }
            data[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
        t.clear_grad();
    }
    return worst;
}

/// Fixed random projection sum(r * x) so that vector-valued ops reduce to a scalar.
inline TensorD project(const TensorD& x, std::uint64_t seed) {
    Rng rng(seed);
    TensorD r = random_tensor(x.shape(), rng, -1.0, 1.0, false);
    return sum(mul(x, r));
}

}  // namespace l2s::testing
