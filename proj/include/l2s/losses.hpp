#pragma once

// Segmentation losses on probability maps. Optional per-voxel weights w turn
// BCE into a weighted mean and put w inside both sums of the soft Dice.
// An absent weight tensor means w = 1, computed by the same arithmetic.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/tensor.hpp"

namespace l2s {

struct LossConfig {
    double lambda = 1.0;    // Dice weight in the phase-1 loss
    double eps_bce = 1e-7;  // probability clamp for the logs
    double eps_dice = 1.0;  // smoothing added to numerator and denominator
    bool dice_per_sample = true;  // false: one Dice over the whole batch

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigError("loss: lambda must be >= 0");
        if (!(eps_bce > 0.0 && eps_bce < 0.5)) throw ConfigError("loss: eps_bce must be in (0, 0.5)");
        if (!(eps_dice > 0.0)) throw ConfigError("loss: eps_dice must be > 0");
    }
};

namespace detail {
template <class T>
void check_loss_inputs(const char* op, const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& w) {
    if (p.shape() != y.shape()) {
        throw ShapeError(std::string(op) + ": prediction " + to_string(p.shape()) + " and target " +
                         to_string(y.shape()) + " differ");
    }
    if (w.defined() && w.shape() != p.shape()) {
        throw ShapeError(std::string(op) + ": weight " + to_string(w.shape()) + " does not match prediction " +
                         to_string(p.shape()));
    }
}
}  // namespace detail

/// mean_i -w_i [y_i log p_i + (1 - y_i) log(1 - p_i)], p clamped to [eps, 1 - eps].
template <class T>
Tensor<T> bce(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& w = {}, double eps = 1e-7) {
    detail::check_loss_inputs("bce", p, y, w);
    const std::size_t n = p.numel();
    const double lo = eps, hi = 1.0 - eps;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pi = std::clamp(static_cast<double>(p[i]), lo, hi);
        const double wi = w.defined() ? static_cast<double>(w[i]) : 1.0;
        const double yi = y[i];
        acc += -wi * (yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
    }
    const double value = acc / static_cast<double>(n);
    std::vector<T> wv;
    if (w.defined()) wv.assign(w.data().begin(), w.data().end());
    return make_result<T>(Shape{1}, {static_cast<T>(value)}, {p}, [y, wv = std::move(wv), lo, hi, n](TensorNode<T>& self) {
        auto& pp = *self.parents[0];
        auto& g = pp.grad_buffer();
        const double up = static_cast<double>(self.grad[0]) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double pi = pp.data[i];
            if (pi < lo || pi > hi) continue;  // clamped: flat
            const double wi = wv.empty() ? 1.0 : static_cast<double>(wv[i]);
            const double yi = y[i];
            g[i] += static_cast<T>(up * -wi * (yi / pi - (1.0 - yi) / (1.0 - pi)));
        }
    }, "bce");
}

/// Soft Dice loss 1 - (2 sum w p y + eps) / (sum w (p + y) + eps). With
/// `per_sample` it is computed per sample (leading axis of a rank >= 2
/// tensor) and averaged over the batch; otherwise the sums run over everything.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& w = {}, double eps = 1.0,
                    bool per_sample = true) {
    detail::check_loss_inputs("dice_loss", p, y, w);
    const std::size_t samples = (per_sample && p.rank() >= 2) ? p.dim(0) : 1;
    const std::size_t per = p.numel() / samples;
    std::vector<double> inter(samples, 0.0), denom(samples, 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t k = 0; k < per; ++k) {
            const std::size_t i = s * per + k;
            const double wi = w.defined() ? static_cast<double>(w[i]) : 1.0;
            inter[s] += wi * static_cast<double>(p[i]) * static_cast<double>(y[i]);
            denom[s] += wi * (static_cast<double>(p[i]) + static_cast<double>(y[i]));
        }
        total += 1.0 - (2.0 * inter[s] + eps) / (denom[s] + eps);
    }
    const double value = total / static_cast<double>(samples);
    std::vector<T> wv;
    if (w.defined()) wv.assign(w.data().begin(), w.data().end());
    return make_result<T>(Shape{1}, {static_cast<T>(value)}, {p},
                          [y, wv = std::move(wv), inter = std::move(inter), denom = std::move(denom), samples, per,
                           eps](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double up = static_cast<double>(self.grad[0]) / static_cast<double>(samples);
        for (std::size_t s = 0; s < samples; ++s) {
            const double num = 2.0 * inter[s] + eps;
            const double den = denom[s] + eps;
            for (std::size_t k = 0; k < per; ++k) {
                const std::size_t i = s * per + k;
                const double wi = wv.empty() ? 1.0 : static_cast<double>(wv[i]);
                // d/dp_i of -(num / den)
                const double d = -(2.0 * wi * static_cast<double>(y[i]) * den - num * wi) / (den * den);
                g[i] += static_cast<T>(up * d);
            }
        }
    }, "dice");
}

/// BCE + lambda * Dice.
template <class T>
Tensor<T> phase1_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg = {}) {
    return add(bce(p, y, Tensor<T>{}, cfg.eps_bce), scale(dice_loss(p, y, Tensor<T>{}, cfg.eps_dice, cfg.dice_per_sample), static_cast<T>(cfg.lambda)));
}

/// Voxel weights 1 + cue for the cue-weighted loss.
template <class T>
Tensor<T> cue_weights(const Tensor<T>& cue) {
    std::vector<T> w(cue.numel());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const T c = cue[i];
        if (!(c >= T(0) && c <= T(1))) throw ValueError("cue value outside [0,1]");
        w[i] = T(1) + c;
    }
    return Tensor<T>(cue.shape(), std::move(w));
}

/// Weighted BCE + weighted Dice with w_i = 1 + cue_i. `cfg.lambda` is not used.
template <class T>
Tensor<T> phase2_loss(const Tensor<T>& p, const Tensor<T>& y, const Tensor<T>& cue, const LossConfig& cfg = {}) {
    if (!cue.defined() || cue.shape() != p.shape()) {
        throw ShapeError("phase2_loss: cue " + (cue.defined() ? to_string(cue.shape()) : std::string("(undefined)")) +
                         " is not aligned with prediction " + to_string(p.shape()));
    }
    const Tensor<T> w = cue_weights(cue);
    return add(bce(p, y, w, cfg.eps_bce), scale(dice_loss(p, y, w, cfg.eps_dice, cfg.dice_per_sample), T(1)));
}

}  // namespace l2s
