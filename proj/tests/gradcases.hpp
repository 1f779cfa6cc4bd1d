#pragma once

// Named finite-difference cases shared by the unit tests and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "l2s/losses.hpp"
#include "l2s/model.hpp"

namespace l2s::testing {

struct GradCase {
    std::string name;
    std::function<double(std::uint64_t seed)> error;  // max relative error for one seed
};

namespace detail {

inline TensorD random_binary(const Shape& s, Rng& rng) {
    std::vector<double> d(numel(s));
    for (double& x : d) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
    return TensorD(s, std::move(d));
}

inline double conv_case(std::uint64_t seed, bool three, bool bias) {
    Rng rng(seed);
    const Shape xs = three ? Shape{2, 2, 3, 4, 3} : Shape{2, 3, 5, 4};
    const Shape ks = three ? Shape{3, 2, 3, 3, 3} : Shape{2, 3, 3, 3};
    TensorD x = random_tensor(xs, rng), w = random_tensor(ks, rng);
    std::vector<TensorD> in{x, w};
    TensorD b;
    if (bias) {
        b = random_tensor({ks[0]}, rng);
        in.push_back(b);
    }
    return gradcheck([&] { return project(conv(x, w, b), seed); }, in);
}

inline double loss_case(std::uint64_t seed, int which) {
    Rng rng(seed);
    const Shape s{2, 1, 3, 4};
    TensorD p = random_tensor(s, rng, 0.05, 0.95);
    TensorD y = random_binary(s, rng);
    TensorD cue = random_tensor(s, rng, 0.0, 1.0, false);
    TensorD w = cue_weights(cue);
    LossConfig cfg;
    std::function<TensorD()> f;
    switch (which) {
        case 0: f = [&] { return bce(p, y); }; break;
        case 1: f = [&] { return bce(p, y, w); }; break;
        case 2: f = [&] { return dice_loss(p, y); }; break;
        case 3: f = [&] { return dice_loss(p, y, w); }; break;
        case 4: f = [&] { return phase1_loss(p, y, cfg); }; break;
        default: f = [&] { return phase2_loss(p, y, cue, cfg); }; break;
    }
    return gradcheck(f, {p});
}

inline double unet_case(std::uint64_t seed, bool three) {
    UNetConfig cfg = three ? UNetConfig{3, 2, 2, {2, 3}, NormKind::layer} : UNetConfig{2, 1, 2, {2, 3}, NormKind::batch};
    Model<double> m = build_unet<double>(cfg, seed);
    Rng rng(Rng::mix(seed, 99));
    for (auto& [name, t] : m.params()) {
        if (t.rank() == 1) {
            for (double& v : t.data_mut()) v = rng.uniform(0.5, 1.5) * (name.ends_with("gain") ? 1.0 : 0.2);
        }
    }
    const Shape xs = three ? Shape{1, 2, 4, 4, 2} : Shape{2, 1, 4, 6};
    TensorD x = random_tensor(xs, rng);
    std::vector<TensorD> in{x};
    for (auto& [_, t] : m.params()) in.push_back(t);
    return gradcheck([&] { return project(m.forward(x), seed); }, in);
}

}  // namespace detail

inline std::vector<GradCase> gradient_cases() {
    using namespace detail;
    std::vector<GradCase> c;
    c.push_back({"conv2d", [](std::uint64_t s) { return conv_case(s, false, false); }});
    c.push_back({"conv2d_bias", [](std::uint64_t s) { return conv_case(s, false, true); }});
    c.push_back({"conv3d_bias", [](std::uint64_t s) { return conv_case(s, true, true); }});
    c.push_back({"pool_max2d", [](std::uint64_t s) {
                     Rng rng(s);
                     TensorD x = random_tensor({2, 2, 4, 6}, rng);
                     return gradcheck([&] { return project(pool_max(x, 2), s); }, {x});
                 }});
    c.push_back({"pool_max3d", [](std::uint64_t s) {
                     Rng rng(s);
                     TensorD x = random_tensor({1, 2, 4, 4, 2}, rng);
                     return gradcheck([&] { return project(pool_max(x, 2), s); }, {x});
                 }});
    c.push_back({"upsample2d", [](std::uint64_t s) {
                     Rng rng(s);
                     TensorD x = random_tensor({1, 2, 3, 2}, rng);
                     return gradcheck([&] { return project(upsample_linear(x, 2), s); }, {x});
                 }});
    c.push_back({"upsample3d", [](std::uint64_t s) {
                     Rng rng(s);
                     TensorD x = random_tensor({1, 1, 2, 3, 2}, rng);
                     return gradcheck([&] { return project(upsample_linear(x, 3), s); }, {x});
                 }});
    for (NormKind kind : {NormKind::batch, NormKind::layer}) {
        c.push_back({kind == NormKind::batch ? "normalize_batch" : "normalize_layer", [kind](std::uint64_t s) {
                         Rng rng(s);
                         TensorD x = random_tensor({3, 2, 3, 2}, rng);
                         TensorD g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
                         return gradcheck([&] { return project(normalize(x, kind, g, b, 1e-5), s); }, {x, g, b});
                     }});
    }
    c.push_back({"sigmoid", [](std::uint64_t s) {
                     Rng rng(s);
                     TensorD x = random_tensor({7}, rng, -3.0, 3.0);
                     return gradcheck([&] { return project(sigmoid(x), s); }, {x});
                 }});
    const char* losses[] = {"bce", "bce_weighted", "dice_loss", "dice_loss_weighted", "phase1_loss", "phase2_loss"};
    for (int i = 0; i < 6; ++i) c.push_back({losses[i], [i](std::uint64_t s) { return loss_case(s, i); }});
    c.push_back({"unet2d", [](std::uint64_t s) { return unet_case(s, false); }});
    c.push_back({"unet3d", [](std::uint64_t s) { return unet_case(s, true); }});
    return c;
}

}  // namespace l2s::testing
