#pragma once

// Two-phase training, location-cue inference, sliding-window 3D inference
// and the cue-gated threshold fusion.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/losses.hpp"
#include "l2s/model.hpp"
#include "l2s/random.hpp"
#include "l2s/tensor.hpp"
#include "l2s/volume.hpp"

namespace l2s {

/// Intensity windows mapping raw PET (SUV-like) and CT (HU) to [0,1].
struct PreprocessConfig {
    double pet_lo = 0.0, pet_hi = 15.0;
    double ct_lo = 100.0, ct_hi = 250.0;
    int axis = 1;  // slicing axis for the 2D phase

    void validate() const {
        if (!(pet_hi > pet_lo)) throw ConfigError("preprocess: pet_hi must exceed pet_lo");
        if (!(ct_hi > ct_lo)) throw ConfigError("preprocess: ct_hi must exceed ct_lo");
        if (axis < 0 || axis > 2) throw ConfigError("preprocess: axis must be 0, 1 or 2");
    }
};

struct Phase1Config {
    int epochs = 40;
    int steps_per_epoch = 8;
    std::array<std::size_t, 2> crop{64, 80};
    double lesion_fraction = 0.2;
    double flip_prob = 0.5;
    double rotation_deg_max = 15.0;
    int batch = 32;
    OptimConfig optimizer{1e-2, 40, 1e-4, 0.9};  // epochs field ignored; see schedule()
    LossConfig loss;
    UNetConfig model = UNetConfig::default_2d();
    double head_prior = 0.01;  // initial foreground probability of the output head
    std::uint64_t seed = 1;

    /// The optimizer with N taken from `epochs` (the schedule's horizon).
    OptimConfig schedule() const {
        OptimConfig o = optimizer;
        o.epochs = std::max(1, epochs);
        return o;
    }

    void validate() const {
        if (epochs < 0) throw ConfigError("phase1: epochs must be >= 0");
        if (steps_per_epoch < 1) throw ConfigError("phase1: steps_per_epoch must be >= 1");
        if (batch < 1) throw ConfigError("phase1: batch must be >= 1");
        if (crop[0] < 1 || crop[1] < 1) throw ConfigError("phase1: crop extents must be >= 1");
        if (!(lesion_fraction >= 0.0 && lesion_fraction <= 1.0)) {
            throw ConfigError("phase1: lesion_fraction must be in [0,1]");
        }
        if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("phase1: flip_prob must be in [0,1]");
        if (!(rotation_deg_max >= 0.0 && rotation_deg_max <= 180.0)) {
            throw ConfigError("phase1: rotation_deg_max must be in [0,180]");
        }
        if (!(head_prior > 0.0 && head_prior < 1.0)) throw ConfigError("phase1: head_prior must be in (0,1)");
        schedule().validate();
        loss.validate();
        model.validate();
        if (model.rank != 2 || model.in_channels != 1) throw ConfigError("phase1: model must be a 1-channel 2D U-Net");
        const std::size_t div = model.divisor();
        if (crop[0] % div != 0 || crop[1] % div != 0) {
            throw ConfigError("phase1: crop must be divisible by " + std::to_string(div));
        }
    }
};

struct Phase2Config {
    int epochs = 40;
    int steps_per_epoch = 8;
    Index3 patch{32, 48, 48};
    int batch = 2;
    OptimConfig optimizer{1e-2, 40, 1e-4, 0.9};  // epochs field ignored; see schedule()
    LossConfig loss;
    UNetConfig model = UNetConfig::default_3d();
    double lesion_patch_prob = 0.5;
    bool weighted = true;  // false: unweighted BCE + lambda * Dice (3D-only baseline)
    double head_prior = 0.01;  // initial foreground probability of the output head
    std::uint64_t seed = 2;

    /// The optimizer with N taken from `epochs` (the schedule's horizon).
    OptimConfig schedule() const {
        OptimConfig o = optimizer;
        o.epochs = std::max(1, epochs);
        return o;
    }

    void validate() const {
        if (epochs < 0) throw ConfigError("phase2: epochs must be >= 0");
        if (steps_per_epoch < 1) throw ConfigError("phase2: steps_per_epoch must be >= 1");
        if (batch < 1) throw ConfigError("phase2: batch must be >= 1");
        if (!(lesion_patch_prob >= 0.0 && lesion_patch_prob <= 1.0)) {
            throw ConfigError("phase2: lesion_patch_prob must be in [0,1]");
        }
        if (!(head_prior > 0.0 && head_prior < 1.0)) throw ConfigError("phase2: head_prior must be in (0,1)");
        schedule().validate();
        loss.validate();
        model.validate();
        if (model.rank != 3 || model.in_channels != 2) throw ConfigError("phase2: model must be a 2-channel 3D U-Net");
        const std::size_t div = model.divisor();
        for (std::size_t p : patch) {
            if (p < 1 || p % div != 0) throw ConfigError("phase2: patch extents must be divisible by " + std::to_string(div));
        }
    }
};

struct FusionConfig {
    double gate = 0.5;
    double low = 0.1;
    double high = 0.9;

    void validate() const {
        if (!(0.0 < low && low <= gate && gate <= high && high < 1.0)) {
            throw ConfigError("fusion: need 0 < low <= gate <= high < 1");
        }
    }
};

struct InferenceConfig {
    Index3 stride{0, 0, 0};  // 0 on an axis: half the patch
    int window_batch = 1;
    int slice_batch = 16;

    Index3 effective_stride(const Index3& patch) const {
        Index3 s{};
        for (int a = 0; a < 3; ++a) s[a] = stride[a] ? stride[a] : std::max<std::size_t>(1, patch[a] / 2);
        return s;
    }
    void validate() const {
        if (window_batch < 1 || slice_batch < 1) throw ConfigError("inference: batch sizes must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    Model<float> model;
    std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// ---------------------------------------------------------------------------
// Preprocessing

inline Volume window_pet(const Volume& pet, const PreprocessConfig& p) { return window_scale(pet, p.pet_lo, p.pet_hi); }
inline Volume window_ct(const Volume& ct, const PreprocessConfig& p) { return window_scale(ct, p.ct_lo, p.ct_hi); }

inline Volume label_or_empty(const Case& c) {
    if (c.label) return *c.label;
    return Volume(c.pet.shape, c.pet.spacing, Modality::MASK);
}

// ---------------------------------------------------------------------------
// Phase 1: 2D slices of windowed PET

struct SliceDataset {
    std::vector<Slice2D> images;
    std::vector<Slice2D> masks;
    std::vector<std::size_t> lesion_slices;  // indices whose mask has a positive voxel
};

inline SliceDataset make_slice_dataset(const std::vector<Case>& cases, const PreprocessConfig& pre) {
    SliceDataset ds;
    for (const Case& c : cases) {
        auto imgs = slice_stack(window_pet(c.pet, pre), pre.axis);
        auto masks = slice_stack(label_or_empty(c), pre.axis);
        for (std::size_t s = 0; s < imgs.size(); ++s) {
            if (std::any_of(masks[s].data.begin(), masks[s].data.end(), [](float v) { return v > 0.5f; })) {
                ds.lesion_slices.push_back(ds.images.size());
            }
            ds.images.push_back(std::move(imgs[s]));
            ds.masks.push_back(std::move(masks[s]));
        }
    }
    return ds;
}

/// Slice indices for one batch: round(batch * lesion_fraction) lesion slices
/// first, the rest uniform over all slices. Draws with replacement.
inline std::vector<std::size_t> sample_phase1_batch(const SliceDataset& ds, const Phase1Config& cfg, Rng& rng) {
    if (ds.images.empty()) throw ValueError("sample_phase1_batch: empty dataset");
    const auto n_lesion = static_cast<std::size_t>(std::lround(cfg.batch * cfg.lesion_fraction));
    if (n_lesion > 0 && ds.lesion_slices.empty()) {
        throw ValueError("sample_phase1_batch: lesion_fraction > 0 but the dataset has no lesion slices");
    }
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(cfg.batch));
    for (std::size_t i = 0; i < n_lesion; ++i) out.push_back(ds.lesion_slices[rng.index(ds.lesion_slices.size())]);
    while (out.size() < static_cast<std::size_t>(cfg.batch)) out.push_back(rng.index(ds.images.size()));
    return out;
}

/// Rotation about the slice centre by `deg` degrees (counter-clockwise in
/// (row, col) display). Samples outside the input read as 0.
inline Slice2D rotate_2d(const Slice2D& in, double deg, bool nearest) {
    Slice2D out{in.rows, in.cols, std::vector<float>(in.data.size(), 0.0f)};
    const double th = deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cr = (static_cast<double>(in.rows) - 1.0) / 2.0, cc = (static_cast<double>(in.cols) - 1.0) / 2.0;
    const auto R = static_cast<long>(in.rows), C = static_cast<long>(in.cols);
    auto px = [&](long r, long c) -> double {
        return (r < 0 || c < 0 || r >= R || c >= C) ? 0.0 : in.data[static_cast<std::size_t>(r * C + c)];
    };
    for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) {
            const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
            const double sr = cr + cs * dr + sn * dc;
            const double sc = cc - sn * dr + cs * dc;
            double v;
            if (nearest) {
                v = px(std::lround(sr), std::lround(sc));
            } else {
                const double fr = std::floor(sr), fc = std::floor(sc);
                const double ar = sr - fr, ac = sc - fc;
                const long r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
                v = (1 - ar) * ((1 - ac) * px(r0, c0) + ac * px(r0, c0 + 1)) +
                    ar * ((1 - ac) * px(r0 + 1, c0) + ac * px(r0 + 1, c0 + 1));
            }
            out.data[static_cast<std::size_t>(r * C + c)] = static_cast<float>(v);
        }
    return out;
}

inline Slice2D flip_horizontal(const Slice2D& in) {
    Slice2D out = in;
    for (std::size_t r = 0; r < in.rows; ++r) std::reverse(out.data.begin() + r * in.cols, out.data.begin() + (r + 1) * in.cols);
    return out;
}

/// Window of size (rows, cols) at `origin`; negative origins and overreach read as 0.
inline Slice2D crop_2d(const Slice2D& in, long r0, long c0, std::size_t rows, std::size_t cols) {
    Slice2D out{rows, cols, std::vector<float>(rows * cols, 0.0f)};
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const long sr = r0 + static_cast<long>(r), sc = c0 + static_cast<long>(c);
            if (sr < 0 || sc < 0 || sr >= static_cast<long>(in.rows) || sc >= static_cast<long>(in.cols)) continue;
            out.data[r * cols + c] = in.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
        }
    return out;
}

/// Same random crop, flip and rotation applied to image and mask. Draw order:
/// crop row, crop col (only on axes larger than the crop), flip, angle.
inline std::pair<Slice2D, Slice2D> augment_2d(const Slice2D& img, const Slice2D& mask, const Phase1Config& cfg, Rng& rng) {
    if (img.rows != mask.rows || img.cols != mask.cols) throw ShapeError("augment_2d: image and mask differ in shape");
    auto origin = [&](std::size_t extent, std::size_t want) -> long {
        if (extent > want) return static_cast<long>(rng.index(extent - want + 1));
        return -static_cast<long>((want - extent) / 2);
    };
    const long r0 = origin(img.rows, cfg.crop[0]);
    const long c0 = origin(img.cols, cfg.crop[1]);
    Slice2D a = crop_2d(img, r0, c0, cfg.crop[0], cfg.crop[1]);
    Slice2D b = crop_2d(mask, r0, c0, cfg.crop[0], cfg.crop[1]);
    if (rng.bernoulli(cfg.flip_prob)) {
        a = flip_horizontal(a);
        b = flip_horizontal(b);
    }
    const double deg = rng.uniform(-cfg.rotation_deg_max, cfg.rotation_deg_max);
    if (deg != 0.0) {
        a = rotate_2d(a, deg, false);
        b = rotate_2d(b, deg, true);
    }
    return {std::move(a), std::move(b)};
}

/// Sets the output bias to logit(prior), so training starts from a
/// near-empty prediction instead of 0.5 everywhere.
inline void init_head_prior(Model<float>& m, double prior) {
    m.params().at("head.bias").data_mut()[0] = static_cast<float>(std::log(prior / (1.0 - prior)));
}

namespace detail {

inline void check_finite_loss(double loss, int epoch, const char* phase) {
    if (!std::isfinite(loss)) {
        throw TrainingDiverged(std::string(phase) + ": loss became non-finite at epoch " + std::to_string(epoch), epoch);
    }
}

}  // namespace detail

/// Trains the 2D localization net on windowed PET slices.
inline TrainResult train_phase1(const std::vector<Case>& cases, const Phase1Config& cfg, const PreprocessConfig& pre = {},
                                const EpochCallback& on_epoch = {}) {
    cfg.validate();
    pre.validate();
    if (cases.empty()) throw ValueError("train_phase1: no cases");
    TrainResult res{build_unet<float>(cfg.model, Rng::mix(cfg.seed, 1)), {}};
    init_head_prior(res.model, cfg.head_prior);
    if (cfg.epochs == 0) return res;
    const SliceDataset ds = make_slice_dataset(cases, pre);
    Rng rng(Rng::mix(cfg.seed, 2));
    Model<float>& m = res.model;
    m.set_mode(Mode::train);
    SgdState<float> state;
    const std::size_t H = cfg.crop[0], W = cfg.crop[1], B = static_cast<std::size_t>(cfg.batch);
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        const double lr = lr_at_epoch(cfg.optimizer.alpha0, ep, cfg.epochs);
        double total = 0.0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            const auto idx = sample_phase1_batch(ds, cfg, rng);
            std::vector<float> x(B * H * W), y(B * H * W);
            for (std::size_t b = 0; b < B; ++b) {
                auto [img, mask] = augment_2d(ds.images[idx[b]], ds.masks[idx[b]], cfg, rng);
                std::copy(img.data.begin(), img.data.end(), x.begin() + b * H * W);
                std::copy(mask.data.begin(), mask.data.end(), y.begin() + b * H * W);
            }
            Tensor<float> xt({B, 1, H, W}, std::move(x));
            Tensor<float> yt({B, 1, H, W}, std::move(y));
            Tensor<float> loss = phase1_loss(m.forward(xt), yt, cfg.loss);
            const double lv = loss.item();
            detail::check_finite_loss(lv, ep, "phase1");
            backward(loss);
            sgd_update(m.params(), cfg.optimizer, lr, &state);
            total += lv;
        }
        res.history.push_back({ep, lr, total / cfg.steps_per_epoch});
        if (on_epoch) on_epoch(res.history.back());
    }
    m.set_mode(Mode::eval);
    return res;
}

/// Probability of every slice along `pre.axis`, stacked back into a cue volume.
inline LocationCue infer_cue(Model<float>& model, const Case& c, const PreprocessConfig& pre = {}, int slice_batch = 16) {
    pre.validate();
    if (model.config().rank != 2) throw ShapeError("infer_cue: model must be 2D");
    model.set_mode(Mode::eval);
    const auto slices = slice_stack(window_pet(c.pet, pre), pre.axis);
    const std::size_t div = model.config().divisor();
    const std::size_t rows = slices[0].rows, cols = slices[0].cols;
    const std::size_t PH = (rows + div - 1) / div * div, PW = (cols + div - 1) / div * div;
    std::vector<Slice2D> probs(slices.size());
    for (std::size_t s0 = 0; s0 < slices.size(); s0 += static_cast<std::size_t>(slice_batch)) {
        const std::size_t nb = std::min<std::size_t>(static_cast<std::size_t>(slice_batch), slices.size() - s0);
        std::vector<float> x(nb * PH * PW, 0.0f);
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t r = 0; r < rows; ++r)
                std::copy_n(&slices[s0 + b].data[r * cols], cols, &x[(b * PH + r) * PW]);
        Tensor<float> out;
        try {
            out = model.forward(Tensor<float>({nb, 1, PH, PW}, std::move(x)));
        } catch (const ShapeError& e) {
            throw ShapeError("infer_cue: slice " + std::to_string(s0) + ": " + e.what());
        }
        const auto od = out.data();
        for (std::size_t b = 0; b < nb; ++b) {
            Slice2D& p = probs[s0 + b];
            p.rows = rows;
            p.cols = cols;
            p.data.resize(rows * cols);
            for (std::size_t r = 0; r < rows; ++r) std::copy_n(&od[(b * PH + r) * PW], cols, &p.data[r * cols]);
        }
    }
    LocationCue cue = stack_to_cue(probs, pre.axis, c.pet.spacing);
    cue.cue.orientation = c.pet.orientation;
    return cue;
}

// ---------------------------------------------------------------------------
// Phase 2: 3D patches of windowed PET + CT

namespace detail {

struct PatchCase {
    Volume pet, ct, label, cue;           // padded to at least the patch
    std::vector<std::size_t> lesion_voxels;  // flat indices into the padded grid
};

inline PatchCase make_patch_case(const Case& c, const Volume& cue, const Index3& patch, const PreprocessConfig& pre) {
    PatchCase pc;
    pc.pet = pad_to(window_pet(c.pet, pre), patch);
    pc.ct = pad_to(window_ct(c.ct, pre), patch);
    pc.label = pad_to(label_or_empty(c), patch);
    pc.cue = pad_to(cue, patch);
    for (std::size_t i = 0; i < pc.label.data.size(); ++i) {
        if (pc.label.data[i] > 0.5f) pc.lesion_voxels.push_back(i);
    }
    return pc;
}

inline Index3 lesion_centred_origin(const PatchCase& pc, const Index3& patch, Rng& rng) {
    const Index3& shape = pc.pet.shape;
    const std::size_t f = pc.lesion_voxels[rng.index(pc.lesion_voxels.size())];
    const Index3 v{f / (shape[1] * shape[2]), (f / shape[2]) % shape[1], f % shape[2]};
    Index3 o{};
    for (int a = 0; a < 3; ++a) {
        const long lo = static_cast<long>(v[a]) - static_cast<long>(patch[a] / 2);
        o[a] = static_cast<std::size_t>(std::clamp<long>(lo, 0, static_cast<long>(shape[a] - patch[a])));
    }
    return o;
}

inline Index3 uniform_origin(const PatchCase& pc, const Index3& patch, Rng& rng) {
    Index3 o{};
    for (int a = 0; a < 3; ++a) o[a] = rng.index(pc.pet.shape[a] - patch[a] + 1);
    return o;
}

/// (case index, origin) for one batch element: with probability
/// `lesion_prob` a lesion-bearing case and a window centred on one of its
/// lesion voxels, otherwise a uniform case and a uniform window.
inline std::pair<std::size_t, Index3> sample_patch(const std::vector<PatchCase>& data,
                                                   const std::vector<std::size_t>& lesion_cases, const Index3& patch,
                                                   double lesion_prob, Rng& rng) {
    if (!lesion_cases.empty() && rng.bernoulli(lesion_prob)) {
        const std::size_t i = lesion_cases[rng.index(lesion_cases.size())];
        return {i, lesion_centred_origin(data[i], patch, rng)};
    }
    const std::size_t i = rng.index(data.size());
    return {i, uniform_origin(data[i], patch, rng)};
}

inline void copy_patch(const Volume& v, const Index3& o, const Index3& p, float* dst) {
    for (std::size_t i = 0; i < p[0]; ++i)
        for (std::size_t j = 0; j < p[1]; ++j) std::copy_n(&v.data[v.index(o[0] + i, o[1] + j, o[2])], p[2], dst + (i * p[1] + j) * p[2]);
}

}  // namespace detail

/// Trains the 3D segmentation net. `cues[i]` must be aligned with `cases[i]`;
/// with cfg.weighted the loss is the cue-weighted one, otherwise BCE + lambda * Dice.
inline TrainResult train_phase2(const std::vector<Case>& cases, const std::vector<LocationCue>& cues,
                                const Phase2Config& cfg, const PreprocessConfig& pre = {},
                                const EpochCallback& on_epoch = {}) {
    cfg.validate();
    pre.validate();
    if (cases.empty()) throw ValueError("train_phase2: no cases");
    if (cues.size() != cases.size()) {
        throw ShapeError("train_phase2: " + std::to_string(cues.size()) + " cues for " + std::to_string(cases.size()) +
                         " cases");
    }
    for (std::size_t i = 0; i < cases.size(); ++i) require_aligned(cues[i].cue, cases[i].pet, "train_phase2: cue of " + cases[i].id);
    TrainResult res{build_unet<float>(cfg.model, Rng::mix(cfg.seed, 1)), {}};
    init_head_prior(res.model, cfg.head_prior);
    if (cfg.epochs == 0) return res;

    std::vector<detail::PatchCase> data;
    data.reserve(cases.size());
    std::vector<std::size_t> lesion_cases;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        data.push_back(detail::make_patch_case(cases[i], cues[i].cue, cfg.patch, pre));
        if (!data.back().lesion_voxels.empty()) lesion_cases.push_back(i);
    }

    Rng rng(Rng::mix(cfg.seed, 2));
    Model<float>& m = res.model;
    m.set_mode(Mode::train);
    SgdState<float> state;
    const Index3& P = cfg.patch;
    const std::size_t PV = P[0] * P[1] * P[2], B = static_cast<std::size_t>(cfg.batch);
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        const double lr = lr_at_epoch(cfg.optimizer.alpha0, ep, cfg.epochs);
        double total = 0.0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            std::vector<float> x(B * 2 * PV), y(B * PV), w(B * PV);
            for (std::size_t b = 0; b < B; ++b) {
                const auto [ci, o] = detail::sample_patch(data, lesion_cases, P, cfg.lesion_patch_prob, rng);
                const detail::PatchCase& pc = data[ci];
                detail::copy_patch(pc.pet, o, P, &x[(2 * b) * PV]);
                detail::copy_patch(pc.ct, o, P, &x[(2 * b + 1) * PV]);
                detail::copy_patch(pc.label, o, P, &y[b * PV]);
                detail::copy_patch(pc.cue, o, P, &w[b * PV]);
            }
            Tensor<float> xt({B, 2, P[0], P[1], P[2]}, std::move(x));
            Tensor<float> yt({B, 1, P[0], P[1], P[2]}, std::move(y));
            Tensor<float> pred = m.forward(xt);
            Tensor<float> loss = cfg.weighted ? phase2_loss(pred, yt, Tensor<float>({B, 1, P[0], P[1], P[2]}, std::move(w)), cfg.loss)
                                              : phase1_loss(pred, yt, cfg.loss);
            const double lv = loss.item();
            detail::check_finite_loss(lv, ep, "phase2");
            backward(loss);
            sgd_update(m.params(), cfg.optimizer, lr, &state);
            total += lv;
        }
        res.history.push_back({ep, lr, total / cfg.steps_per_epoch});
        if (on_epoch) on_epoch(res.history.back());
    }
    m.set_mode(Mode::eval);
    return res;
}

/// Window predictor for infer_3d_with: given window origins, returns one patch
/// of probabilities per origin, concatenated in order.
using WindowPredictor = std::function<std::vector<float>(const std::vector<Index3>& origins)>;

/// Sliding-window aggregation over a grid of `shape` (already padded to at
/// least `patch`): every window is predicted once and overlaps are averaged.
inline Volume aggregate_windows(const Index3& shape, const Spacing3& spacing, const Index3& patch, const Index3& stride,
                                const WindowPredictor& predict, std::size_t window_batch = 1,
                                std::vector<Index3> order = {}) {
    if (order.empty()) order = tile_positions(shape, patch, stride);
    const std::size_t PV = patch[0] * patch[1] * patch[2];
    const std::size_t N = shape[0] * shape[1] * shape[2];
    std::vector<double> sum(N, 0.0);
    std::vector<std::uint32_t> count(N, 0);
    for (std::size_t w0 = 0; w0 < order.size(); w0 += window_batch) {
        const std::vector<Index3> chunk(order.begin() + static_cast<long>(w0),
                                        order.begin() + static_cast<long>(std::min(order.size(), w0 + window_batch)));
        const std::vector<float> out = predict(chunk);
        if (out.size() != chunk.size() * PV) throw ShapeError("aggregate_windows: predictor returned the wrong size");
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            const Index3& o = chunk[b];
            for (std::size_t i = 0; i < patch[0]; ++i)
                for (std::size_t j = 0; j < patch[1]; ++j)
                    for (std::size_t k = 0; k < patch[2]; ++k) {
                        const std::size_t f = ((o[0] + i) * shape[1] + (o[1] + j)) * shape[2] + (o[2] + k);
                        sum[f] += out[b * PV + (i * patch[1] + j) * patch[2] + k];
                        ++count[f];
                    }
        }
    }
    Volume v(shape, spacing, Modality::PROB);
    for (std::size_t f = 0; f < N; ++f) {
        v.data[f] = count[f] ? std::clamp(static_cast<float>(sum[f] / count[f]), 0.0f, 1.0f) : 0.0f;
    }
    return v;
}

/// Crops the leading `shape` corner out of a padded volume.
inline Volume crop_to(const Volume& v, const Index3& shape) {
    if (v.shape == shape) return v;
    Volume out = extract_patch(v, {0, 0, 0}, shape);
    out.orientation = v.orientation;
    return out;
}

/// 3D probability map of a case by sliding-window inference.
inline Volume infer_3d(Model<float>& model, const Case& c, const Index3& patch, const InferenceConfig& icfg = {},
                       const PreprocessConfig& pre = {}) {
    icfg.validate();
    pre.validate();
    if (model.config().rank != 3 || model.config().in_channels != 2) {
        throw ShapeError("infer_3d: model must be a 2-channel 3D U-Net");
    }
    model.set_mode(Mode::eval);
    const Volume pet = pad_to(window_pet(c.pet, pre), patch);
    const Volume ct = pad_to(window_ct(c.ct, pre), patch);
    const std::size_t PV = patch[0] * patch[1] * patch[2];
    WindowPredictor predict = [&](const std::vector<Index3>& origins) {
        const std::size_t nb = origins.size();
        std::vector<float> x(nb * 2 * PV);
        for (std::size_t b = 0; b < nb; ++b) {
            detail::copy_patch(pet, origins[b], patch, &x[(2 * b) * PV]);
            detail::copy_patch(ct, origins[b], patch, &x[(2 * b + 1) * PV]);
        }
        Tensor<float> y = model.forward(Tensor<float>({nb, 2, patch[0], patch[1], patch[2]}, std::move(x)));
        return std::vector<float>(y.data().begin(), y.data().end());
    };
    Volume full = aggregate_windows(pet.shape, c.pet.spacing, patch, icfg.effective_stride(patch), predict,
                                    static_cast<std::size_t>(icfg.window_batch));
    Volume out = crop_to(full, c.pet.shape);
    out.orientation = c.pet.orientation;
    return out;
}

/// Cue-gated threshold: t_i = low where cue_i > gate, else high; mask_i = pred_i > t_i.
inline Volume fuse(const Volume& pred, const LocationCue& cue, const FusionConfig& f) {
    f.validate();
    require_aligned(pred, cue.cue, "fuse: cue");
    Volume out(pred.shape, pred.spacing, Modality::MASK);
    out.orientation = pred.orientation;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double t = cue.cue.data[i] > f.gate ? f.low : f.high;
        out.data[i] = pred.data[i] > t ? 1.0f : 0.0f;
    }
    return out;
}

/// Plain binarization, pred > t.
inline Volume threshold(const Volume& pred, double t) {
    Volume out(pred.shape, pred.spacing, Modality::MASK);
    out.orientation = pred.orientation;
    for (std::size_t i = 0; i < pred.data.size(); ++i) out.data[i] = pred.data[i] > t ? 1.0f : 0.0f;
    return out;
}

}  // namespace l2s
