// Acceptance run: one PASS/FAIL line per criterion. Tolerances, seed counts
// and time limits are fixed here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcases.hpp"
#include "gradcheck.hpp"
#include "l2s/config.hpp"
#include "l2s/experiment.hpp"
#include "l2s/losses.hpp"
#include "l2s/metrics.hpp"
#include "l2s/phantom.hpp"
#include "l2s/pipeline.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace l2s;
using l2s::testing::TensorD;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& what) {
        pass = pass && ok;
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    }
};

struct Criterion {
    int id;
    std::string title;
    double time_limit_s;  // 0: no limit beyond ctest's
    std::function<Outcome(const fs::path&)> run;
};

std::string num(double v, const char* fmt = "%.3g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite(const fs::path&) {
    constexpr int kSeeds = 100;
    constexpr double kTol = 1e-3;
    Outcome o;
    for (const auto& gc : l2s::testing::gradient_cases()) {
        double worst = 0.0;
        for (std::uint64_t s = 0; s < kSeeds; ++s) worst = std::max(worst, gc.error(1000 + s));
        o.require(worst < kTol, gc.name + ": max rel. error " + num(worst) + " over " + std::to_string(kSeeds) + " seeds");
    }
    return o;
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

Outcome oracle_equivalence(const fs::path&) {
    Outcome o;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(s);
        const bool three = s % 2 == 1;
        const std::size_t C = 1 + rng.index(3), O = 1 + rng.index(3);
        const std::size_t k = 1 + 2 * rng.index(2);
        const Shape xs = three ? Shape{2, C, 3 + rng.index(4), 3 + rng.index(4), 3 + rng.index(4)}
                               : Shape{2, C, 3 + rng.index(6), 3 + rng.index(6)};
        const Shape ks = three ? Shape{O, C, k, k, k} : Shape{O, C, k, k};
        const TensorD x = l2s::testing::random_tensor(xs, rng, -1, 1, false);
        const TensorD w = l2s::testing::random_tensor(ks, rng, -1, 1, false);
        const TensorD b = l2s::testing::random_tensor({O}, rng, -1, 1, false);
        worst = std::max(worst, l2s::testing::max_rel(conv(x, w, b).data(), l2s::testing::conv_oracle(x, w, b)));
    }
    o.require(worst < 1e-6, "conv vs nested loops, 100 random 2D/3D cases: max rel. error " + num(worst));

    std::size_t mismatches = 0, components = 0;
    Rng rng(42);
    for (int t = 0; t < 200; ++t) {
        const Volume m = l2s::testing::random_mask({16, 16, 16}, rng.uniform(0.05, 0.6), rng);
        for (int conn : {6, 18, 26}) {
            const Components cc = connected_components(m, conn);
            const auto ref = l2s::testing::union_find_labels(m, conn);
            mismatches += cc.labels != ref;
            components += cc.count;
        }
    }
    o.require(mismatches == 0, "connected components vs union-find, 200 masks of 16^3 x {6,18,26}: " +
                                   std::to_string(mismatches) + " mismatches (" + std::to_string(components) +
                                   " components)");
    return o;
}

// ---------------------------------------------------------------------------
// 3. Closed-form losses

Outcome closed_form_losses(const fs::path&) {
    Outcome o;
    Rng rng(3);
    const Shape s{2, 1, 10, 50};
    std::vector<double> y(numel(s));
    for (double& v : y) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const TensorD half = TensorD::full(s, 0.5), labels(s, y), ones = TensorD::full(s, 1.0);
    const double b = bce(half, labels).item();
    o.require(std::abs(b - std::log(2.0)) <= 1e-6, "BCE(p=0.5) = " + num(b, "%.12f") + ", ln 2 = " + num(std::log(2.0), "%.12f"));
    const double d = dice_loss(TensorD::full({1, 1, 10, 100}, 0.5), TensorD::full({1, 1, 10, 100}, 1.0)).item();
    o.require(std::abs(d - 1.0 / 3.0) <= 2e-3, "Dice loss(p=0.5, y=1, 1000 voxels, eps=1) = " + num(d, "%.6f"));

    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng r(seed);
        const Shape sh{2, 1, 4, 6};
        const TensorD p = l2s::testing::random_tensor(sh, r, 0.01, 0.99, false);
        std::vector<double> yy(numel(sh));
        for (double& v : yy) v = r.bernoulli(0.3) ? 1.0 : 0.0;
        const TensorD lab(sh, yy);
        LossConfig l;
        l.lambda = 1.0;
        worst = std::max(worst, std::abs(phase2_loss(p, lab, TensorD::zeros(sh), l).item() - phase1_loss(p, lab, l).item()));
    }
    o.require(worst <= 1e-12, "phase2(cue=0) - phase1(lambda=1), 100 seeds: max |diff| " + num(worst));
    return o;
}

// ---------------------------------------------------------------------------
// 4. Schedule

Outcome schedule(const fs::path&) {
    Outcome o;
    const double a0 = lr_at_epoch(1e-3, 0, 200), a1 = lr_at_epoch(1e-3, 100, 200), a2 = lr_at_epoch(1e-3, 200, 200);
    const double exact = 1e-3 * std::pow(0.5, 0.9);
    o.require(std::abs(a0 - 1e-3) <= 1e-9, "lr(0) = " + num(a0, "%.10e"));
    o.require(std::abs(a1 - exact) <= 1e-9, "lr(100) = " + num(a1, "%.10e") + ", closed form 1e-3 * 0.5^0.9 = " + num(exact, "%.10e"));
    o.require(std::abs(a2) <= 1e-9, "lr(200) = " + num(a2, "%.10e"));
    // The quoted 5.3589e-4 has five significant digits; it is matched to half a unit in its last place.
    o.require(std::abs(a1 - 5.3589e-4) <= 0.5e-8,
              "lr(100) vs quoted 5.3589e-4: |diff| " + num(std::abs(a1 - 5.3589e-4)) + " <= 5e-9 (1e-9 would be tighter than the quoted digits)");
    return o;
}

// ---------------------------------------------------------------------------
// 5. Fusion truth table

Volume scalar(float v) {
    Volume out({1, 1, 1}, {1, 1, 1}, Modality::PROB);
    out.data[0] = v;
    return out;
}

Outcome fusion_table(const fs::path&) {
    Outcome o;
    const FusionConfig def{0.5, 0.1, 0.9};
    o.require(fuse(scalar(0.2f), {scalar(0.6f)}, def).data[0] == 1.0f, "pred 0.2, cue 0.6 -> 1");
    o.require(fuse(scalar(0.2f), {scalar(0.4f)}, {0.5, 0.1, 0.5}).data[0] == 0.0f, "pred 0.2, cue 0.4, high 0.5 -> 0");
    o.require(fuse(scalar(0.6f), {scalar(0.4f)}, def).data[0] == 0.0f, "pred 0.6, cue 0.4, high 0.9 -> 0");
    const Volume ones({4, 5, 6}, {1, 1, 1}, Modality::PROB, 1.0f);
    const Volume m = fuse(ones, {ones}, def);
    o.require(std::all_of(m.data.begin(), m.data.end(), [](float v) { return v == 1.0f; }), "cue = 1, pred = 1 -> mask = 1");
    std::size_t differ = 0;
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        Volume p({8, 9, 10}, {1, 1, 1}, Modality::PROB), c = p;
        for (float& v : p.data) v = static_cast<float>(rng.uniform());
        for (float& v : c.data) v = static_cast<float>(rng.uniform());
        p.data[0] = 0.5f;
        differ += fuse(p, {c}, {0.5, 0.5, 0.5}).data != threshold(p, 0.5).data;
    }
    o.require(differ == 0, "low = high = 0.5 equals plain 0.5 threshold on 100 random volumes");
    return o;
}

// ---------------------------------------------------------------------------
// 6. Overfit sanity

PhantomSpec overfit_phantom() {
    PhantomSpec s;
    s.shape = {32, 48, 48};
    return s;
}

// The `count` lesion slices (along the phase-1 axis) with the largest lesion area.
Case lesion_slices(const std::vector<Case>& cases, std::size_t count, int axis) {
    struct Pick {
        std::size_t area, c, s;
    };
    std::vector<Pick> picks;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        const auto lab = slice_stack(*cases[c].label, axis);
        for (std::size_t s = 0; s < lab.size(); ++s) {
            const auto area = static_cast<std::size_t>(std::count(lab[s].data.begin(), lab[s].data.end(), 1.0f));
            if (area) picks.push_back({area, c, s});
        }
    }
    std::stable_sort(picks.begin(), picks.end(), [](const Pick& a, const Pick& b) { return a.area > b.area; });
    if (picks.size() < count) throw ValueError("not enough lesion slices");
    picks.resize(count);
    std::vector<Slice2D> pet, ct, lab;
    for (const Pick& p : picks) {
        pet.push_back(slice_stack(cases[p.c].pet, axis)[p.s]);
        ct.push_back(slice_stack(cases[p.c].ct, axis)[p.s]);
        lab.push_back(slice_stack(*cases[p.c].label, axis)[p.s]);
    }
    const Spacing3 sp = cases[0].pet.spacing;
    Case out;
    out.id = "lesion_slices";
    out.pet = stack_slices(pet, axis, sp, Modality::PET);
    out.ct = stack_slices(ct, axis, sp, Modality::CT);
    out.label = stack_slices(lab, axis, sp, Modality::MASK);
    return out;
}

Outcome overfit(const fs::path& out) {
    Outcome o;
    const PreprocessConfig pre;
    LossConfig loss;
    loss.dice_per_sample = false;

    {
        const auto t0 = std::chrono::steady_clock::now();
        const Case slab = lesion_slices(generate_dataset(overfit_phantom(), 4, 21), 8, pre.axis);
        Phase1Config c;
        c.epochs = 200;
        c.steps_per_epoch = 1;
        c.batch = 8;
        c.crop = {32, 48};
        c.lesion_fraction = 1.0;
        c.flip_prob = 0.0;
        c.rotation_deg_max = 0.0;
        c.loss = loss;
        TrainResult r = train_phase1({slab}, c, pre);
        const double dice = dice_score(threshold(infer_cue(r.model, slab, pre).cue, 0.5), *slab.label);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_text_file(out / "overfit_phase1.log", history_text(r.history));
        o.require(dice >= 0.8 && c.epochs <= 300, "2D U-Net on 8 lesion slices, " + std::to_string(c.epochs) +
                                                      " epochs: training Dice " + num(dice, "%.4f"));
        o.require(secs < 300.0, "2D overfit time " + num(secs, "%.1f") + " s < 300 s");
    }
    {
        const auto t0 = std::chrono::steady_clock::now();
        const Case one = generate_case(overfit_phantom(), 11, "one", 2);
        Phase2Config c;
        c.epochs = 200;
        c.steps_per_epoch = 1;
        c.batch = 1;
        c.patch = one.pet.shape;
        c.model = {3, 2, 3, {8, 16, 32}, NormKind::layer};
        c.weighted = false;
        c.loss = loss;
        const LocationCue zero{Volume(one.pet.shape, one.pet.spacing, Modality::PROB)};
        TrainResult r = train_phase2({one}, {zero}, c, pre);
        const double dice = dice_score(threshold(infer_3d(r.model, one, c.patch, {}, pre), 0.5), *one.label);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_text_file(out / "overfit_phase2.log", history_text(r.history));
        o.require(dice >= 0.8 && c.epochs <= 300, "3D U-Net on one phantom, " + std::to_string(c.epochs) +
                                                      " epochs: training Dice " + num(dice, "%.4f"));
        o.require(secs < 900.0, "3D overfit time " + num(secs, "%.1f") + " s < 900 s");
    }
    return o;
}

// ---------------------------------------------------------------------------
// 7. Desk-scale directional reproduction

const char* kDeskConfig = R"([phantom]
cases = 40
shape = [32, 48, 48]
seed = 3
[loss]
dice_per_sample = false
[phase1]
epochs = 100
steps_per_epoch = 4
batch = 16
crop = [32, 48]
[phase2]
epochs = 80
steps_per_epoch = 4
batch = 2
patch = [16, 32, 32]
levels = 3
channels = [8, 16, 32]
[metrics]
folds = 5
)";

Outcome directional(const fs::path& out) {
    Outcome o;
    const RunConfig cfg = config::parse(kDeskConfig, "desk");
    const auto cases = generate_dataset(cfg.phantom, static_cast<std::size_t>(cfg.cases), cfg.phantom.seed);
    const fs::path dir = out / "crossval40";
    fs::create_directories(dir);
    write_text_file(dir / "config.effective.toml", config::echo(cfg));
    const CrossvalResult r = crossval(cases, cfg, dir, [](const std::string& s) { std::cerr << "  [7] " << s << '\n'; });
    const MetricsReport &d2 = r.summary[0], &d3 = r.summary[1], &l2s = r.summary[2], &post = r.summary[3];
    for (const auto& m : r.summary) {
        o.notes.push_back("     " + m.method + ": mDice " + num(m.mean_dice, "%.4f") + ", FPV " + num(m.mean_fpv_ml, "%.4f") +
                          " mL, FNV " + num(m.mean_fnv_ml, "%.4f") + " mL");
    }
    (void)d2;
    o.require(post.mean_dice >= d3.mean_dice - 0.02, "(a) fused mDice " + num(post.mean_dice, "%.4f") +
                                                         " >= 3D-only mDice - 0.02 = " + num(d3.mean_dice - 0.02, "%.4f"));
    o.require(post.mean_fpv_ml <= l2s.mean_fpv_ml, "(b) post-processed FPV " + num(post.mean_fpv_ml, "%.4f") +
                                                       " <= un-post-processed FPV " + num(l2s.mean_fpv_ml, "%.4f"));
    o.require(post.mean_fnv_ml <= d3.mean_fnv_ml,
              "(c) post-processed FNV " + num(post.mean_fnv_ml, "%.4f") + " <= 3D-only FNV " + num(d3.mean_fnv_ml, "%.4f"));
    return o;
}

// ---------------------------------------------------------------------------
// 8. Determinism

const char* kSmallConfig = R"([phantom]
cases = 10
shape = [24, 32, 32]
lesion_count = [0, 2]
decoy_count = [1, 1]
decoy_radius_mm = [8, 12]
lesion_radius_mm = [8, 10]
seed = 5
[loss]
dice_per_sample = false
[phase1]
epochs = 3
steps_per_epoch = 2
batch = 4
crop = [24, 32]
levels = 2
channels = [4, 8]
[phase2]
epochs = 3
steps_per_epoch = 2
batch = 1
patch = [8, 16, 16]
levels = 2
channels = [4, 8]
[metrics]
folds = 5
)";

Outcome determinism(const fs::path& out) {
    Outcome o;
    const RunConfig cfg = config::parse(kSmallConfig, "small");
    const fs::path a = out / "determinism_a", b = out / "determinism_b";
    for (const auto& dir : {a, b}) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        // Each run regenerates its data from the seed.
        crossval(generate_dataset(cfg.phantom, static_cast<std::size_t>(cfg.cases), cfg.phantom.seed), cfg, dir);
    }
    std::size_t files = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        ++files;
        const fs::path other = b / fs::relative(e.path(), a);
        if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
            ++differ;
            o.notes.push_back("     differs: " + fs::relative(e.path(), a).string());
        }
    }
    o.require(files > 0 && differ == 0, "two crossval runs, same config and seed: " + std::to_string(files) +
                                            " files (reports, logs, checkpoints), " + std::to_string(differ) + " differ");
    return o;
}

// ---------------------------------------------------------------------------
// 9. Metric edge cases

Volume mask_with(const Index3& shape, double spacing, std::initializer_list<Index3> on) {
    Volume v(shape, {spacing, spacing, spacing}, Modality::MASK);
    for (const auto& p : on) v.at(p[0], p[1], p[2]) = 1.0f;
    return v;
}

Outcome metric_edges(const fs::path&) {
    Outcome o;
    const Volume empty({5, 6, 7}, {4, 4, 4}, Modality::MASK);
    o.require(dice_score(empty, empty) == 1.0, "both-empty Dice = 1.0");
    bool fnv_ok = true;
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        Volume g = l2s::testing::random_mask({6, 7, 8}, rng.uniform(0.01, 0.5), rng);
        g.spacing = {rng.uniform(0.5, 4), rng.uniform(0.5, 4), rng.uniform(0.5, 4)};
        Volume none(g.shape, g.spacing, Modality::MASK);
        const double total = static_cast<double>(std::count(g.data.begin(), g.data.end(), 1.0f)) * g.voxel_volume_mm3() / 1000.0;
        fnv_ok = fnv_ok && std::abs(false_negative_volume(none, g, 26) - total) <= 1e-12 * std::max(1.0, total);
    }
    o.require(fnv_ok, "empty prediction: FNV = total ground-truth volume (50 random masks and spacings)");
    const Volume gt = mask_with({6, 6, 6}, 2.0, {{5, 5, 5}});
    const Volume pred =
        mask_with({6, 6, 6}, 2.0, {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}, {1, 0, 0}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}});
    const double fpv = false_positive_volume(pred, gt, 26);
    o.require(fpv == 0.064, "FPV of a 2x2x2 block at 2 mm away from ground truth = " + num(fpv, "%.17g") + " mL (exact 0.064)");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    configure_threads_from_env();
    CLI::App app{"Acceptance criteria"};
    std::string out = "acceptance_out";
    std::vector<int> only;
    app.add_option("--out", out, "Directory for run artifacts");
    app.add_option("--only", only, "Run only these criteria");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(out);

    const std::vector<Criterion> all{
        {1, "gradient suite (64-bit finite differences)", 120, gradient_suite},
        {2, "oracle equivalence (conv, connected components)", 60, oracle_equivalence},
        {3, "closed-form loss values", 0, closed_form_losses},
        {4, "learning-rate schedule", 0, schedule},
        {5, "fusion truth table", 0, fusion_table},
        {6, "overfit sanity (2D and 3D)", 1200, overfit},
        {7, "desk-scale directional reproduction (40 phantoms, 5 folds)", 7200, directional},
        {8, "determinism of crossval reports", 0, determinism},
        {9, "metric edge cases", 0, metric_edges},
    };

    std::string report;
    int failed = 0;
    for (const auto& c : all) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(out);
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.time_limit_s > 0) o.require(secs < c.time_limit_s, "runtime " + num(secs, "%.1f") + " s < " + num(c.time_limit_s, "%.0f") + " s");
        std::string block = std::string(o.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(c.id) + ": " + c.title +
                            " (" + num(secs, "%.1f") + " s)\n";
        for (const auto& n : o.notes) block += "    " + n + "\n";
        std::cout << block << std::flush;
        report += block;
        failed += !o.pass;
    }
    write_text_file(fs::path(out) / "acceptance.txt", report);
    return failed ? 1 : 0;
}
