#pragma once

// k-fold cross-validation of the full workflow and its four reported methods:
// the 2D cue alone, a 3D-only net, the cue-weighted net at a plain 0.5
// threshold, and the cue-weighted net with cue-gated fusion.

#include <array>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "l2s/config.hpp"
#include "l2s/metrics.hpp"
#include "l2s/model.hpp"
#include "l2s/pipeline.hpp"

#include "json.hpp"

namespace l2s {

inline constexpr std::array<const char*, 4> kMethodNames{"2D U-Net", "3D U-Net", "L2SNet", "L2SNet + Post-process"};
inline constexpr std::array<const char*, 4> kMethodFiles{"2d_unet", "3d_unet", "l2snet", "l2snet_post"};

using Logger = std::function<void(const std::string&)>;

inline std::string history_text(const std::vector<EpochRecord>& h) {
    std::string out = "epoch\tlr\tloss\n";
    for (const auto& r : h) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%d\t%.9g\t%.9g\n", r.epoch, r.lr, r.loss);
        out += buf;
    }
    return out;
}

/// Table-shaped summary: one row per method with mDice / FPV / FNV.
inline std::string summary_tsv(const std::array<MetricsReport, 4>& rows) {
    std::string out = "method\tmDice\tFPV_ml\tFNV_ml\n";
    for (const auto& r : rows) {
        out += r.method + '\t' + detail::fixed6(r.mean_dice) + '\t' + detail::fixed6(r.mean_fpv_ml) + '\t' +
               detail::fixed6(r.mean_fnv_ml) + '\n';
    }
    return out;
}

inline std::string summary_json(const std::array<MetricsReport, 4>& rows, const RunConfig& cfg) {
    nlohmann::ordered_json j;
    j["connectivity"] = cfg.metrics.connectivity;
    j["folds"] = cfg.metrics.folds;
    j["fusion"] = {{"gate", cfg.fusion.gate}, {"low", cfg.fusion.low}, {"high", cfg.fusion.high}};
    j["methods"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        j["methods"].push_back({{"Methods", r.method},
                                {"mDice", r.mean_dice},
                                {"FPV", r.mean_fpv_ml},
                                {"FNV", r.mean_fnv_ml},
                                {"cases", r.per_case.size()}});
    }
    return j.dump(2) + "\n";
}

inline std::string fusion_echo(const FusionConfig& f) {
    return "gate=" + config::detail::fmt_double(f.gate) + ",low=" + config::detail::fmt_double(f.low) +
           ",high=" + config::detail::fmt_double(f.high);
}

struct FoldResult {
    std::vector<std::string> test_ids;
    std::array<MetricsReport, 4> reports;
};

struct CrossvalResult {
    std::vector<FoldResult> folds;
    std::array<MetricsReport, 4> summary;  // pooled over every held-out case
};

/// Masks of the four methods for one case.
inline std::array<Volume, 4> method_masks(const Volume& pred_3d, const Volume& pred_l2s, const LocationCue& cue,
                                          const FusionConfig& fusion) {
    return {threshold(cue.cue, 0.5), threshold(pred_3d, 0.5), threshold(pred_l2s, 0.5), fuse(pred_l2s, cue, fusion)};
}

/// Runs the k-fold loop. When `out_dir` is non-empty, each fold writes its
/// checkpoints, training logs and per-method reports to fold_<k>/, and the
/// summary goes to summary.tsv / summary.json.
inline CrossvalResult crossval(const std::vector<Case>& cases, const RunConfig& cfg,
                               const std::filesystem::path& out_dir = {}, const Logger& log = {}) {
    cfg.validate();
    std::vector<std::string> ids;
    std::map<std::string, const Case*> by_id;
    for (const Case& c : cases) {
        ids.push_back(c.id);
        by_id[c.id] = &c;
    }
    const FoldSplit split = kfold_split(ids, cfg.metrics.folds, cfg.metrics.fold_seed);
    const std::string fusion = fusion_echo(cfg.fusion);
    const int conn = cfg.metrics.connectivity;
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };

    CrossvalResult res;
    for (std::size_t k = 0; k < res.summary.size(); ++k) {
        res.summary[k].method = kMethodNames[k];
        res.summary[k].connectivity = conn;
        res.summary[k].fusion = k == 3 ? fusion : "";
    }
    for (std::size_t fold = 0; fold < split.size(); ++fold) {
        std::vector<Case> train, test;
        for (std::size_t f = 0; f < split.size(); ++f)
            for (const auto& id : split[f]) (f == fold ? test : train).push_back(*by_id.at(id));
        const std::string tag = "fold " + std::to_string(fold);

        Phase1Config p1 = cfg.phase1;
        p1.seed = Rng::mix(cfg.phase1.seed, fold);
        say(tag + ": phase 1 on " + std::to_string(train.size()) + " cases");
        TrainResult m2d = train_phase1(train, p1, cfg.preprocess);

        std::vector<LocationCue> train_cues;
        for (const Case& c : train) train_cues.push_back(infer_cue(m2d.model, c, cfg.preprocess, cfg.inference.slice_batch));

        Phase2Config p2 = cfg.phase2;
        p2.seed = Rng::mix(cfg.phase2.seed, fold);
        p2.weighted = true;
        say(tag + ": phase 2 (cue-weighted)");
        TrainResult ml2s = train_phase2(train, train_cues, p2, cfg.preprocess);
        p2.weighted = false;
        say(tag + ": 3D-only baseline");
        TrainResult m3d = train_phase2(train, train_cues, p2, cfg.preprocess);

        FoldResult fr;
        for (std::size_t k = 0; k < fr.reports.size(); ++k) {
            fr.reports[k].method = kMethodNames[k];
            fr.reports[k].connectivity = conn;
            fr.reports[k].fusion = k == 3 ? fusion : "";
        }
        for (const Case& c : test) {
            fr.test_ids.push_back(c.id);
            const LocationCue cue = infer_cue(m2d.model, c, cfg.preprocess, cfg.inference.slice_batch);
            const Volume pl2s = infer_3d(ml2s.model, c, cfg.phase2.patch, cfg.inference, cfg.preprocess);
            const Volume p3d = infer_3d(m3d.model, c, cfg.phase2.patch, cfg.inference, cfg.preprocess);
            const auto masks = method_masks(p3d, pl2s, cue, cfg.fusion);
            const Volume gt = label_or_empty(c);
            for (std::size_t k = 0; k < masks.size(); ++k) {
                const CaseMetrics cm = evaluate_case(c.id, masks[k], gt, conn);
                fr.reports[k].per_case.push_back(cm);
                res.summary[k].per_case.push_back(cm);
            }
        }
        for (auto& r : fr.reports) r.recompute();
        say(tag + ": mDice 2D " + detail::fixed6(fr.reports[0].mean_dice) + ", 3D " + detail::fixed6(fr.reports[1].mean_dice) +
            ", L2SNet " + detail::fixed6(fr.reports[2].mean_dice) + ", post " + detail::fixed6(fr.reports[3].mean_dice));

        if (!out_dir.empty()) {
            const auto dir = out_dir / ("fold_" + std::to_string(fold));
            std::filesystem::create_directories(dir);
            save_checkpoint(m2d.model, dir / "phase1.ckpt");
            save_checkpoint(ml2s.model, dir / "phase2.ckpt");
            save_checkpoint(m3d.model, dir / "baseline3d.ckpt");
            write_text_file(dir / "phase1.log", history_text(m2d.history));
            write_text_file(dir / "phase2.log", history_text(ml2s.history));
            write_text_file(dir / "baseline3d.log", history_text(m3d.history));
            std::string ids_text;
            for (const auto& id : fr.test_ids) ids_text += id + '\n';
            write_text_file(dir / "test_ids.txt", ids_text);
            for (std::size_t k = 0; k < fr.reports.size(); ++k) {
                write_text_file(dir / (std::string("report_") + kMethodFiles[k] + ".tsv"), report_tsv(fr.reports[k]));
            }
        }
        res.folds.push_back(std::move(fr));
    }
    for (auto& r : res.summary) r.recompute();
    if (!out_dir.empty()) {
        write_text_file(out_dir / "summary.tsv", summary_tsv(res.summary));
        write_text_file(out_dir / "summary.json", summary_json(res.summary, cfg));
    }
    return res;
}

}  // namespace l2s
