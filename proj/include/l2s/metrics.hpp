#pragma once

// Overlap and component-volume metrics, reports, and k-fold splitting.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/random.hpp"
#include "l2s/volume.hpp"

namespace l2s {

inline void check_connectivity(int connectivity) {
    if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
        throw ValueError("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
    }
}

/// Neighbour offsets (di, dj, dk) for a connectivity: 6 faces, +12 edges, +8 corners.
inline std::vector<std::array<int, 3>> neighbour_offsets(int connectivity) {
    check_connectivity(connectivity);
    std::vector<std::array<int, 3>> out;
    for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b)
            for (int c = -1; c <= 1; ++c) {
                const int order = std::abs(a) + std::abs(b) + std::abs(c);
                if (order == 0) continue;
                if (order == 1 || (order == 2 && connectivity >= 18) || (order == 3 && connectivity == 26)) {
                    out.push_back({a, b, c});
                }
            }
    return out;
}

struct Components {
    std::vector<std::uint32_t> labels;  // 0 background, 1..count
    std::size_t count = 0;
    Index3 shape{};
};

/// Labels foreground (> 0.5) voxels by breadth-first flood fill. Labels are
/// assigned in row-major order of each component's first voxel.
inline Components connected_components(const Volume& mask, int connectivity = 26) {
    const auto offs = neighbour_offsets(connectivity);
    const Index3 s = mask.shape;
    Components cc{std::vector<std::uint32_t>(mask.size(), 0), 0, s};
    std::vector<std::size_t> queue;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (mask.data[start] <= 0.5f || cc.labels[start]) continue;
        const auto label = static_cast<std::uint32_t>(++cc.count);
        cc.labels[start] = label;
        queue.assign(1, start);
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const std::size_t f = queue[head];
            const long i = static_cast<long>(f / (s[1] * s[2])), j = static_cast<long>((f / s[2]) % s[1]),
                       k = static_cast<long>(f % s[2]);
            for (const auto& o : offs) {
                const long ni = i + o[0], nj = j + o[1], nk = k + o[2];
                if (ni < 0 || nj < 0 || nk < 0 || ni >= static_cast<long>(s[0]) || nj >= static_cast<long>(s[1]) ||
                    nk >= static_cast<long>(s[2])) {
                    continue;
                }
                const std::size_t g = mask.index(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj),
                                                 static_cast<std::size_t>(nk));
                if (mask.data[g] > 0.5f && !cc.labels[g]) {
                    cc.labels[g] = label;
                    queue.push_back(g);
                }
            }
        }
    }
    return cc;
}

/// 2|P∩G| / (|P|+|G|); 1 when both are empty.
inline double dice_score(const Volume& pred, const Volume& gt) {
    require_aligned(pred, gt, "dice_score");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool a = pred.data[i] > 0.5f, b = gt.data[i] > 0.5f;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Volume in mL of the components of `a` that do not touch `b`.
inline double unmatched_component_volume(const Volume& a, const Volume& b, int connectivity) {
    require_aligned(a, b, "component volume");
    const Components cc = connected_components(a, connectivity);
    std::vector<char> touched(cc.count + 1, 0);
    std::vector<std::size_t> size(cc.count + 1, 0);
    for (std::size_t i = 0; i < cc.labels.size(); ++i) {
        const std::uint32_t l = cc.labels[i];
        if (!l) continue;
        ++size[l];
        if (b.data[i] > 0.5f) touched[l] = 1;
    }
    std::size_t voxels = 0;
    for (std::size_t l = 1; l <= cc.count; ++l) {
        if (!touched[l]) voxels += size[l];
    }
    return static_cast<double>(voxels) * a.voxel_volume_mm3() / 1000.0;
}

/// mL of predicted components with no ground-truth overlap.
inline double false_positive_volume(const Volume& pred, const Volume& gt, int connectivity = 26) {
    return unmatched_component_volume(pred, gt, connectivity);
}

/// mL of ground-truth components the prediction misses entirely.
inline double false_negative_volume(const Volume& pred, const Volume& gt, int connectivity = 26) {
    return unmatched_component_volume(gt, pred, connectivity);
}

using FoldSplit = std::vector<std::vector<std::string>>;

/// Shuffles ids with `seed` and deals them round-robin into k folds.
inline FoldSplit kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed) {
    if (k < 1) throw ValueError("kfold_split: k must be >= 1");
    if (static_cast<std::size_t>(k) > ids.size()) {
        throw ValueError("kfold_split: k=" + std::to_string(k) + " exceeds " + std::to_string(ids.size()) + " ids");
    }
    Rng rng(seed);
    rng.shuffle(ids);
    FoldSplit folds(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ids.size(); ++i) folds[i % folds.size()].push_back(ids[i]);
    return folds;
}

struct CaseMetrics {
    std::string id;
    double dice = 0.0;
    double fpv_ml = 0.0;
    double fnv_ml = 0.0;
};

struct MetricsReport {
    std::string method;
    std::vector<CaseMetrics> per_case;
    double mean_dice = 0.0;
    double mean_fpv_ml = 0.0;
    double mean_fnv_ml = 0.0;
    int connectivity = 26;
    std::string fusion;  // echo of the fusion settings that produced the masks

    void recompute() {
        mean_dice = mean_fpv_ml = mean_fnv_ml = 0.0;
        if (per_case.empty()) return;
        for (const auto& c : per_case) {
            mean_dice += c.dice;
            mean_fpv_ml += c.fpv_ml;
            mean_fnv_ml += c.fnv_ml;
        }
        const double n = static_cast<double>(per_case.size());
        mean_dice /= n;
        mean_fpv_ml /= n;
        mean_fnv_ml /= n;
    }
};

inline CaseMetrics evaluate_case(const std::string& id, const Volume& pred, const Volume& gt, int connectivity = 26) {
    return {id, dice_score(pred, gt), false_positive_volume(pred, gt, connectivity),
            false_negative_volume(pred, gt, connectivity)};
}

/// Per-case metrics of `masks[id]` against each case's label; cases without a
/// label count as all-background.
inline MetricsReport evaluate(const std::vector<Case>& cases, const std::map<std::string, Volume>& masks,
                              int connectivity = 26, const std::string& method = "", const std::string& fusion = "") {
    check_connectivity(connectivity);
    MetricsReport r;
    r.method = method;
    r.connectivity = connectivity;
    r.fusion = fusion;
    for (const Case& c : cases) {
        auto it = masks.find(c.id);
        if (it == masks.end()) throw MissingInput("evaluate: no mask for case " + c.id);
        const Volume gt = c.label ? *c.label : Volume(c.pet.shape, c.pet.spacing, Modality::MASK);
        r.per_case.push_back(evaluate_case(c.id, it->second, gt, connectivity));
    }
    r.recompute();
    return r;
}

namespace detail {
inline std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}
}  // namespace detail

/// Tab-separated report: comment header, one row per case, then a "mean" row.
inline std::string report_tsv(const MetricsReport& r) {
    std::string out = "# method=" + r.method + " connectivity=" + std::to_string(r.connectivity);
    if (!r.fusion.empty()) out += " fusion=" + r.fusion;
    out += "\ncase\tdice\tfpv_ml\tfnv_ml\n";
    for (const auto& c : r.per_case) {
        out += c.id + '\t' + detail::fixed6(c.dice) + '\t' + detail::fixed6(c.fpv_ml) + '\t' + detail::fixed6(c.fnv_ml) + '\n';
    }
    out += "mean\t" + detail::fixed6(r.mean_dice) + '\t' + detail::fixed6(r.mean_fpv_ml) + '\t' +
           detail::fixed6(r.mean_fnv_ml) + '\n';
    return out;
}

/// Writes `text` through a temporary file and a rename.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << text;
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace l2s
