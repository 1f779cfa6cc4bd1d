#pragma once

// Synthetic PET/CT cases. Each case is an elliptical-cylinder body with hot
// "decoy" organs (high uptake, distinct CT density, never labeled) and hot
// lesions (labeled). Lesions come in the two hard regimes: minimum-radius
// lesions, and lesions placed against a decoy's surface.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/nifti.hpp"
#include "l2s/random.hpp"
#include "l2s/volume.hpp"

namespace l2s {

struct Range {
    double lo = 0.0, hi = 0.0;
    bool valid() const { return lo <= hi; }
};

struct IntRange {
    int lo = 0, hi = 0;
    bool valid() const { return lo <= hi; }
};

struct PhantomSpec {
    Index3 shape{64, 96, 80};
    Spacing3 spacing{4.0, 4.0, 4.0};
    IntRange lesion_count{0, 3};
    Range lesion_radius_mm{8.0, 16.0};
    IntRange decoy_count{1, 3};
    Range decoy_radius_mm{12.0, 24.0};
    Range decoy_uptake{5.0, 10.0};
    Range lesion_uptake{4.0, 10.0};
    double background_uptake = 1.0;
    Range ct_tissue_hu{120.0, 180.0};
    double decoy_ct_hu = 230.0;
    double lesion_ct_offset_hu = 20.0;
    double air_hu = -1000.0;
    double blur_sigma_vox = 0.8;
    double pet_noise_sigma = 0.0;
    double ct_noise_sigma = 0.0;
    double adjacent_fraction = 0.5;  // share of lesions placed against a decoy
    int max_retries = 200;
    std::uint64_t seed = 0;

    void validate() const {
        for (std::size_t s : shape) {
            if (s < 8) throw ConfigError("phantom: every extent must be >= 8");
        }
        for (double s : spacing) {
            if (!(s > 0.0)) throw ConfigError("phantom: spacing must be > 0");
        }
        if (!lesion_count.valid() || lesion_count.lo < 0) throw ConfigError("phantom: bad lesion_count range");
        if (!decoy_count.valid() || decoy_count.lo < 0) throw ConfigError("phantom: bad decoy_count range");
        if (!lesion_radius_mm.valid() || !(lesion_radius_mm.lo > 0.0)) throw ConfigError("phantom: bad lesion_radius_mm range");
        if (!decoy_radius_mm.valid() || !(decoy_radius_mm.lo > 0.0)) throw ConfigError("phantom: bad decoy_radius_mm range");
        if (!decoy_uptake.valid() || !lesion_uptake.valid() || !ct_tissue_hu.valid()) {
            throw ConfigError("phantom: empty uptake or HU range");
        }
        if (!(lesion_uptake.lo > background_uptake)) {
            throw ConfigError("phantom: lesion_uptake minimum must exceed background_uptake");
        }
        if (!(decoy_uptake.lo > background_uptake)) {
            throw ConfigError("phantom: decoy_uptake minimum must exceed background_uptake");
        }
        if (blur_sigma_vox < 0.0 || pet_noise_sigma < 0.0 || ct_noise_sigma < 0.0) {
            throw ConfigError("phantom: sigmas must be >= 0");
        }
        if (adjacent_fraction < 0.0 || adjacent_fraction > 1.0) throw ConfigError("phantom: adjacent_fraction in [0,1]");
        if (max_retries < 1) throw ConfigError("phantom: max_retries must be >= 1");
    }
};

/// Per-case record written to the dataset manifest.
struct ManifestRow {
    std::string id;
    int lesion_count = 0;
    double lesion_ml = 0.0;
};

namespace detail {

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> radius;  // voxels

    bool contains(double i, double j, double k) const {
        const double a = (i - center[0]) / radius[0];
        const double b = (j - center[1]) / radius[1];
        const double c = (k - center[2]) / radius[2];
        return a * a + b * b + c * c <= 1.0;
    }

    template <class F>
    void for_each_voxel(const Index3& shape, F&& f) const {
        std::array<long, 3> lo{}, hi{};
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0L, static_cast<long>(std::floor(center[a] - radius[a])));
            hi[a] = std::min(static_cast<long>(shape[a]) - 1, static_cast<long>(std::ceil(center[a] + radius[a])));
        }
        for (long i = lo[0]; i <= hi[0]; ++i)
            for (long j = lo[1]; j <= hi[1]; ++j)
                for (long k = lo[2]; k <= hi[2]; ++k)
                    if (contains(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k))) {
                        f(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(k));
                    }
    }
};

// Body: elliptical cylinder running along axis 0, leaving two empty end slabs.
struct Body {
    Index3 shape;
    double c1, c2, r1, r2;
    std::size_t z0, z1;

    explicit Body(const Index3& s)
        : shape(s),
          c1((static_cast<double>(s[1]) - 1.0) / 2.0),
          c2((static_cast<double>(s[2]) - 1.0) / 2.0),
          r1(0.42 * static_cast<double>(s[1])),
          r2(0.45 * static_cast<double>(s[2])),
          z0(2),
          z1(s[0] - 2) {}

    bool contains(long i, long j, long k) const {
        if (i < static_cast<long>(z0) || i >= static_cast<long>(z1)) return false;
        const double a = (static_cast<double>(j) - c1) / r1;
        const double b = (static_cast<double>(k) - c2) / r2;
        return a * a + b * b <= 1.0;
    }
};

// Separable truncated Gaussian blur with normalized weights.
inline void gaussian_blur(Volume& v, double sigma) {
    if (sigma <= 0.0) return;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(2 * r + 1);
    double total = 0.0;
    for (int t = -r; t <= r; ++t) total += (w[t + r] = std::exp(-0.5 * t * t / (sigma * sigma)));
    for (double& x : w) x /= total;
    std::vector<float> tmp(v.data.size());
    for (int axis = 0; axis < 3; ++axis) {
        const long n = static_cast<long>(v.shape[axis]);
        for (std::size_t i = 0; i < v.shape[0]; ++i)
            for (std::size_t j = 0; j < v.shape[1]; ++j)
                for (std::size_t k = 0; k < v.shape[2]; ++k) {
                    std::array<long, 3> p{static_cast<long>(i), static_cast<long>(j), static_cast<long>(k)};
                    const long c = p[axis];
                    double acc = 0.0, wsum = 0.0;
                    for (int t = -r; t <= r; ++t) {
                        const long q = c + t;
                        if (q < 0 || q >= n) continue;
                        p[axis] = q;
                        acc += w[t + r] * v.at(p[0], p[1], p[2]);
                        wsum += w[t + r];
                    }
                    tmp[v.index(i, j, k)] = static_cast<float>(acc / wsum);
                }
        v.data.swap(tmp);
    }
}

inline int blur_radius(double sigma) { return sigma > 0.0 ? static_cast<int>(std::ceil(3.0 * sigma)) : 0; }

}  // namespace detail

/// Deterministic synthetic case. `lesions_override`, when >= 0, replaces the
/// lesion count drawn from `spec.lesion_count`.
inline Case generate_case(const PhantomSpec& spec, std::uint64_t seed, const std::string& id = "phantom",
                          int lesions_override = -1, int* lesion_count_out = nullptr) {
    spec.validate();
    Rng rng(seed);
    const Index3 shape = spec.shape;
    const detail::Body body(shape);

    auto mm_to_vox = [&](double mm, int axis) { return mm / spec.spacing[axis]; };
    auto body_box_inside = [&](const detail::Ellipsoid& e, int margin) {
        for (int a = 0; a < 3; ++a) {
            if (e.center[a] - e.radius[a] - margin < 0.0 ||
                e.center[a] + e.radius[a] + margin > static_cast<double>(shape[a]) - 1.0) {
                return false;
            }
        }
        // Every voxel of the ellipsoid's bounding box dilated by `margin` lies in the body.
        const std::array<double, 2> di{-1.0, 1.0};
        for (double s0 : di)
            for (double s1 : di)
                for (double s2 : di) {
                    const long i = static_cast<long>(std::lround(e.center[0] + s0 * (e.radius[0] + margin)));
                    const long j = static_cast<long>(std::lround(e.center[1] + s1 * (e.radius[1] + margin)));
                    const long k = static_cast<long>(std::lround(e.center[2] + s2 * (e.radius[2] + margin)));
                    if (!body.contains(i, j, k)) return false;
                }
        return true;
    };
    auto random_center = [&](const std::array<double, 3>& radius, int margin) {
        std::array<double, 3> c{};
        c[0] = rng.uniform(body.z0 + radius[0] + margin, body.z1 - 1 - radius[0] - margin);
        // Uniform over the body ellipse by rejection.
        for (;;) {
            const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
            if (u * u + v * v <= 1.0) {
                c[1] = body.c1 + u * body.r1;
                c[2] = body.c2 + v * body.r2;
                break;
            }
        }
        return c;
    };

    // Decoys.
    const int n_decoys = static_cast<int>(rng.integer(spec.decoy_count.lo, spec.decoy_count.hi));
    std::vector<detail::Ellipsoid> decoys;
    std::vector<double> decoy_uptake;
    for (int d = 0; d < n_decoys; ++d) {
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
            detail::Ellipsoid e{};
            for (int a = 0; a < 3; ++a) e.radius[a] = mm_to_vox(rng.uniform(spec.decoy_radius_mm.lo, spec.decoy_radius_mm.hi), a);
            e.center = random_center(e.radius, 1);
            if (!body_box_inside(e, 1)) continue;
            decoys.push_back(e);
            decoy_uptake.push_back(rng.uniform(spec.decoy_uptake.lo, spec.decoy_uptake.hi));
            placed = true;
        }
        if (!placed) {
            throw GenerationError("phantom " + id + ": placed " + std::to_string(decoys.size()) + " of " +
                                  std::to_string(n_decoys) + " decoys after " + std::to_string(spec.max_retries) +
                                  " retries");
        }
    }
    std::vector<std::uint8_t> decoy_mask(shape[0] * shape[1] * shape[2], 0);
    std::vector<float> decoy_value(decoy_mask.size(), 0.0f);
    for (std::size_t d = 0; d < decoys.size(); ++d) {
        decoys[d].for_each_voxel(shape, [&](std::size_t i, std::size_t j, std::size_t k) {
            const std::size_t idx = (i * shape[1] + j) * shape[2] + k;
            decoy_mask[idx] = 1;
            decoy_value[idx] = std::max(decoy_value[idx], static_cast<float>(decoy_uptake[d]));
        });
    }

    // Lesions. Lesion 0 is a sphere at the minimum radius.
    const int n_lesions = lesions_override >= 0
                              ? lesions_override
                              : static_cast<int>(rng.integer(spec.lesion_count.lo, spec.lesion_count.hi));
    const int margin = detail::blur_radius(spec.blur_sigma_vox) + 1;
    std::vector<std::uint8_t> lesion_mask(decoy_mask.size(), 0);
    std::vector<float> lesion_value(decoy_mask.size(), 0.0f);
    int placed_lesions = 0;
    for (int l = 0; l < n_lesions; ++l) {
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
            detail::Ellipsoid e{};
            for (int a = 0; a < 3; ++a) {
                const double mm = l == 0 ? spec.lesion_radius_mm.lo
                                         : rng.uniform(spec.lesion_radius_mm.lo, spec.lesion_radius_mm.hi);
                e.radius[a] = mm_to_vox(mm, a);
            }
            if (!decoys.empty() && rng.bernoulli(spec.adjacent_fraction)) {
                // Against a decoy: step out from its center along a random direction.
                const auto& d = decoys[rng.index(decoys.size())];
                std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
                const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
                if (norm == 0.0) continue;
                double reach = 0.0;
                for (int a = 0; a < 3; ++a) {
                    dir[a] /= norm;
                    reach += (dir[a] / d.radius[a]) * (dir[a] / d.radius[a]);
                }
                const double surface = 1.0 / std::sqrt(reach);  // decoy radius along dir
                const double lesion_reach = std::max({e.radius[0], e.radius[1], e.radius[2]});
                for (int a = 0; a < 3; ++a) e.center[a] = d.center[a] + dir[a] * (surface + lesion_reach + 1.0);
            } else {
                e.center = random_center(e.radius, margin);
            }
            if (!body_box_inside(e, margin)) continue;
            bool ok = true;
            std::size_t voxels = 0;
            e.for_each_voxel(shape, [&](std::size_t i, std::size_t j, std::size_t k) {
                ++voxels;
                // Keep one voxel of clearance from other lesions and from decoys.
                for (long a = -1; a <= 1 && ok; ++a)
                    for (long b = -1; b <= 1 && ok; ++b)
                        for (long c = -1; c <= 1 && ok; ++c) {
                            const long ii = static_cast<long>(i) + a, jj = static_cast<long>(j) + b,
                                       kk = static_cast<long>(k) + c;
                            if (ii < 0 || jj < 0 || kk < 0 || ii >= static_cast<long>(shape[0]) ||
                                jj >= static_cast<long>(shape[1]) || kk >= static_cast<long>(shape[2])) {
                                continue;
                            }
                            const std::size_t idx = (static_cast<std::size_t>(ii) * shape[1] + static_cast<std::size_t>(jj)) *
                                                        shape[2] + static_cast<std::size_t>(kk);
                            if (lesion_mask[idx] || (a == 0 && b == 0 && c == 0 && decoy_mask[idx])) ok = false;
                        }
            });
            if (!ok || voxels == 0) continue;
            const float uptake = static_cast<float>(rng.uniform(spec.lesion_uptake.lo, spec.lesion_uptake.hi));
            e.for_each_voxel(shape, [&](std::size_t i, std::size_t j, std::size_t k) {
                const std::size_t idx = (i * shape[1] + j) * shape[2] + k;
                lesion_mask[idx] = 1;
                lesion_value[idx] = uptake;
            });
            placed = true;
            ++placed_lesions;
        }
        if (!placed) {
            throw GenerationError("phantom " + id + ": placed " + std::to_string(placed_lesions) + " of " +
                                  std::to_string(n_lesions) + " lesions next to " + std::to_string(decoys.size()) +
                                  " decoys after " + std::to_string(spec.max_retries) + " retries");
        }
    }

    Case c;
    c.id = id;
    c.pet = Volume(shape, spec.spacing, Modality::PET);
    c.ct = Volume(shape, spec.spacing, Modality::CT, static_cast<float>(spec.air_hu));
    c.label = Volume(shape, spec.spacing, Modality::MASK);
    const double tissue = rng.uniform(spec.ct_tissue_hu.lo, spec.ct_tissue_hu.hi);
    for (std::size_t i = 0; i < shape[0]; ++i)
        for (std::size_t j = 0; j < shape[1]; ++j)
            for (std::size_t k = 0; k < shape[2]; ++k) {
                const std::size_t idx = c.pet.index(i, j, k);
                if (!body.contains(static_cast<long>(i), static_cast<long>(j), static_cast<long>(k))) continue;
                float pet = static_cast<float>(spec.background_uptake);
                float ct = static_cast<float>(tissue);
                if (decoy_mask[idx]) {
                    pet = decoy_value[idx];
                    ct = static_cast<float>(spec.decoy_ct_hu);
                }
                if (lesion_mask[idx]) {
                    pet = lesion_value[idx];
                    ct = static_cast<float>(tissue + spec.lesion_ct_offset_hu);
                    c.label->data[idx] = 1.0f;
                }
                c.pet.data[idx] = pet;
                c.ct.data[idx] = ct;
            }
    if (lesion_count_out) *lesion_count_out = placed_lesions;
    detail::gaussian_blur(c.pet, spec.blur_sigma_vox);
    if (spec.pet_noise_sigma > 0.0 || spec.ct_noise_sigma > 0.0) {
        for (std::size_t idx = 0; idx < c.pet.data.size(); ++idx) {
            c.pet.data[idx] = std::max(0.0f, c.pet.data[idx] + static_cast<float>(spec.pet_noise_sigma * rng.normal()));
            c.ct.data[idx] += static_cast<float>(spec.ct_noise_sigma * rng.normal());
        }
    }
    return c;
}

inline std::string case_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom_%04zu", i);
    return buf;
}

inline ManifestRow manifest_row(const Case& c) {
    ManifestRow row{c.id, 0, 0.0};
    if (!c.label) return row;
    std::size_t voxels = 0;
    for (float v : c.label->data) voxels += v > 0.5f;
    row.lesion_ml = static_cast<double>(voxels) * c.label->voxel_volume_mm3() / 1000.0;
    return row;
}

/// `n_cases` phantoms with ids phantom_0000...; when `spec.lesion_count` allows zero
/// lesions, odd-indexed cases are lesion-free and even-indexed ones carry at
/// least one lesion.
inline std::vector<Case> generate_dataset(const PhantomSpec& spec, std::size_t n_cases, std::uint64_t seed,
                                          std::vector<ManifestRow>* manifest = nullptr) {
    if (n_cases < 1) throw ValueError("generate_dataset: n_cases must be >= 1");
    spec.validate();
    std::vector<Case> cases;
    cases.reserve(n_cases);
    for (std::size_t i = 0; i < n_cases; ++i) {
        const std::uint64_t case_seed = Rng::mix(seed, i);
        int lesions = -1;
        if (spec.lesion_count.lo == 0 && spec.lesion_count.hi > 0) {
            Rng pick(Rng::mix(case_seed, 0xC0));
            lesions = (i % 2 == 1) ? 0 : static_cast<int>(pick.integer(1, spec.lesion_count.hi));
        }
        int placed = 0;
        Case c = generate_case(spec, case_seed, case_id(i), lesions, &placed);
        if (manifest) {
            ManifestRow row = manifest_row(c);
            row.lesion_count = placed;
            manifest->push_back(row);
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

inline std::filesystem::path case_file(const std::filesystem::path& dir, const std::string& id, const char* suffix) {
    return dir / (id + "_" + suffix + ".nii");
}

inline void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", r.lesion_ml);
        out << r.id << '\t' << r.lesion_count << '\t' << buf << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<ManifestRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) throw FormatError(path.string() + ": bad manifest row");
        rows.push_back({line.substr(0, t1), std::stoi(line.substr(t1 + 1, t2 - t1 - 1)), std::stod(line.substr(t2 + 1))});
    }
    return rows;
}

inline void write_case(const Case& c, const std::filesystem::path& dir) {
    write_nifti(c.ct, case_file(dir, c.id, "ct"));
    write_nifti(c.pet, case_file(dir, c.id, "pet"));
    if (c.label) write_nifti(*c.label, case_file(dir, c.id, "label"));
}

inline Case read_case(const std::filesystem::path& dir, const std::string& id) {
    Case c;
    c.id = id;
    c.ct = read_nifti(case_file(dir, id, "ct"));
    c.ct.modality = Modality::CT;
    c.pet = read_nifti(case_file(dir, id, "pet"));
    c.pet.modality = Modality::PET;
    const auto label = case_file(dir, id, "label");
    if (std::filesystem::exists(label)) {
        c.label = read_nifti(label);
        c.label->modality = Modality::MASK;
    }
    c.validate();
    return c;
}

/// Reads every case listed in DIR/manifest.tsv.
inline std::vector<Case> read_dataset(const std::filesystem::path& dir) {
    std::vector<Case> cases;
    for (const auto& row : read_manifest(dir / "manifest.tsv")) cases.push_back(read_case(dir, row.id));
    return cases;
}

}  // namespace l2s
