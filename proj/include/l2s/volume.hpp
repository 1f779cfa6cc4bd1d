#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "l2s/error.hpp"

namespace l2s {

enum class Modality { CT, PET, MASK, PROB };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::PET: return "PET";
        case Modality::MASK: return "MASK";
        case Modality::PROB: return "PROB";
    }
    return "?";
}

inline std::optional<Modality> parse_modality(const std::string& s) {
    if (s == "CT") return Modality::CT;
    if (s == "PET") return Modality::PET;
    if (s == "MASK") return Modality::MASK;
    if (s == "PROB") return Modality::PROB;
    return std::nullopt;
}

using Index3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

inline std::string to_string(const Index3& s) {
    return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + ")";
}

/// NIfTI orientation fields carried through read/write without interpretation.
struct Orientation {
    short qform_code = 0;
    short sform_code = 0;
    std::array<float, 6> quatern{};  // b, c, d, qoffset x, y, z
    std::array<float, 12> srow{};    // srow_x, srow_y, srow_z
    bool present = false;            // false: the writer derives a diagonal sform from spacing
};

/// 3D scalar grid, row-major over (axis0, axis1, axis2).
struct Volume {
    Index3 shape{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<float> data;
    Modality modality = Modality::CT;
    Orientation orientation;

    Volume() = default;
    Volume(Index3 shape, Spacing3 spacing, Modality modality, float fill = 0.0f)
        : shape(shape), spacing(spacing), data(shape[0] * shape[1] * shape[2], fill), modality(modality) {}

    std::size_t size() const { return shape[0] * shape[1] * shape[2]; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * shape[1] + j) * shape[2] + k; }
    float& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
    float at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }
    double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

    /// Throws when the modality's value constraints or the storage size are violated.
    void validate() const {
        if (data.size() != size()) {
            throw ShapeError("volume data length " + std::to_string(data.size()) + " does not match shape " +
                             to_string(shape));
        }
        for (double s : spacing) {
            if (!(s > 0.0)) throw ValueError("volume spacing must be strictly positive");
        }
        if (modality == Modality::MASK) {
            for (float v : data) {
                if (v != 0.0f && v != 1.0f) throw ValueError("MASK volume contains a value outside {0,1}");
            }
        } else if (modality == Modality::PROB) {
            for (float v : data) {
                if (!(v >= 0.0f && v <= 1.0f)) throw ValueError("PROB volume contains a value outside [0,1]");
            }
        }
    }

    bool same_grid(const Volume& o) const { return shape == o.shape && spacing == o.spacing; }
};

/// One subject: aligned CT, PET and an optional ground-truth mask.
struct Case {
    std::string id;
    Volume ct;
    Volume pet;
    std::optional<Volume> label;

    void validate() const {
        if (!ct.same_grid(pet)) throw ShapeError("case " + id + ": CT and PET grids differ");
        if (label && !label->same_grid(ct)) throw ShapeError("case " + id + ": label grid differs from CT");
    }
};

/// Phase-1 output assembled from 2D slice predictions; a PROB volume.
struct LocationCue {
    Volume cue;
};

inline void require_aligned(const Volume& a, const Volume& b, const std::string& what) {
    if (a.shape != b.shape) {
        throw ShapeError(what + ": shape " + to_string(a.shape) + " does not match " + to_string(b.shape));
    }
}

/// clamp((x - lo) / (hi - lo), 0, 1), modality preserved.
inline Volume window_scale(const Volume& v, double lo, double hi) {
    if (!(hi > lo)) throw ValueError("window_scale: hi must exceed lo");
    Volume out = v;
    const double inv = 1.0 / (hi - lo);
    for (float& x : out.data) x = static_cast<float>(std::clamp((static_cast<double>(x) - lo) * inv, 0.0, 1.0));
    return out;
}

/// A 2D section of a volume, row-major.
struct Slice2D {
    std::size_t rows = 0, cols = 0;
    std::vector<float> data;

    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    bool operator==(const Slice2D&) const = default;
};

namespace detail {
inline void check_axis(int axis) {
    if (axis < 0 || axis > 2) throw ValueError("axis " + std::to_string(axis) + " out of range {0,1,2}");
}
// The two axes that remain after slicing along `axis`, in increasing order.
inline std::array<int, 2> remaining_axes(int axis) {
    return axis == 0 ? std::array<int, 2>{1, 2} : axis == 1 ? std::array<int, 2>{0, 2} : std::array<int, 2>{0, 1};
}
}  // namespace detail

/// Sections of `v` along `axis`, in increasing index order.
inline std::vector<Slice2D> slice_stack(const Volume& v, int axis) {
    detail::check_axis(axis);
    const auto [ra, rb] = detail::remaining_axes(axis);
    std::vector<Slice2D> out(v.shape[axis]);
    for (std::size_t s = 0; s < v.shape[axis]; ++s) {
        Slice2D& sl = out[s];
        sl.rows = v.shape[ra];
        sl.cols = v.shape[rb];
        sl.data.resize(sl.rows * sl.cols);
        for (std::size_t r = 0; r < sl.rows; ++r)
            for (std::size_t c = 0; c < sl.cols; ++c) {
                Index3 idx{};
                idx[axis] = s;
                idx[ra] = r;
                idx[rb] = c;
                sl.data[r * sl.cols + c] = v.at(idx[0], idx[1], idx[2]);
            }
    }
    return out;
}

/// Reassembles slices along `axis` into a volume of the given modality.
inline Volume stack_slices(const std::vector<Slice2D>& slices, int axis, const Spacing3& spacing, Modality modality) {
    detail::check_axis(axis);
    if (slices.empty()) throw ShapeError("stack_slices: no slices");
    const std::size_t rows = slices[0].rows, cols = slices[0].cols;
    for (std::size_t s = 0; s < slices.size(); ++s) {
        if (slices[s].rows != rows || slices[s].cols != cols || slices[s].data.size() != rows * cols) {
            throw ShapeError("stack_slices: slice " + std::to_string(s) + " is " + std::to_string(slices[s].rows) +
                             "x" + std::to_string(slices[s].cols) + ", expected " + std::to_string(rows) + "x" +
                             std::to_string(cols));
        }
    }
    const auto [ra, rb] = detail::remaining_axes(axis);
    Index3 shape{};
    shape[axis] = slices.size();
    shape[ra] = rows;
    shape[rb] = cols;
    Volume v(shape, spacing, modality);
    for (std::size_t s = 0; s < slices.size(); ++s)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                Index3 idx{};
                idx[axis] = s;
                idx[ra] = r;
                idx[rb] = c;
                v.at(idx[0], idx[1], idx[2]) = slices[s].data[r * cols + c];
            }
    return v;
}

/// Inverse of slice_stack for probability slices.
inline LocationCue stack_to_cue(const std::vector<Slice2D>& slices, int axis, const Spacing3& spacing) {
    for (std::size_t s = 0; s < slices.size(); ++s) {
        for (float x : slices[s].data) {
            if (!(x >= 0.0f && x <= 1.0f)) {
                throw ValueError("stack_to_cue: slice " + std::to_string(s) + " has a value outside [0,1]");
            }
        }
    }
    return LocationCue{stack_slices(slices, axis, spacing, Modality::PROB)};
}

/// Contiguous sub-volume starting at `origin`.
inline Volume extract_patch(const Volume& v, const Index3& origin, const Index3& size) {
    for (int a = 0; a < 3; ++a) {
        if (size[a] == 0 || origin[a] + size[a] > v.shape[a]) {
            throw ShapeError("extract_patch: axis " + std::to_string(a) + " window [" + std::to_string(origin[a]) +
                             ", " + std::to_string(origin[a] + size[a]) + ") exceeds extent " +
                             std::to_string(v.shape[a]));
        }
    }
    Volume out(size, v.spacing, v.modality);
    for (std::size_t i = 0; i < size[0]; ++i)
        for (std::size_t j = 0; j < size[1]; ++j) {
            const float* src = &v.data[v.index(origin[0] + i, origin[1] + j, origin[2])];
            std::copy_n(src, size[2], &out.data[out.index(i, j, 0)]);
        }
    return out;
}

/// Zero-pads at the high end of every axis up to at least `min_shape`.
inline Volume pad_to(const Volume& v, const Index3& min_shape) {
    Index3 shape{std::max(v.shape[0], min_shape[0]), std::max(v.shape[1], min_shape[1]),
                 std::max(v.shape[2], min_shape[2])};
    if (shape == v.shape) return v;
    Volume out(shape, v.spacing, v.modality);
    out.orientation = v.orientation;
    for (std::size_t i = 0; i < v.shape[0]; ++i)
        for (std::size_t j = 0; j < v.shape[1]; ++j)
            std::copy_n(&v.data[v.index(i, j, 0)], v.shape[2], &out.data[out.index(i, j, 0)]);
    return out;
}

/// Window origins along one axis: 0, stride, 2*stride, ... plus a final
/// origin clamped to extent - patch so the last window touches the boundary.
inline std::vector<std::size_t> axis_positions(std::size_t extent, std::size_t patch, std::size_t stride) {
    if (patch == 0 || patch > extent) {
        throw ShapeError("tile_positions: patch " + std::to_string(patch) + " exceeds extent " +
                         std::to_string(extent));
    }
    if (stride < 1 || stride > patch) {
        throw ValueError("tile_positions: stride must be in [1, patch], got " + std::to_string(stride));
    }
    std::vector<std::size_t> out;
    for (std::size_t o = 0; o + patch <= extent; o += stride) out.push_back(o);
    if (out.back() != extent - patch) out.push_back(extent - patch);
    return out;
}

/// Sliding-window origins covering every voxel; sorted, no duplicates.
inline std::vector<Index3> tile_positions(const Index3& shape, const Index3& patch, const Index3& stride) {
    std::array<std::vector<std::size_t>, 3> axes;
    for (int a = 0; a < 3; ++a) axes[a] = axis_positions(shape[a], patch[a], stride[a]);
    std::vector<Index3> out;
    out.reserve(axes[0].size() * axes[1].size() * axes[2].size());
    for (std::size_t i : axes[0])
        for (std::size_t j : axes[1])
            for (std::size_t k : axes[2]) out.push_back({i, j, k});
    return out;
}

}  // namespace l2s
