#pragma once

// NIfTI-1 single-file (.nii) subset: uncompressed, little-endian, float32 or
// uint8 voxels. The 348-byte header is followed by a 4-byte empty extension
// block so voxel data starts at offset 352.
//
// Voxel order in the file is NIfTI's (dim[1] fastest); a Volume with shape
// (d0, d1, d2) is stored with dim = [3, d0, d1, d2] and transposed on the way
// in and out. The modality tag travels in the `descrip` field.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/volume.hpp"

namespace l2s::nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;
inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kFloat32 = 16;

namespace detail {

template <class T>
void put(std::vector<unsigned char>& buf, std::size_t off, T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                                 std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[off + i] = static_cast<unsigned char>(bits >> (8 * i));
}

template <class T>
T get(const unsigned char* buf, std::size_t off) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                                 std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(buf[off + i]) << (8 * i));
    return std::bit_cast<T>(bits);
}

inline std::size_t file_index(const Index3& shape, std::size_t i, std::size_t j, std::size_t k) {
    return i + shape[0] * (j + shape[1] * k);
}

}  // namespace detail

/// Encodes a volume as the bytes of a .nii file. MASK volumes are stored as
/// uint8, everything else as float32.
inline std::vector<unsigned char> encode(const Volume& v) {
    v.validate();
    const bool as_u8 = v.modality == Modality::MASK;
    const std::size_t bytes_per = as_u8 ? 1 : 4;
    std::vector<unsigned char> buf(kVoxOffset + v.size() * bytes_per, 0);
    using detail::put;

    put<std::int32_t>(buf, 0, static_cast<std::int32_t>(kHeaderSize));
    put<char>(buf, 38, 'r');  // regular
    const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(v.shape[0]),
                                          static_cast<std::int16_t>(v.shape[1]),
                                          static_cast<std::int16_t>(v.shape[2]), 1, 1, 1, 1};
    for (std::size_t i = 0; i < 3; ++i) {
        if (v.shape[i] > 32767) throw UnsupportedFeature("nifti: extent " + std::to_string(v.shape[i]) + " exceeds int16");
    }
    for (std::size_t i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, dim[i]);
    put<std::int16_t>(buf, 70, as_u8 ? kUint8 : kFloat32);
    put<std::int16_t>(buf, 72, static_cast<std::int16_t>(bytes_per * 8));
    const std::array<float, 8> pixdim{1.0f, static_cast<float>(v.spacing[0]), static_cast<float>(v.spacing[1]),
                                      static_cast<float>(v.spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (std::size_t i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pixdim[i]);
    put<float>(buf, 108, static_cast<float>(kVoxOffset));
    put<float>(buf, 112, 0.0f);  // scl_slope: 0 means "no scaling"
    put<float>(buf, 116, 0.0f);
    put<char>(buf, 123, 2);  // xyzt_units: mm

    const std::string descrip = std::string("l2s modality=") + modality_name(v.modality);
    std::memcpy(buf.data() + 148, descrip.data(), std::min<std::size_t>(descrip.size(), 79));

    Orientation o = v.orientation;
    if (!o.present) {
        o.sform_code = 1;
        o.srow = {static_cast<float>(v.spacing[0]), 0, 0, 0, 0, static_cast<float>(v.spacing[1]), 0, 0,
                  0, 0, static_cast<float>(v.spacing[2]), 0};
    }
    put<std::int16_t>(buf, 252, o.qform_code);
    put<std::int16_t>(buf, 254, o.sform_code);
    for (std::size_t i = 0; i < 6; ++i) put<float>(buf, 256 + 4 * i, o.quatern[i]);
    for (std::size_t i = 0; i < 12; ++i) put<float>(buf, 280 + 4 * i, o.srow[i]);
    std::memcpy(buf.data() + 344, "n+1\0", 4);

    for (std::size_t i = 0; i < v.shape[0]; ++i)
        for (std::size_t j = 0; j < v.shape[1]; ++j)
            for (std::size_t k = 0; k < v.shape[2]; ++k) {
                const std::size_t f = detail::file_index(v.shape, i, j, k);
                const float x = v.at(i, j, k);
                if (as_u8) {
                    buf[kVoxOffset + f] = static_cast<unsigned char>(x);
                } else {
                    put<float>(buf, kVoxOffset + 4 * f, x);
                }
            }
    return buf;
}

/// Decodes .nii bytes. `source` names the input in error messages.
inline Volume decode(const std::vector<unsigned char>& buf, const std::string& source = "<memory>") {
    using detail::get;
    if (buf.size() >= 2 && buf[0] == 0x1f && buf[1] == 0x8b) {
        throw UnsupportedFeature(source + ": compression=gzip (only uncompressed .nii is supported)");
    }
    if (buf.size() < kHeaderSize) throw FormatError(source + ": file shorter than a NIfTI-1 header");
    const unsigned char* h = buf.data();
    const std::int32_t sizeof_hdr = get<std::int32_t>(h, 0);
    if (sizeof_hdr != static_cast<std::int32_t>(kHeaderSize)) {
        if (sizeof_hdr == 0x5C010000) throw UnsupportedFeature(source + ": endianness=big");
        throw FormatError(source + ": sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
    }
    if (std::memcmp(h + 344, "n+1\0", 4) != 0) {
        if (std::memcmp(h + 344, "ni1\0", 4) == 0) {
            throw UnsupportedFeature(source + ": magic=ni1 (two-file .hdr/.img pairs are not supported)");
        }
        throw FormatError(source + ": bad magic (expected \"n+1\")");
    }
    const std::int16_t ndim = get<std::int16_t>(h, 40);
    if (ndim < 1 || ndim > 7) throw FormatError(source + ": dim[0]=" + std::to_string(ndim) + " out of range");
    Index3 shape{1, 1, 1};
    for (int i = 1; i <= ndim; ++i) {
        const std::int16_t d = get<std::int16_t>(h, 40 + 2 * i);
        if (d < 1) throw FormatError(source + ": dim[" + std::to_string(i) + "]=" + std::to_string(d));
        if (i <= 3) {
            shape[i - 1] = static_cast<std::size_t>(d);
        } else if (d != 1) {
            throw UnsupportedFeature(source + ": dim[" + std::to_string(i) + "]=" + std::to_string(d) +
                                     " (only 3D volumes are supported)");
        }
    }
    const std::int16_t datatype = get<std::int16_t>(h, 70);
    if (datatype != kUint8 && datatype != kFloat32) {
        throw UnsupportedFeature(source + ": datatype=" + std::to_string(datatype) +
                                 " (supported: 2=uint8, 16=float32)");
    }
    Spacing3 spacing{};
    for (int i = 0; i < 3; ++i) {
        const float p = get<float>(h, 76 + 4 * (i + 1));
        spacing[i] = (i < ndim && p > 0.0f) ? static_cast<double>(p) : 1.0;
    }
    const float vox_offset = get<float>(h, 108);
    const float slope = get<float>(h, 112);
    const float inter = get<float>(h, 116);

    std::string descrip(reinterpret_cast<const char*>(h + 148), 80);
    descrip = descrip.substr(0, descrip.find('\0'));
    Modality modality = datatype == kUint8 ? Modality::MASK : Modality::CT;
    if (auto pos = descrip.find("modality="); pos != std::string::npos) {
        auto m = parse_modality(descrip.substr(pos + 9, descrip.find(' ', pos + 9) - (pos + 9)));
        if (m) modality = *m;
    }

    const std::size_t offset = static_cast<std::size_t>(vox_offset);
    const std::size_t bytes_per = datatype == kUint8 ? 1 : 4;
    Volume v(shape, spacing, modality);
    if (offset < kHeaderSize || buf.size() < offset + v.size() * bytes_per) {
        throw FormatError(source + ": truncated voxel data");
    }
    v.orientation.present = true;
    v.orientation.qform_code = get<std::int16_t>(h, 252);
    v.orientation.sform_code = get<std::int16_t>(h, 254);
    for (std::size_t i = 0; i < 6; ++i) v.orientation.quatern[i] = get<float>(h, 256 + 4 * i);
    for (std::size_t i = 0; i < 12; ++i) v.orientation.srow[i] = get<float>(h, 280 + 4 * i);

    const bool scaled = slope != 0.0f;
    for (std::size_t i = 0; i < shape[0]; ++i)
        for (std::size_t j = 0; j < shape[1]; ++j)
            for (std::size_t k = 0; k < shape[2]; ++k) {
                const std::size_t f = detail::file_index(shape, i, j, k);
                float x = datatype == kUint8 ? static_cast<float>(buf[offset + f]) : get<float>(h, offset + 4 * f);
                if (scaled) x = slope * x + inter;
                v.at(i, j, k) = x;
            }
    return v;
}

inline Volume read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(buf, path.string());
}

/// Writes through a temporary file and renames, so a failed write leaves no partial output.
inline void write(const Volume& v, const std::filesystem::path& path) {
    const auto bytes = encode(v);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace l2s::nifti

namespace l2s {

inline Volume read_nifti(const std::filesystem::path& path) { return nifti::read(path); }
inline void write_nifti(const Volume& v, const std::filesystem::path& path) { nifti::write(v, path); }

}  // namespace l2s
