#pragma once

// Configurable U-Nets for both phases: a 2D net over PET slices (batch norm)
// and a 3D net over PET+CT patches (layer norm).
//
// Encoder level l: [conv3 -> norm -> relu] x2, then 2x max-pool except at the
// deepest level. Decoder level l (deepest-1 down to 0): upsample x2, concat
// the encoder skip, [conv3 -> norm -> relu] x2. Head: 1x1 conv + sigmoid.
// Convolutions feeding a norm carry no bias (the norm's shift subsumes it).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/random.hpp"
#include "l2s/tensor.hpp"

namespace l2s {

/// Decoder widths of the full-scale 2D localization net, stage 1 to 5.
inline constexpr std::array<int, 5> kReferenceDecoderChannels2d{320, 256, 128, 64, 32};

struct UNetConfig {
    int rank = 2;
    int in_channels = 1;
    int levels = 3;
    std::vector<int> channels{8, 16, 32};
    NormKind norm = NormKind::batch;

    static UNetConfig default_2d() { return {2, 1, 3, {8, 16, 32}, NormKind::batch}; }
    static UNetConfig default_3d() { return {3, 2, 4, {8, 16, 32, 32}, NormKind::layer}; }

    /// Spatial extents fed to forward() must be multiples of this.
    std::size_t divisor() const { return std::size_t{1} << (levels - 1); }

    void validate() const {
        if (rank != 2 && rank != 3) throw ConfigError("unet: rank must be 2 or 3");
        if (in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
        if (levels < 1) throw ConfigError("unet: levels must be >= 1");
        if (static_cast<int>(channels.size()) != levels) {
            throw ConfigError("unet: channels list has " + std::to_string(channels.size()) + " entries, levels is " +
                              std::to_string(levels));
        }
        for (int c : channels) {
            if (c < 1) throw ConfigError("unet: channel counts must be > 0");
        }
    }

    bool operator==(const UNetConfig&) const = default;
};

enum class Mode { train, eval };

template <class T>
class Model {
public:
    Model() = default;
    explicit Model(UNetConfig cfg) : config_(std::move(cfg)) {}

    const UNetConfig& config() const { return config_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    std::map<std::string, RunningStats<T>>& running_stats() { return stats_; }
    const std::map<std::string, RunningStats<T>>& running_stats() const { return stats_; }
    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    /// (batch, in_channels, spatial...) -> (batch, 1, spatial...) in (0, 1).
    /// Eval mode records no graph and uses running statistics.
    Tensor<T> forward(const Tensor<T>& batch) {
        const std::size_t want_rank = static_cast<std::size_t>(config_.rank) + 2;
        if (batch.rank() != want_rank) {
            throw ShapeError("forward: expected rank-" + std::to_string(want_rank) + " input, got " +
                             to_string(batch.shape()));
        }
        if (batch.dim(1) != static_cast<std::size_t>(config_.in_channels)) {
            throw ShapeError("forward: expected " + std::to_string(config_.in_channels) + " input channels, got " +
                             std::to_string(batch.dim(1)));
        }
        const std::size_t div = config_.divisor();
        for (std::size_t a = 2; a < batch.rank(); ++a) {
            if (batch.dim(a) % div != 0) {
                throw ShapeError("forward: spatial extent " + std::to_string(batch.dim(a)) + " must be divisible by " +
                                 std::to_string(div) + " (2^(levels-1)) for a " + std::to_string(config_.levels) +
                                 "-level U-Net; input shape " + to_string(batch.shape()));
            }
        }
        if (mode_ == Mode::eval) {
            NoGradGuard guard;
            return run(batch);
        }
        return run(batch);
    }

    // Used by build_unet and checkpoint loading.
    void register_block(const std::string& prefix, int in_ch, int out_ch, std::size_t k) {
        Shape w{static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch)};
        for (int i = 0; i < config_.rank; ++i) w.push_back(k);
        params_.add(prefix + ".weight", Tensor<T>::zeros(w, true));
    }
    void register_norm(const std::string& prefix, int ch) {
        params_.add(prefix + ".gain", Tensor<T>::full({static_cast<std::size_t>(ch)}, T(1), true));
        params_.add(prefix + ".bias", Tensor<T>::zeros({static_cast<std::size_t>(ch)}, true));
        if (config_.norm == NormKind::batch) stats_.emplace(prefix, RunningStats<T>(static_cast<std::size_t>(ch)));
    }

private:
    Tensor<T> block(const Tensor<T>& x, const std::string& prefix) {
        const bool training = mode_ == Mode::train;
        Tensor<T> y = x;
        for (int j = 0; j < 2; ++j) {
            const std::string p = prefix + ".conv" + std::to_string(j);
            const std::string n = prefix + ".norm" + std::to_string(j);
            y = conv(y, params_.at(p + ".weight"));
            RunningStats<T>* rs = nullptr;
            if (auto it = stats_.find(n); it != stats_.end()) rs = &it->second;
            y = normalize(y, config_.norm, params_.at(n + ".gain"), params_.at(n + ".bias"), T(1e-5), rs, training);
            y = relu(y);
        }
        return y;
    }

    Tensor<T> run(const Tensor<T>& x) {
        const int L = config_.levels;
        std::vector<Tensor<T>> skips;
        Tensor<T> y = x;
        for (int l = 0; l < L; ++l) {
            y = block(y, "enc" + std::to_string(l));
            if (l < L - 1) {
                skips.push_back(y);
                y = pool_max(y, 2);
            }
        }
        for (int l = L - 2; l >= 0; --l) {
            y = upsample_linear(y, 2);
            y = concat_channels(y, skips[static_cast<std::size_t>(l)]);
            y = block(y, "dec" + std::to_string(l));
        }
        y = conv(y, params_.at("head.weight"), params_.at("head.bias"));
        return sigmoid(y);
    }

    UNetConfig config_;
    ParamSet<T> params_;
    std::map<std::string, RunningStats<T>> stats_;
    Mode mode_ = Mode::train;
};

/// Parameter layout only (zeros); used by build_unet and checkpoint loading.
template <class T>
Model<T> unet_skeleton(const UNetConfig& cfg) {
    cfg.validate();
    Model<T> m(cfg);
    const int L = cfg.levels;
    int in_ch = cfg.in_channels;
    for (int l = 0; l < L; ++l) {
        const std::string p = "enc" + std::to_string(l);
        m.register_block(p + ".conv0", in_ch, cfg.channels[l], 3);
        m.register_norm(p + ".norm0", cfg.channels[l]);
        m.register_block(p + ".conv1", cfg.channels[l], cfg.channels[l], 3);
        m.register_norm(p + ".norm1", cfg.channels[l]);
        in_ch = cfg.channels[l];
    }
    for (int l = L - 2; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        m.register_block(p + ".conv0", in_ch + cfg.channels[l], cfg.channels[l], 3);
        m.register_norm(p + ".norm0", cfg.channels[l]);
        m.register_block(p + ".conv1", cfg.channels[l], cfg.channels[l], 3);
        m.register_norm(p + ".norm1", cfg.channels[l]);
        in_ch = cfg.channels[l];
    }
    m.register_block("head", in_ch, 1, 1);
    m.params().add("head.bias", Tensor<T>::zeros({1}, true));
    return m;
}

/// U-Net with He-uniform weights drawn from `seed`; norm gains 1, biases 0.
template <class T>
Model<T> build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    Model<T> m = unet_skeleton<T>(cfg);
    Rng rng(seed);
    for (auto& [name, t] : m.params()) {
        if (t.rank() < 3) continue;  // gains and biases keep their defaults
        std::size_t fan_in = 1;
        for (std::size_t a = 1; a < t.rank(); ++a) fan_in *= t.dim(a);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (T& w : t.data_mut()) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: "L2SCKPT1", config echo, then named float32 blobs; all
// integers are little-endian uint32. Running statistics are stored as
// "<norm>.running_mean" / "<norm>.running_var".

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

class ByteReader {
public:
    ByteReader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw FormatError(source_ + ": truncated checkpoint");
    }
    std::string bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline void put_blob(std::string& out, const std::string& name, const Shape& shape, const auto& values) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : values) put_f32(out, static_cast<float>(v));
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'L', '2', 'S', 'C', 'K', 'P', 'T', '1'};

template <class T>
std::string encode_checkpoint(const Model<T>& m) {
    std::string out(kCheckpointMagic, 8);
    const auto& c = m.config();
    detail::put_u32(out, static_cast<std::uint32_t>(c.rank));
    detail::put_u32(out, static_cast<std::uint32_t>(c.in_channels));
    detail::put_u32(out, static_cast<std::uint32_t>(c.levels));
    detail::put_u32(out, c.norm == NormKind::batch ? 0u : 1u);
    detail::put_u32(out, static_cast<std::uint32_t>(c.channels.size()));
    for (int ch : c.channels) detail::put_u32(out, static_cast<std::uint32_t>(ch));
    detail::put_u32(out, static_cast<std::uint32_t>(m.params().size() + 2 * m.running_stats().size()));
    for (const auto& [name, t] : m.params()) detail::put_blob(out, name, t.shape(), t.data());
    for (const auto& [name, rs] : m.running_stats()) {
        detail::put_blob(out, name + ".running_mean", Shape{rs.mean.size()}, rs.mean);
        detail::put_blob(out, name + ".running_var", Shape{rs.var.size()}, rs.var);
    }
    return out;
}

/// Decodes a checkpoint; when `expected` is given, a differing stored config is rejected.
template <class T>
Model<T> decode_checkpoint(std::string bytes, const std::string& source = "<memory>",
                           const UNetConfig* expected = nullptr) {
    detail::ByteReader r(std::move(bytes), source);
    if (r.str(8) != std::string(kCheckpointMagic, 8)) throw FormatError(source + ": not an l2s checkpoint");
    UNetConfig cfg;
    cfg.rank = static_cast<int>(r.u32());
    cfg.in_channels = static_cast<int>(r.u32());
    cfg.levels = static_cast<int>(r.u32());
    cfg.norm = r.u32() == 0 ? NormKind::batch : NormKind::layer;
    const std::uint32_t nch = r.u32();
    if (nch > 64) throw FormatError(source + ": implausible channel list length");
    cfg.channels.resize(nch);
    for (auto& ch : cfg.channels) ch = static_cast<int>(r.u32());
    if (expected && !(*expected == cfg)) {
        throw ConfigError(source + ": checkpoint config does not match the requested model config");
    }
    Model<T> m = unet_skeleton<T>(cfg);
    const std::uint32_t blobs = r.u32();
    if (blobs != m.params().size() + 2 * m.running_stats().size()) {
        throw FormatError(source + ": blob count " + std::to_string(blobs) + " does not match config");
    }
    for (std::uint32_t b = 0; b < blobs; ++b) {
        const std::string name = r.str(r.u32());
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u32();
        std::vector<T> values(numel(shape));
        for (auto& v : values) v = static_cast<T>(r.f32());
        if (m.params().contains(name)) {
            auto& t = m.params().at(name);
            if (t.shape() != shape) throw FormatError(source + ": parameter '" + name + "' has shape " + to_string(shape));
            std::copy(values.begin(), values.end(), t.data_mut().begin());
            continue;
        }
        const auto dot = name.rfind('.');
        auto it = dot == std::string::npos ? m.running_stats().end() : m.running_stats().find(name.substr(0, dot));
        if (it == m.running_stats().end() || values.size() != it->second.mean.size()) {
            throw FormatError(source + ": unexpected blob '" + name + "'");
        }
        const std::string field = name.substr(dot + 1);
        if (field == "running_mean") {
            it->second.mean = values;
        } else if (field == "running_var") {
            it->second.var = values;
        } else {
            throw FormatError(source + ": unexpected blob '" + name + "'");
        }
    }
    if (!r.done()) throw FormatError(source + ": trailing bytes after last blob");
    return m;
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& path) {
    const std::string bytes = encode_checkpoint(m);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path, const UNetConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(std::move(bytes), path.string(), expected);
}

}  // namespace l2s
