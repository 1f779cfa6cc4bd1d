#pragma once

// Run configuration in a TOML subset:
//
//   # comment
//   [section]
//   key = 12            integer
//   key = 0.5           float (integers are accepted too)
//   key = true          boolean
//   key = "text"        string, escapes \" \\ \n \t
//   key = [1, 2, 3]     flat array on one line
//
// Every field has a default; unknown sections, unknown keys and repeated keys
// are errors. echo() writes every field back in a fixed order, and
// parsing that text reproduces the same configuration.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "l2s/error.hpp"
#include "l2s/metrics.hpp"
#include "l2s/phantom.hpp"
#include "l2s/pipeline.hpp"

namespace l2s {

struct MetricsConfig {
    int connectivity = 26;
    int folds = 5;
    std::uint64_t fold_seed = 7;

    void validate() const {
        if (connectivity != 6 && connectivity != 18 && connectivity != 26) {
            throw ConfigError("metrics: connectivity must be 6, 18 or 26");
        }
        if (folds < 2) throw ConfigError("metrics: folds must be >= 2");
    }
};

struct PathsConfig {
    std::string data;  // default dataset directory for subcommands that read one
    std::string out;

    void validate() const {}
};

struct RunConfig {
    PhantomSpec phantom;
    int cases = 40;
    PreprocessConfig preprocess;
    LossConfig loss;
    Phase1Config phase1;
    Phase2Config phase2;
    FusionConfig fusion;
    InferenceConfig inference;
    MetricsConfig metrics;
    PathsConfig paths;

    /// Copies the shared [loss] settings into both phases and checks everything.
    void finalize() {
        phase1.loss = loss;
        phase2.loss = loss;
        validate();
    }

    void validate() const {
        phantom.validate();
        if (cases < 1) throw ConfigError("phantom: cases must be >= 1");
        preprocess.validate();
        loss.validate();
        phase1.validate();
        phase2.validate();
        fusion.validate();
        inference.validate();
        metrics.validate();
        paths.validate();
    }
};

namespace config {

struct Value;
using Array = std::vector<Value>;
struct Value {
    std::variant<bool, long long, double, std::string, Array> v;
};

namespace detail {

inline std::string describe(const Value& v) {
    switch (v.v.index()) {
        case 0: return "a boolean";
        case 1: return "an integer";
        case 2: return "a float";
        case 3: return "a string";
        default: return "an array";
    }
}

inline long long as_int(const Value& v, const std::string& where) {
    if (auto p = std::get_if<long long>(&v.v)) return *p;
    throw ConfigError(where + ": expected an integer, got " + describe(v));
}

inline double as_double(const Value& v, const std::string& where) {
    if (auto p = std::get_if<long long>(&v.v)) return static_cast<double>(*p);
    if (auto p = std::get_if<double>(&v.v)) return *p;
    throw ConfigError(where + ": expected a number, got " + describe(v));
}

inline bool as_bool(const Value& v, const std::string& where) {
    if (auto p = std::get_if<bool>(&v.v)) return *p;
    throw ConfigError(where + ": expected true or false, got " + describe(v));
}

inline const std::string& as_string(const Value& v, const std::string& where) {
    if (auto p = std::get_if<std::string>(&v.v)) return *p;
    throw ConfigError(where + ": expected a string, got " + describe(v));
}

inline const Array& as_array(const Value& v, const std::string& where, std::size_t want = 0) {
    auto p = std::get_if<Array>(&v.v);
    if (!p) throw ConfigError(where + ": expected an array, got " + describe(v));
    if (want && p->size() != want) {
        throw ConfigError(where + ": expected " + std::to_string(want) + " elements, got " + std::to_string(p->size()));
    }
    return *p;
}

inline std::string fmt_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    std::string s(buf, end);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

inline std::string fmt_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out += c;
        }
    }
    return out + "\"";
}

}  // namespace detail

struct Field {
    std::string section, key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const Value&, const std::string&)> set;
};

namespace detail {

template <class Ref>
Field int_field(std::string s, std::string k, Ref ref) {
    return {s, k, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                const long long x = as_int(v, w);
                using T = std::remove_reference_t<decltype(ref(c))>;
                if constexpr (std::is_unsigned_v<T>) {
                    if (x < 0) throw ConfigError(w + ": must be >= 0");
                }
                ref(c) = static_cast<T>(x);
            }};
}

template <class Ref>
Field real_field(std::string s, std::string k, Ref ref) {
    return {s, k, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
            [ref](RunConfig& c, const Value& v, const std::string& w) { ref(c) = as_double(v, w); }};
}

template <class Ref>
Field bool_field(std::string s, std::string k, Ref ref) {
    return {s, k, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
            [ref](RunConfig& c, const Value& v, const std::string& w) { ref(c) = as_bool(v, w); }};
}

template <class Ref>
Field string_field(std::string s, std::string k, Ref ref) {
    return {s, k, [ref](const RunConfig& c) { return fmt_string(ref(const_cast<RunConfig&>(c))); },
            [ref](RunConfig& c, const Value& v, const std::string& w) { ref(c) = as_string(v, w); }};
}

// Fixed-length array of sizes (Index3, crop).
template <class Ref>
Field size_array_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                const auto& a = ref(const_cast<RunConfig&>(c));
                std::string out = "[";
                for (std::size_t i = 0; i < a.size(); ++i) out += (i ? ", " : "") + std::to_string(a[i]);
                return out + "]";
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                auto& a = ref(c);
                const Array& arr = as_array(v, w, a.size());
                for (std::size_t i = 0; i < a.size(); ++i) {
                    const long long x = as_int(arr[i], w);
                    if (x < 0) throw ConfigError(w + ": elements must be >= 0");
                    a[i] = static_cast<std::size_t>(x);
                }
            }};
}

template <class Ref>
Field real3_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                const auto& a = ref(const_cast<RunConfig&>(c));
                return "[" + fmt_double(a[0]) + ", " + fmt_double(a[1]) + ", " + fmt_double(a[2]) + "]";
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                auto& a = ref(c);
                const Array& arr = as_array(v, w, 3);
                for (std::size_t i = 0; i < 3; ++i) a[i] = as_double(arr[i], w);
            }};
}

template <class Ref>
Field range_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                const Range& r = ref(const_cast<RunConfig&>(c));
                return "[" + fmt_double(r.lo) + ", " + fmt_double(r.hi) + "]";
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                const Array& arr = as_array(v, w, 2);
                ref(c) = Range{as_double(arr[0], w), as_double(arr[1], w)};
            }};
}

template <class Ref>
Field int_range_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                const IntRange& r = ref(const_cast<RunConfig&>(c));
                return "[" + std::to_string(r.lo) + ", " + std::to_string(r.hi) + "]";
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                const Array& arr = as_array(v, w, 2);
                ref(c) = IntRange{static_cast<int>(as_int(arr[0], w)), static_cast<int>(as_int(arr[1], w))};
            }};
}

template <class Ref>
Field channels_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                const auto& a = ref(const_cast<RunConfig&>(c));
                std::string out = "[";
                for (std::size_t i = 0; i < a.size(); ++i) out += (i ? ", " : "") + std::to_string(a[i]);
                return out + "]";
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                const Array& arr = as_array(v, w);
                std::vector<int> out;
                for (const Value& x : arr) out.push_back(static_cast<int>(as_int(x, w)));
                ref(c) = std::move(out);
            }};
}

template <class Ref>
Field norm_field(std::string s, std::string k, Ref ref) {
    return {s, k,
            [ref](const RunConfig& c) {
                return fmt_string(ref(const_cast<RunConfig&>(c)) == NormKind::batch ? "batch" : "layer");
            },
            [ref](RunConfig& c, const Value& v, const std::string& w) {
                const std::string& n = as_string(v, w);
                if (n == "batch") {
                    ref(c) = NormKind::batch;
                } else if (n == "layer") {
                    ref(c) = NormKind::layer;
                } else {
                    throw ConfigError(w + ": expected \"batch\" or \"layer\", got \"" + n + "\"");
                }
            }};
}

#define L2S_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

// Keys shared by both training phases.
template <class Phase>
void phase_fields(std::vector<Field>& f, const std::string& s, Phase RunConfig::*phase) {
    auto P = [phase](RunConfig& c) -> Phase& { return c.*phase; };
    f.push_back(int_field(s, "epochs", [P](RunConfig& c) -> int& { return P(c).epochs; }));
    f.push_back(int_field(s, "steps_per_epoch", [P](RunConfig& c) -> int& { return P(c).steps_per_epoch; }));
    f.push_back(int_field(s, "batch", [P](RunConfig& c) -> int& { return P(c).batch; }));
    f.push_back(real_field(s, "alpha0", [P](RunConfig& c) -> double& { return P(c).optimizer.alpha0; }));
    f.push_back(real_field(s, "weight_decay", [P](RunConfig& c) -> double& { return P(c).optimizer.weight_decay; }));
    f.push_back(real_field(s, "momentum", [P](RunConfig& c) -> double& { return P(c).optimizer.momentum; }));
    f.push_back(int_field(s, "seed", [P](RunConfig& c) -> std::uint64_t& { return P(c).seed; }));
    f.push_back(int_field(s, "levels", [P](RunConfig& c) -> int& { return P(c).model.levels; }));
    f.push_back(channels_field(s, "channels", [P](RunConfig& c) -> std::vector<int>& { return P(c).model.channels; }));
    f.push_back(norm_field(s, "norm", [P](RunConfig& c) -> NormKind& { return P(c).model.norm; }));
    f.push_back(real_field(s, "head_prior", [P](RunConfig& c) -> double& { return P(c).head_prior; }));
}

}  // namespace detail

/// All configurable fields, in echo order.
inline const std::vector<Field>& fields() {
    using namespace detail;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        const std::string ph = "phantom";
        f.push_back(int_field(ph, "cases", L2S_REF(cases)));
        f.push_back(int_field(ph, "seed", L2S_REF(phantom.seed)));
        f.push_back(size_array_field(ph, "shape", L2S_REF(phantom.shape)));
        f.push_back(real3_field(ph, "spacing", L2S_REF(phantom.spacing)));
        f.push_back(int_range_field(ph, "lesion_count", L2S_REF(phantom.lesion_count)));
        f.push_back(range_field(ph, "lesion_radius_mm", L2S_REF(phantom.lesion_radius_mm)));
        f.push_back(range_field(ph, "lesion_uptake", L2S_REF(phantom.lesion_uptake)));
        f.push_back(int_range_field(ph, "decoy_count", L2S_REF(phantom.decoy_count)));
        f.push_back(range_field(ph, "decoy_radius_mm", L2S_REF(phantom.decoy_radius_mm)));
        f.push_back(range_field(ph, "decoy_uptake", L2S_REF(phantom.decoy_uptake)));
        f.push_back(real_field(ph, "background_uptake", L2S_REF(phantom.background_uptake)));
        f.push_back(range_field(ph, "ct_tissue_hu", L2S_REF(phantom.ct_tissue_hu)));
        f.push_back(real_field(ph, "decoy_ct_hu", L2S_REF(phantom.decoy_ct_hu)));
        f.push_back(real_field(ph, "lesion_ct_offset_hu", L2S_REF(phantom.lesion_ct_offset_hu)));
        f.push_back(real_field(ph, "air_hu", L2S_REF(phantom.air_hu)));
        f.push_back(real_field(ph, "blur_sigma_vox", L2S_REF(phantom.blur_sigma_vox)));
        f.push_back(real_field(ph, "pet_noise_sigma", L2S_REF(phantom.pet_noise_sigma)));
        f.push_back(real_field(ph, "ct_noise_sigma", L2S_REF(phantom.ct_noise_sigma)));
        f.push_back(real_field(ph, "adjacent_fraction", L2S_REF(phantom.adjacent_fraction)));
        f.push_back(int_field(ph, "max_retries", L2S_REF(phantom.max_retries)));

        const std::string pre = "preprocess";
        f.push_back(real_field(pre, "pet_lo", L2S_REF(preprocess.pet_lo)));
        f.push_back(real_field(pre, "pet_hi", L2S_REF(preprocess.pet_hi)));
        f.push_back(real_field(pre, "ct_lo", L2S_REF(preprocess.ct_lo)));
        f.push_back(real_field(pre, "ct_hi", L2S_REF(preprocess.ct_hi)));
        f.push_back(int_field(pre, "axis", L2S_REF(preprocess.axis)));

        f.push_back(real_field("loss", "lambda", L2S_REF(loss.lambda)));
        f.push_back(real_field("loss", "eps_bce", L2S_REF(loss.eps_bce)));
        f.push_back(real_field("loss", "eps_dice", L2S_REF(loss.eps_dice)));
        f.push_back(bool_field("loss", "dice_per_sample", L2S_REF(loss.dice_per_sample)));

        phase_fields(f, "phase1", &RunConfig::phase1);
        f.push_back(size_array_field("phase1", "crop", L2S_REF(phase1.crop)));
        f.push_back(real_field("phase1", "lesion_fraction", L2S_REF(phase1.lesion_fraction)));
        f.push_back(real_field("phase1", "flip_prob", L2S_REF(phase1.flip_prob)));
        f.push_back(real_field("phase1", "rotation_deg_max", L2S_REF(phase1.rotation_deg_max)));

        phase_fields(f, "phase2", &RunConfig::phase2);
        f.push_back(size_array_field("phase2", "patch", L2S_REF(phase2.patch)));
        f.push_back(real_field("phase2", "lesion_patch_prob", L2S_REF(phase2.lesion_patch_prob)));

        f.push_back(real_field("fusion", "gate", L2S_REF(fusion.gate)));
        f.push_back(real_field("fusion", "low", L2S_REF(fusion.low)));
        f.push_back(real_field("fusion", "high", L2S_REF(fusion.high)));

        f.push_back(size_array_field("inference", "stride", L2S_REF(inference.stride)));
        f.push_back(int_field("inference", "window_batch", L2S_REF(inference.window_batch)));
        f.push_back(int_field("inference", "slice_batch", L2S_REF(inference.slice_batch)));

        f.push_back(int_field("metrics", "connectivity", L2S_REF(metrics.connectivity)));
        f.push_back(int_field("metrics", "folds", L2S_REF(metrics.folds)));
        f.push_back(int_field("metrics", "fold_seed", L2S_REF(metrics.fold_seed)));

        f.push_back(string_field("paths", "data", L2S_REF(paths.data)));
        f.push_back(string_field("paths", "out", L2S_REF(paths.out)));
        return f;
    }();
    return table;
}

#undef L2S_REF

namespace detail {

class LineParser {
public:
    LineParser(const std::string& text, std::string where) : s_(text), where_(std::move(where)) {}

    Value value() {
        skip_ws();
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '[') return array();
        if (c == '"') return Value{string()};
        if (s_.compare(pos_, 4, "true") == 0) {
            pos_ += 4;
            return Value{true};
        }
        if (s_.compare(pos_, 5, "false") == 0) {
            pos_ += 5;
            return Value{false};
        }
        return number();
    }

    void finish() {
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected text after value: '" + s_.substr(pos_) + "'");
    }

private:
    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(where_ + ": " + msg); }

    void skip_ws() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }

    Value array() {
        ++pos_;
        Array out;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return Value{out};
        }
        for (;;) {
            Value v = value();
            if (v.v.index() == 4) fail("nested arrays are not supported");
            out.push_back(std::move(v));
            skip_ws();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ',') {
                ++pos_;
                skip_ws();
                if (pos_ < s_.size() && s_[pos_] == ']') {
                    ++pos_;
                    break;
                }
                continue;
            }
            if (s_[pos_] == ']') {
                ++pos_;
                break;
            }
            fail("expected ',' or ']' in array");
        }
        return Value{out};
    }

    std::string string() {
        ++pos_;
        std::string out;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("unterminated string");
                const char e = s_[pos_++];
                switch (e) {
                    case '"': c = '"'; break;
                    case '\\': c = '\\'; break;
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    default: fail(std::string("unknown escape \\") + e);
                }
            }
            out += c;
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return out;
    }

    Value number() {
        const std::size_t start = pos_;
        while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
                                    s_[pos_] == '+' || s_[pos_] == '-' || s_[pos_] == '_')) {
            ++pos_;
        }
        std::string tok = s_.substr(start, pos_ - start);
        std::erase(tok, '_');
        if (tok.empty()) fail("expected a value");
        const char* b = tok.data();
        const char* e = tok.data() + tok.size();
        const char* digits = (*b == '+') ? b + 1 : b;
        if (tok.find_first_of(".eE") == std::string::npos && tok != "inf" && tok != "nan") {
            long long x = 0;
            auto [p, ec] = std::from_chars(digits, e, x);
            if (ec == std::errc() && p == e) return Value{x};
            fail("bad integer '" + tok + "'");
        }
        double d = 0.0;
        auto [p, ec] = std::from_chars(digits, e, d);
        if (ec != std::errc() || p != e) fail("bad number '" + tok + "'");
        return Value{d};
    }

    const std::string& s_;
    std::string where_;
    std::size_t pos_ = 0;
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies `text` on top of `base`. `source` names the input in errors.
inline RunConfig parse(const std::string& text, const std::string& source = "<config>", RunConfig base = {}) {
    std::map<std::string, std::map<std::string, const Field*>> index;
    for (const Field& f : fields()) index[f.section][f.key] = &f;
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string where = source + ":" + std::to_string(lineno);
        const std::string line = detail::trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line[0] == '[') {
            const auto close = line.find(']');
            if (close == std::string::npos) throw ConfigError(where + ": unterminated section header");
            const std::string rest = detail::trim(line.substr(close + 1));
            if (!rest.empty() && rest[0] != '#') throw ConfigError(where + ": text after section header");
            section = detail::trim(line.substr(1, close - 1));
            if (!index.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside any section");
        auto it = index[section].find(key);
        if (it == index[section].end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(where + ": key '" + key + "' repeated in [" + section + "]");
        }
        const std::string rhs = line.substr(eq + 1);
        detail::LineParser lp(rhs, where);
        Value v = lp.value();
        lp.finish();
        it->second->set(base, v, where + ": " + section + "." + key);
    }
    base.finalize();
    return base;
}

inline RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

/// Every field, grouped by section in table order.
inline std::string echo(const RunConfig& c) {
    std::string out;
    std::string section;
    for (const Field& f : fields()) {
        if (f.section != section) {
            if (!section.empty()) out += '\n';
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

}  // namespace config
}  // namespace l2s
