#pragma once

#include <stdexcept>
#include <string>

namespace l2s {

/// Base class of every error raised by the library. `kind()` is a stable,
/// machine-parseable class name used by the command-line front end.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& w) : Error("shape_error", w) {}
};

struct ValueError : Error {
    explicit ValueError(const std::string& w) : Error("value_error", w) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& w) : Error("format_error", w) {}
};

struct UnsupportedFeature : Error {
    explicit UnsupportedFeature(const std::string& w) : Error("unsupported_feature", w) {}
};

struct IoError : Error {
    explicit IoError(const std::string& w) : Error("io_error", w) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error("config_error", w) {}
};

struct GenerationError : Error {
    explicit GenerationError(const std::string& w) : Error("generation_error", w) {}
};

struct TrainingDiverged : Error {
    TrainingDiverged(const std::string& w, int epoch)
        : Error("training_diverged", w), epoch(epoch) {}
    int epoch;
};

struct MissingInput : Error {
    explicit MissingInput(const std::string& w) : Error("missing_input", w) {}
};

}  // namespace l2s
