#pragma once

#include <stdexcept>
#include <string>

namespace coreseg {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent configuration input.
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// Tensor / mask dimension mismatches and invalid architecture geometry.
struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(what) {}
};

// Invalid argument values (out-of-range ids, bad fractions, empty inputs).
struct ValueError : Error {
    explicit ValueError(const std::string& what) : Error(what) {}
};

// Training aborted (non-finite loss, empty dataset, contract violation).
struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error(what) {}
};

// Artifact fingerprint chain mismatch (stale or foreign upstream artifact).
struct ChainError : Error {
    explicit ChainError(const std::string& what) : Error(what) {}
};

// File format / serialization problems.
struct IoError : Error {
    explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace coreseg
