#pragma once

#include <stdexcept>
#include <string>

namespace egn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible shapes, ranks, or axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A closure that must be deterministic produced two different results.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing, or out-of-range input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Degenerate input for a metric (e.g. zero vector under cosine distance).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Retrieval asked for more exemplars than the index can supply.
class InsufficientExemplarsError : public Error {
 public:
  InsufficientExemplarsError(const std::string& what, std::size_t eligible)
      : Error(what), eligible_(eligible) {}
  std::size_t eligible() const noexcept { return eligible_; }

 private:
  std::size_t eligible_;
};

/// An upstream pipeline artifact is missing or unreadable.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace egn
