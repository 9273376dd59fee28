#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace modnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or mask shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk input (IDX, manifest, binary payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Data used outside its allowed role (e.g. the oracle probe split fed to evaluation).
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter became NaN/Inf.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace modnet
