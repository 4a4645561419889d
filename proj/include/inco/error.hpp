#pragma once

#include <stdexcept>
#include <string>

namespace inco {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised by the halfspace projection when the anchor gradient has no length.
class ZeroAnchorError : public Error {
 public:
  ZeroAnchorError() : Error("zero anchor gradient") {}
};

class DegenerateFeaturesError : public Error {
 public:
  DegenerateFeaturesError() : Error("degenerate features") {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IdxError : public Error {
 public:
  enum class Kind { Io, BadMagic, Truncated, CountMismatch };

  IdxError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace inco
