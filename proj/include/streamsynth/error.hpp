#pragma once

#include <stdexcept>
#include <string>

namespace streamsynth {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Raised when a loss has no contributing positions.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what + " (at position " + std::to_string(position) + ")"), position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Requested mode cannot run with the given configuration.
class UnsupportedModeError : public Error {
 public:
  using Error::Error;
};

/// A simulation finished without producing what it measures.
class SimulationError : public Error {
 public:
  using Error::Error;
};

}  // namespace streamsynth
