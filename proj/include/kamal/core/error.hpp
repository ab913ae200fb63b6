#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace kamal {

// Base of every diagnostic the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid argument or configuration value (exit code 2 in the CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// File could not be read/written or is malformed (exit code 3 in the CLI).
class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a loss or gradient (exit code 4 in the CLI).
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename E = Error, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

template <typename E = Error, typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail<E>(std::forward<Args>(args)...);
}

}  // namespace kamal
