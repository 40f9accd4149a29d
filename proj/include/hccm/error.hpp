#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace hccm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid input, configuration, or violated invariant. The CLI maps it to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Kernel called with non-conforming shapes.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Filesystem or format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A numerical step produced non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename E = ValidationError, typename... Args>
inline void require(bool cond, Args&&... args) {
  if (!cond) throw E(detail::concat(std::forward<Args>(args)...));
}

}  // namespace hccm
