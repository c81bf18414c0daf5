#pragma once

#include <stdexcept>
#include <string>

namespace metal {

/// Raised when a computation produces NaN/Inf (diverging loss, gradient, state).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on malformed or version-mismatched files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metal
