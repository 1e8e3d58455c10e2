#pragma once

#include <stdexcept>
#include <string>

namespace gradsep {

// Raised when a computation becomes numerically invalid (non-finite values,
// rank deficiency, diverging optimization). The CLI maps this to exit code 3.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Raised on malformed files, checksum failures, or unreadable paths.
// The CLI maps this to exit code 4.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gradsep
