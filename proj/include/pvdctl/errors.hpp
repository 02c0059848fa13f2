#pragma once

#include <stdexcept>
#include <string>

namespace pvdctl {

// Raised when a scenario file cannot be parsed or fails validation.
// The CLI maps it to exit code 2.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a solver leaves its validity envelope (marching instability,
// loss of positivity, CFL violation).  The CLI maps it to exit code 3.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pvdctl
