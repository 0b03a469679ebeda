#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

/// Raised when an input violates a documented precondition (bad config,
/// malformed file, infeasible partition). The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Anything else thrown from the library (I/O failures, internal errors)
/// maps to exit code 2 at the CLI boundary.

}  // namespace fedsim
