#pragma once

#include <stdexcept>
#include <string>

namespace histoprog {

/// Bad input: malformed files, violated preconditions, inconsistent
/// configuration. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite losses, singular systems and similar failures of a numerical
/// routine. The CLI maps this to exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace histoprog
