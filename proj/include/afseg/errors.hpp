#pragma once

#include <stdexcept>
#include <string>

namespace afseg {

// Bad shapes, bad files, bad configuration. CLI exit code 1.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-convergence, NaN/Inf, degenerate partitions. CLI exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace afseg
