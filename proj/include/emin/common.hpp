#pragma once

#include <stdexcept>
#include <string>

namespace emin {

// Error taxonomy mirrored by the CLI exit codes.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace emin
