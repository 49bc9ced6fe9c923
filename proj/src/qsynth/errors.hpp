#pragma once

#include <stdexcept>

namespace qsynth {

// Error taxonomy mirrors the CLI exit-code contract:
// validation 1, I/O 2, numerical divergence 3, format/compatibility 4.

struct validation_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace qsynth
