#pragma once

#include <stdexcept>
#include <string>

namespace tgcn {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: validation/structural -> 2, numeric -> 3, format -> 4.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A value outside its documented domain (bad probability, negative count, ...).
struct validation_error : error {
  using error::error;
};

// Shape or index inconsistency between containers.
struct structural_error : error {
  using error::error;
};

// Non-finite values where finite ones are required.
struct numeric_error : error {
  using error::error;
};

// Malformed files: bad magic, truncated payload, unparsable line.
struct format_error : error {
  using error::error;
};

}  // namespace tgcn
