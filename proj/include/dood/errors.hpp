#pragma once

#include <stdexcept>
#include <string>

namespace dood {

/// Malformed input data: bad files, shape mismatches, invalid configuration values.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or degenerate statistics encountered during computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dood
