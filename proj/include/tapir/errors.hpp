#pragma once

#include <stdexcept>
#include <string>

namespace tapir {

// Input data violates the annotation schema or a contract on user input.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss or parameters).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tapir
