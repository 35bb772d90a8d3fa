#pragma once

#include <stdexcept>
#include <string>

namespace leakmem {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes disagree (names both shapes in the message).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN / inf produced or consumed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Zero-norm operand where a direction is required.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Input outside the domain of the operation (e.g. off the simplex).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition that is not about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace leakmem
