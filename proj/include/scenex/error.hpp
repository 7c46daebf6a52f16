#pragma once

#include <stdexcept>
#include <string>

namespace scenex {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible with a primitive. The message names the primitive.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : Error(op + ": shape mismatch: " + detail), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// Input outside the mathematical domain of a primitive (log/sqrt of x <= 0).
class DomainError : public Error {
 public:
  DomainError(const std::string& op, const std::string& detail)
      : Error(op + ": domain error: " + detail), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// Violated precondition of an API call.
class ContractError : public Error {
 public:
  using Error::Error;
};

// IO failure; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace scenex
