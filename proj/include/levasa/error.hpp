#pragma once

#include <stdexcept>
#include <string>

namespace levasa {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when tensor or layer dimensions do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

}  // namespace levasa
