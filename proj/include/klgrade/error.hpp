#pragma once

#include <stdexcept>
#include <string>

namespace klg {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or layer shape contract violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Argument outside its documented domain (negative fraction, lr <= 0, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Reading or writing a file failed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace klg
