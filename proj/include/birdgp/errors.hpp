#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace birdgp {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidInput : Error {
  using Error::Error;
};

struct InvalidConfig : Error {
  using Error::Error;
};

struct InvalidState : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct NumericalFailure : Error {
  explicit NumericalFailure(const std::string& msg, std::ptrdiff_t index = -1)
      : Error(msg), offending_index(index) {}
  std::ptrdiff_t offending_index;
};

struct RankDeficient : Error {
  RankDeficient(const std::string& msg, std::size_t column)
      : Error(msg), column_index(column) {}
  std::size_t column_index;
};

struct FormatError : Error {
  FormatError(const std::string& msg, std::size_t offset = 0)
      : Error(msg), byte_offset(offset) {}
  std::size_t byte_offset;
};

struct InsufficientData : Error {
  using Error::Error;
};

struct ResourceLimit : Error {
  using Error::Error;
};

struct DegenerateInput : Error {
  using Error::Error;
};

struct DegenerateCorrelation : Error {
  using Error::Error;
};

struct GridMismatch : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace birdgp
