#pragma once

#include <stdexcept>
#include <string>

namespace ssmprune {

// Base for every error raised by the toolkit. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numerical operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed files: checkpoint headers, calibration files, plan JSON.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Violated preconditions that are not shape related (ratios, factors, names).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssmprune
