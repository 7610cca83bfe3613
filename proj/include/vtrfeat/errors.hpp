#pragma once

#include <stdexcept>
#include <string>

namespace vtrfeat {

// Every library failure derives from Error so callers (the CLI in particular)
// can map a failure category onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define VTRFEAT_DEFINE_ERROR(Name, Base)                          \
  class Name : public Base {                                      \
   public:                                                        \
    using Base::Base;                                             \
    const char* kind() const noexcept override { return #Name; } \
  };

// numeric / geometric
class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "NumericError"; }
};
VTRFEAT_DEFINE_ERROR(DegenerateDepth, NumericError)
VTRFEAT_DEFINE_ERROR(InvalidDisparity, NumericError)
VTRFEAT_DEFINE_ERROR(DegenerateGeometry, NumericError)
VTRFEAT_DEFINE_ERROR(DegenerateGradient, NumericError)
VTRFEAT_DEFINE_ERROR(InsufficientMatches, NumericError)
VTRFEAT_DEFINE_ERROR(LocalizationFailure, NumericError)

// shapes and data
class DataError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "DataError"; }
};
VTRFEAT_DEFINE_ERROR(ShapeError, DataError)
VTRFEAT_DEFINE_ERROR(OutOfBounds, DataError)
VTRFEAT_DEFINE_ERROR(InvalidViewpoint, DataError)
VTRFEAT_DEFINE_ERROR(TeachFailure, DataError)
VTRFEAT_DEFINE_ERROR(IoError, DataError)

VTRFEAT_DEFINE_ERROR(ConfigError, Error)

#undef VTRFEAT_DEFINE_ERROR

}  // namespace vtrfeat
