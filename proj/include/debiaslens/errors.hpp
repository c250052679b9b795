#pragma once

#include <stdexcept>
#include <string>

namespace debiaslens {

/// Base of every error raised by the library. `category()` is a short
/// machine-readable tag used by the CLI to pick an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

#define DEBIASLENS_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    using Error::Error;                                               \
    const char* category() const noexcept override { return tag; }    \
  }

DEBIASLENS_ERROR(FormatError, "format");
DEBIASLENS_ERROR(CorruptionError, "corruption");
DEBIASLENS_ERROR(ValidationError, "validation");
DEBIASLENS_ERROR(ShapeError, "shape");
DEBIASLENS_ERROR(RangeError, "range");
DEBIASLENS_ERROR(LookupError, "lookup");
DEBIASLENS_ERROR(ArgumentError, "argument");
DEBIASLENS_ERROR(ConfigError, "config");
DEBIASLENS_ERROR(IoError, "io");
DEBIASLENS_ERROR(DivergenceError, "divergence");

#undef DEBIASLENS_ERROR

}  // namespace debiaslens
