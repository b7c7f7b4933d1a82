#pragma once

#include <stdexcept>
#include <string>

namespace dleaf {

// Base of every error thrown by the library. `is_validation()` separates bad
// input (exit code 2 at the CLI) from internal or I/O failures (exit code 1).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, bool validation = true)
      : std::runtime_error(what), validation_(validation) {}
  bool is_validation() const noexcept { return validation_; }

 private:
  bool validation_;
};

#define DLEAF_DEFINE_ERROR(Name, validation)                         \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(what, validation) {} \
  };

DLEAF_DEFINE_ERROR(ConfigError, true)
DLEAF_DEFINE_ERROR(ShapeError, true)
DLEAF_DEFINE_ERROR(NumericsError, false)
DLEAF_DEFINE_ERROR(SpanError, true)
DLEAF_DEFINE_ERROR(ZeroMassError, true)
DLEAF_DEFINE_ERROR(DegenerateSampleError, true)
DLEAF_DEFINE_ERROR(EmptyInputError, true)
DLEAF_DEFINE_ERROR(MeasurementError, true)
DLEAF_DEFINE_ERROR(SchemaError, true)
DLEAF_DEFINE_ERROR(DimError, true)
DLEAF_DEFINE_ERROR(RangeError, true)
DLEAF_DEFINE_ERROR(ParseError, true)
DLEAF_DEFINE_ERROR(LabelError, true)
DLEAF_DEFINE_ERROR(IoError, false)

#undef DLEAF_DEFINE_ERROR

}  // namespace dleaf
