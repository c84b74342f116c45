#pragma once

#include <stdexcept>
#include <string>

namespace moco {

// Base of every error the library throws. kind() is a short machine-parsable tag
// that the CLI prints in front of the message.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept = 0;
};

#define MOCO_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                     \
   public:                                                        \
    using Error::Error;                                           \
    const char* kind() const noexcept override { return tag; }    \
  };

MOCO_DEFINE_ERROR(DimensionError, "dimension")
MOCO_DEFINE_ERROR(NumericError, "numeric")
MOCO_DEFINE_ERROR(ConfigError, "config")
MOCO_DEFINE_ERROR(FormatError, "format")
MOCO_DEFINE_ERROR(RangeError, "range")
MOCO_DEFINE_ERROR(InternalError, "internal")
MOCO_DEFINE_ERROR(TrainingError, "training")

#undef MOCO_DEFINE_ERROR

}  // namespace moco
