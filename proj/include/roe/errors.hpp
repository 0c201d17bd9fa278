#pragma once

#include <stdexcept>
#include <string>

namespace roe {

/// Base of every error the library raises. `kind()` is a stable short tag
/// used by the CLI to pick an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define ROE_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                    \
   public:                                                       \
    using Error::Error;                                          \
    const char* kind() const noexcept override { return tag; }   \
  };

ROE_DEFINE_ERROR(DimensionError, "dimension")
ROE_DEFINE_ERROR(ParameterError, "parameter")
ROE_DEFINE_ERROR(NumericError, "numeric")
ROE_DEFINE_ERROR(CapacityError, "capacity")
ROE_DEFINE_ERROR(DegenerateBatchError, "degenerate-batch")
ROE_DEFINE_ERROR(MalformedSampleError, "malformed-sample")
ROE_DEFINE_ERROR(PlanMismatchError, "plan-mismatch")
ROE_DEFINE_ERROR(DivergenceError, "divergence")
ROE_DEFINE_ERROR(CheckpointError, "checkpoint")
ROE_DEFINE_ERROR(PipelineError, "pipeline")
ROE_DEFINE_ERROR(ConfigError, "config")
ROE_DEFINE_ERROR(DataError, "data")
ROE_DEFINE_ERROR(IoError, "io")

#undef ROE_DEFINE_ERROR

}  // namespace roe
