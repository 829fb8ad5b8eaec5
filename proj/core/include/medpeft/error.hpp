#pragma once

#include <stdexcept>
#include <string>

namespace medpeft {

/// Every error raised by the library carries a stable kind so callers
/// (the CLI in particular) can map it to an exit code without string matching.
enum class ErrorKind {
  MissingModality,
  ShapeMismatch,
  UnknownLabelValue,
  NonInvertibleAffine,
  InvalidTarget,
  LesionDoesNotFit,
  IoError,
  ChannelMismatch,
  InvalidConfig,
  IncompatibleSite,
  NoAdaptersAttached,
  ArchitectureMismatch,
  NonFiniteLoss,
  EmptyCohort,
  LengthMismatch,
  TooFewCases,
  NoRunsFound,
  SchemaMismatch,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace medpeft
