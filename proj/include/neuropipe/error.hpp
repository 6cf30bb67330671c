#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace neuropipe {

enum class Errc {
  UnknownFormat,
  CorruptHeader,
  NonFiniteData,
  IoFailure,
  IndexOutOfRange,
  VoiOutOfBounds,
  ShapeMismatch,
  DuplicateModality,
  ProvenanceMismatch,
  NonPositiveFactor,
  DegenerateOutput,
  WindowTooLarge,
  RoiOutOfBounds,
  RoiTooSmall,
  BadLabel,
  NegativeWeight,
  BadConfig,
  WrongChannels,
  WrongSize,
  EmptyDataset,
  DivergedLoss,
  MissingTruth,
  EmptySubset,
  LengthMismatch,
  UndefinedMetric,
  SpecInfeasible,
  ParseError,
};

std::string_view errc_name(Errc code);

// Every failure raised by the library carries one of the codes above so that
// callers (and the CLI exit-status mapping) can branch on the kind.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, Errc code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace neuropipe
