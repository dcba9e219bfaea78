#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ldpm {

enum class ErrorKind {
  ZeroDispersion,
  EmptyGroup,
  EmptyInput,
  BadSplit,
  RankDeficient,
  BadRank,
  NotPSD,
  DimMismatch,
  InsufficientData,
  NonFinite,
  MissingFeatures,
  BadScale,
  UnknownGroup,
  LengthMismatch,
  BadSigma,
  Config,
  Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Numeric failures (divergence, singular systems) as opposed to bad user input.
constexpr bool is_numeric_failure(ErrorKind kind) noexcept {
  return kind == ErrorKind::NonFinite || kind == ErrorKind::RankDeficient;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace ldpm
