#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace debias {

enum class Errc {
  ArityExceedsSample,
  DimensionMismatch,
  EnumerationCapExceeded,
  EmptySample,
  InvalidArgument,
  PilotOutsideDomain,
  OrderExceedsFamily,
  OrderNotCovered,
  UnequalSplit,
  BinomialOverflow,
  SingularInput,
  SingularShift,
  NonPositiveDeterminant,
  DomainTooTight,
  TooManyBlocks,
  NonSymmetric,
  InsufficientData,
  DegenerateResample,
  DimensionTooSmall,
  EmptyStudy,
  ConfigError,
  IoError,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::ArityExceedsSample: return "ArityExceedsSample";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EnumerationCapExceeded: return "EnumerationCapExceeded";
    case Errc::EmptySample: return "EmptySample";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::PilotOutsideDomain: return "PilotOutsideDomain";
    case Errc::OrderExceedsFamily: return "OrderExceedsFamily";
    case Errc::OrderNotCovered: return "OrderNotCovered";
    case Errc::UnequalSplit: return "UnequalSplit";
    case Errc::BinomialOverflow: return "BinomialOverflow";
    case Errc::SingularInput: return "SingularInput";
    case Errc::SingularShift: return "SingularShift";
    case Errc::NonPositiveDeterminant: return "NonPositiveDeterminant";
    case Errc::DomainTooTight: return "DomainTooTight";
    case Errc::TooManyBlocks: return "TooManyBlocks";
    case Errc::NonSymmetric: return "NonSymmetric";
    case Errc::InsufficientData: return "InsufficientData";
    case Errc::DegenerateResample: return "DegenerateResample";
    case Errc::DimensionTooSmall: return "DimensionTooSmall";
    case Errc::EmptyStudy: return "EmptyStudy";
    case Errc::ConfigError: return "ConfigError";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable error code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, Errc code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace debias
