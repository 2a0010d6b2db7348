#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sepsis {

enum class Errc {
  HeaderMismatch,
  MalformedRow,
  BadLabel,
  IoError,
  EmptyInput,
  DimensionMismatch,
  OutOfOrderRow,
  BadDims,
  NonFiniteInput,
  StaleCache,
  ShapeMismatch,
  NonFiniteLoss,
  EmptyGrid,
  CorruptFile,
  VersionMismatch,
  ChecksumFail,
  LengthMismatch,
  UnknownModel,
  IncompleteGrid,
  BadDomain,
  BadConfig,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::HeaderMismatch: return "HeaderMismatch";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::BadLabel: return "BadLabel";
    case Errc::IoError: return "IoError";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::OutOfOrderRow: return "OutOfOrderRow";
    case Errc::BadDims: return "BadDims";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::StaleCache: return "StaleCache";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::EmptyGrid: return "EmptyGrid";
    case Errc::CorruptFile: return "CorruptFile";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::ChecksumFail: return "ChecksumFail";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::UnknownModel: return "UnknownModel";
    case Errc::IncompleteGrid: return "IncompleteGrid";
    case Errc::BadDomain: return "BadDomain";
    case Errc::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace sepsis
