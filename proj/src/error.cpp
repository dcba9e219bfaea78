#include "ldpm/error.hpp"

namespace ldpm {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ZeroDispersion: return "ZeroDispersion";
    case ErrorKind::EmptyGroup: return "EmptyGroup";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::BadSplit: return "BadSplit";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::BadRank: return "BadRank";
    case ErrorKind::NotPSD: return "NotPSD";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::MissingFeatures: return "MissingFeatures";
    case ErrorKind::BadScale: return "BadScale";
    case ErrorKind::UnknownGroup: return "UnknownGroup";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::BadSigma: return "BadSigma";
    case ErrorKind::Config: return "Config";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace ldpm
