#include "error.hpp"

namespace milkid {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::Io: return "Io";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedPayload: return "TruncatedPayload";
    case Errc::UnsupportedElementType: return "UnsupportedElementType";
    case Errc::InsufficientSourceImages: return "InsufficientSourceImages";
    case Errc::InvalidFraction: return "InvalidFraction";
    case Errc::TooFewBags: return "TooFewBags";
    case Errc::MissingLabels: return "MissingLabels";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::StaleTrace: return "StaleTrace";
    case Errc::EmptySplit: return "EmptySplit";
    case Errc::SingleClassSplit: return "SingleClassSplit";
    case Errc::NegativeLambda: return "NegativeLambda";
    case Errc::NonPositivePrediction: return "NonPositivePrediction";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::EmptyCandidates: return "EmptyCandidates";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::NoGrid: return "NoGrid";
  }
  return "Unknown";
}

}  // namespace milkid
