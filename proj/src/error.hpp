#pragma once

#include <stdexcept>
#include <string>

namespace milkid {

enum class Errc {
  InvalidArgument = 1,
  Io,
  BadMagic,
  TruncatedPayload,
  UnsupportedElementType,
  InsufficientSourceImages,
  InvalidFraction,
  TooFewBags,
  MissingLabels,
  ShapeMismatch,
  StaleTrace,
  EmptySplit,
  SingleClassSplit,
  NegativeLambda,
  NonPositivePrediction,
  LengthMismatch,
  EmptyInput,
  EmptyCandidates,
  InvalidConfig,
  NoGrid,
};

const char* errc_name(Errc code) noexcept;

// Every failure raised by the core carries one of the codes above so the C
// layer can map it onto a stable status value.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace milkid
