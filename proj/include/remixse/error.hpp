#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace remixse {

enum class ErrorKind {
  InvalidArgument,
  LengthMismatch,
  SizeMismatch,
  ShapeMismatch,
  ZeroPowerSignal,
  ZeroPowerNoise,
  UnsupportedFormat,
  Io,
  VersionMismatch,
  CorruptHeader,
  ConfigMismatch,
  EmptyCorpus,
  NonFiniteLoss,
  MissingExtNoise,
  UnexpectedExtNoise,
  TooShort,
  ZeroReference,
  ParseError,
  MissingFile,
  RoleMismatch,
  SampleRateMismatch,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::SizeMismatch: return "SizeMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ZeroPowerSignal: return "ZeroPowerSignal";
    case ErrorKind::ZeroPowerNoise: return "ZeroPowerNoise";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::Io: return "Io";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::CorruptHeader: return "CorruptHeader";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::MissingExtNoise: return "MissingExtNoise";
    case ErrorKind::UnexpectedExtNoise: return "UnexpectedExtNoise";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::ZeroReference: return "ZeroReference";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::RoleMismatch: return "RoleMismatch";
    case ErrorKind::SampleRateMismatch: return "SampleRateMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace remixse
