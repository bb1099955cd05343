#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aq {

enum class ErrorKind {
  AllCountsZero,
  NotHermitian,
  UnsupportedKind,
  NonRealCoefficient,
  EmptyDecomposition,
  CountOverflow,
  EscapedQuantum,
  CannotDelete,
  Timeout,
  AlreadyReal,
  InvalidOutcome,
  EmptyBubble,
  NoTouchingArea,
  SpectatorMismatch,
  NoSplit,
  DimensionMismatch,
  DegenerateExpected,
  TooFewWorkers,
  ChannelOverflow,
  ConfigError,
  IoError,
};

constexpr std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::AllCountsZero: return "AllCountsZero";
    case ErrorKind::NotHermitian: return "NotHermitian";
    case ErrorKind::UnsupportedKind: return "UnsupportedKind";
    case ErrorKind::NonRealCoefficient: return "NonRealCoefficient";
    case ErrorKind::EmptyDecomposition: return "EmptyDecomposition";
    case ErrorKind::CountOverflow: return "CountOverflow";
    case ErrorKind::EscapedQuantum: return "EscapedQuantum";
    case ErrorKind::CannotDelete: return "CannotDelete";
    case ErrorKind::Timeout: return "Timeout";
    case ErrorKind::AlreadyReal: return "AlreadyReal";
    case ErrorKind::InvalidOutcome: return "InvalidOutcome";
    case ErrorKind::EmptyBubble: return "EmptyBubble";
    case ErrorKind::NoTouchingArea: return "NoTouchingArea";
    case ErrorKind::SpectatorMismatch: return "SpectatorMismatch";
    case ErrorKind::NoSplit: return "NoSplit";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::DegenerateExpected: return "DegenerateExpected";
    case ErrorKind::TooFewWorkers: return "TooFewWorkers";
    case ErrorKind::ChannelOverflow: return "ChannelOverflow";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

// All library failures surface as aq::Error; kind() lets callers (and the
// CLI exit-code mapping) dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace aq
