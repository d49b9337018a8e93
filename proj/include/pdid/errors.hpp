#pragma once

#include <string>
#include <utility>
#include <variant>

namespace pdid {

enum class Errc {
  // codec
  TooShort,
  LengthMismatch,
  UnknownCode,
  Oversize,
  MalformedMac,
  // store
  UnknownPdid,
  EntropyUnavailable,
  IoFailure,
  CorruptSnapshot,
  // correlator
  GuardTimeout,
  NoSignals,
  // profiler
  AmbiguousFingerprint,
  // simulator
  EventSetMismatch,
  ScenarioInvalid,
  // service / cli
  BadAuthenticator,
  ConfigError,
  BindError,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::TooShort: return "TooShort";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::UnknownCode: return "UnknownCode";
    case Errc::Oversize: return "Oversize";
    case Errc::MalformedMac: return "MalformedMac";
    case Errc::UnknownPdid: return "UnknownPdid";
    case Errc::EntropyUnavailable: return "EntropyUnavailable";
    case Errc::IoFailure: return "IoFailure";
    case Errc::CorruptSnapshot: return "CorruptSnapshot";
    case Errc::GuardTimeout: return "GuardTimeout";
    case Errc::NoSignals: return "NoSignals";
    case Errc::AmbiguousFingerprint: return "AmbiguousFingerprint";
    case Errc::EventSetMismatch: return "EventSetMismatch";
    case Errc::ScenarioInvalid: return "ScenarioInvalid";
    case Errc::BadAuthenticator: return "BadAuthenticator";
    case Errc::ConfigError: return "ConfigError";
    case Errc::BindError: return "BindError";
  }
  return "Unknown";
}

struct Error {
  Errc code;
  std::string detail;

  std::string to_string() const {
    std::string s = errc_name(code);
    if (!detail.empty()) {
      s += ": ";
      s += detail;
    }
    return s;
  }
};

/// Value-or-error return type used across the library.
template <typename T>
class Result {
 public:
  Result(T value) : v_(std::move(value)) {}  // NOLINT(google-explicit-constructor)
  Result(Error err) : v_(std::move(err)) {}  // NOLINT(google-explicit-constructor)
  Result(Errc code, std::string detail = {}) : v_(Error{code, std::move(detail)}) {}

  bool ok() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return ok(); }

  T& value() & { return std::get<T>(v_); }
  const T& value() const& { return std::get<T>(v_); }
  T&& value() && { return std::get<T>(std::move(v_)); }

  const Error& error() const { return std::get<Error>(v_); }
  Errc code() const { return error().code; }

 private:
  std::variant<T, Error> v_;
};

/// Result for operations with no payload.
class Status {
 public:
  Status() = default;
  Status(Error err) : err_(std::move(err)), ok_(false) {}  // NOLINT(google-explicit-constructor)
  Status(Errc code, std::string detail = {}) : err_{code, std::move(detail)}, ok_(false) {}

  static Status success() { return Status(); }

  bool ok() const { return ok_; }
  explicit operator bool() const { return ok_; }
  const Error& error() const { return err_; }
  Errc code() const { return err_.code; }

 private:
  Error err_{Errc::IoFailure, ""};
  bool ok_ = true;
};

}  // namespace pdid
