#pragma once

#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>

#include "pdid/auth_service.hpp"
#include "pdid/errors.hpp"
#include "pdid/store.hpp"
#include "pdid/util.hpp"

namespace pdid {

/// Everything the server needs, parsed from one line-oriented file:
/// `key = value` pairs plus one `[nas "<name>"]` section per RADIUS client.
struct FileConfig {
  StoreConfig store;
  ServerConfig server;
  std::string store_path;
  std::string audit_log_path;
  std::string oui_registry_path;
};

namespace detail {

inline std::optional<bool> parse_bool(const std::string& v) {
  std::string s = to_lower(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  return std::nullopt;
}

inline std::optional<long long> parse_int(const std::string& v) {
  if (v.empty()) return std::nullopt;
  char* end = nullptr;
  long long n = std::strtoll(v.c_str(), &end, 10);
  if (end == nullptr || *end != '\0') return std::nullopt;
  return n;
}

}  // namespace detail

inline Result<FileConfig> parse_config(std::istream& in, const std::string& name = "config") {
  FileConfig cfg;
  std::string line;
  int lineno = 0;
  NasClient* current_nas = nullptr;

  auto fail = [&](const std::string& why) {
    return Error{Errc::ConfigError, name + " line " + std::to_string(lineno) + ": " + why};
  };

  std::string pending_nas_name;
  std::optional<NasClient> pending;

  auto flush_nas = [&]() -> std::optional<Error> {
    if (!pending) return std::nullopt;
    if (pending->address.empty())
      return Error{Errc::ConfigError,
                   name + ": nas \"" + pending->name + "\" has no address"};
    if (!pending->secret.valid())
      return Error{Errc::ConfigError, name + ": nas \"" + pending->name + "\" has no secret"};
    cfg.server.clients[pending->address] = *pending;
    pending.reset();
    return std::nullopt;
  };

  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;

    if (t.front() == '[') {
      if (t.back() != ']') return fail("unterminated section header");
      std::string inner = trim(t.substr(1, t.size() - 2));
      if (inner.rfind("nas ", 0) != 0) return fail("unknown section: " + inner);
      std::string quoted = trim(inner.substr(4));
      if (quoted.size() < 2 || quoted.front() != '"' || quoted.back() != '"')
        return fail("nas section needs a quoted name");
      if (auto err = flush_nas()) return *err;
      pending = NasClient{};
      pending->name = quoted.substr(1, quoted.size() - 2);
      current_nas = &*pending;
      continue;
    }

    auto eq = t.find('=');
    if (eq == std::string::npos) return fail("expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));

    if (pending) {
      if (key == "address") {
        current_nas->address = value;
      } else if (key == "secret") {
        current_nas->secret.secret = value;
      } else if (key == "hint") {
        if (value == "guest-hotspot")
          current_nas->hint = UseCaseHint::GuestHotspot;
        else if (value == "mab")
          current_nas->hint = UseCaseHint::Mab;
        else if (value == "dot1x")
          current_nas->hint = UseCaseHint::Dot1x;
        else if (value == "vpn")
          current_nas->hint = UseCaseHint::Vpn;
        else
          return fail("unknown hint: " + value);
      } else {
        return fail("unknown nas key: " + key);
      }
      continue;
    }

    if (key == "auth_port" || key == "acct_port" || key == "max_macs_per_pdid" ||
        key == "retention_days" || key == "ephemeral_retention_hours" ||
        key == "guard_timeout_ms" || key == "context_window_seconds") {
      auto n = detail::parse_int(value);
      if (!n || *n < 0) return fail("expected a non-negative integer for " + key);
      if (key == "auth_port")
        cfg.server.auth_port = static_cast<std::uint16_t>(*n);
      else if (key == "acct_port")
        cfg.server.acct_port = static_cast<std::uint16_t>(*n);
      else if (key == "max_macs_per_pdid")
        cfg.store.max_macs_per_pdid = static_cast<size_t>(*n);
      else if (key == "retention_days")
        cfg.store.retention_ms = *n * kDay;
      else if (key == "ephemeral_retention_hours")
        cfg.store.ephemeral_retention_ms = *n * kHour;
      else if (key == "guard_timeout_ms")
        cfg.store.guard_timeout_ms = *n;
      else if (key == "context_window_seconds")
        cfg.store.context_window_ms = *n * kSecond;
    } else if (key == "feature_enabled" || key == "reject_unknown_signals" ||
               key == "username_sufficient") {
      auto b = detail::parse_bool(value);
      if (!b) return fail("expected a boolean for " + key);
      if (key == "feature_enabled")
        cfg.store.feature_enabled = *b;
      else if (key == "reject_unknown_signals")
        cfg.server.reject_unknown_signals = *b;
      else
        cfg.store.username_sufficient = *b;
    } else if (key == "anchor_priority") {
      cfg.store.anchor_priority.clear();
      for (const auto& part : split(value, ',')) {
        auto kind = anchor_from_name(trim(part));
        if (!kind) return fail("unknown anchor kind: " + trim(part));
        cfg.store.anchor_priority.push_back(*kind);
      }
      if (!cfg.store.priority_valid()) return fail("anchor_priority repeats a kind");
    } else if (key == "store") {
      cfg.store_path = value;
    } else if (key == "audit_log") {
      cfg.audit_log_path = value;
    } else if (key == "oui_registry") {
      cfg.oui_registry_path = value;
    } else {
      return fail("unknown key: " + key);
    }
  }
  if (auto err = flush_nas()) return *err;
  if (!cfg.server.ports_valid())
    return Error{Errc::ConfigError, name + ": auth_port and acct_port must differ"};
  return cfg;
}

inline Result<FileConfig> load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) return Error{Errc::ConfigError, "cannot open " + path};
  return parse_config(in, path);
}

/// Environment overrides for ports and the feature toggle.
inline void apply_env_overrides(FileConfig& cfg) {
  if (const char* v = std::getenv("PDID_AUTH_PORT")) {
    if (auto n = detail::parse_int(v)) cfg.server.auth_port = static_cast<std::uint16_t>(*n);
  }
  if (const char* v = std::getenv("PDID_ACCT_PORT")) {
    if (auto n = detail::parse_int(v)) cfg.server.acct_port = static_cast<std::uint16_t>(*n);
  }
  if (const char* v = std::getenv("PDID_FEATURE_ENABLED")) {
    if (auto b = detail::parse_bool(v)) cfg.store.feature_enabled = *b;
  }
}

}  // namespace pdid
