#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pdid/mac.hpp"
#include "pdid/util.hpp"
#include "pdid/uuid.hpp"

namespace pdid {

/// One accounting session, keyed by Acct-Session-Id and grouped under the
/// PDID (or under the MAC while running in legacy mode).
struct SessionRecord {
  std::string acct_session_id;
  Pdid pdid;               // nil when legacy-keyed
  std::string legacy_key;  // canonical MAC when legacy-keyed
  MacAddress mac;
  std::string nas;
  TimeMs start_t = 0;
  TimeMs stop_t = 0;
  bool stopped = false;
  bool stop_without_start = false;
  std::uint64_t input_octets = 0;
  std::uint64_t output_octets = 0;
};

class SessionStore {
 public:
  SessionRecord& start(const std::string& session_id, const Pdid& pdid,
                       const std::string& legacy_key, const MacAddress& mac,
                       const std::string& nas, TimeMs t) {
    std::lock_guard lk(mu_);
    auto& s = sessions_[session_id];
    s.acct_session_id = session_id;
    s.pdid = pdid;
    s.legacy_key = legacy_key;
    s.mac = mac;
    s.nas = nas;
    s.start_t = t;
    return s;
  }

  std::optional<SessionRecord> get(const std::string& session_id) const {
    std::lock_guard lk(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    return it->second;
  }

  bool update(const std::string& session_id, std::uint64_t in_octets, std::uint64_t out_octets,
              TimeMs t, bool stop) {
    std::lock_guard lk(mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return false;
    auto& s = it->second;
    s.input_octets = in_octets;
    s.output_octets = out_octets;
    if (stop) {
      s.stop_t = t;
      s.stopped = true;
    }
    return true;
  }

  /// Stop without Start: create-and-close, flagged.
  SessionRecord& orphan_stop(const std::string& session_id, const Pdid& pdid,
                             const std::string& legacy_key, const MacAddress& mac,
                             const std::string& nas, TimeMs t) {
    std::lock_guard lk(mu_);
    auto& s = sessions_[session_id];
    s.acct_session_id = session_id;
    s.pdid = pdid;
    s.legacy_key = legacy_key;
    s.mac = mac;
    s.nas = nas;
    s.start_t = t;
    s.stop_t = t;
    s.stopped = true;
    s.stop_without_start = true;
    return s;
  }

  /// Migration: re-keys MAC-grouped sessions under the device's new PDID.
  size_t rekey_legacy(const std::string& mac_key, const Pdid& pdid) {
    std::lock_guard lk(mu_);
    size_t n = 0;
    for (auto& [id, s] : sessions_) {
      if (s.legacy_key == mac_key) {
        s.pdid = pdid;
        s.legacy_key.clear();
        ++n;
      }
    }
    return n;
  }

  std::vector<SessionRecord> all() const {
    std::lock_guard lk(mu_);
    std::vector<SessionRecord> out;
    out.reserve(sessions_.size());
    for (const auto& [id, s] : sessions_) out.push_back(s);
    return out;
  }

  size_t size() const {
    std::lock_guard lk(mu_);
    return sessions_.size();
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, SessionRecord> sessions_;
};

}  // namespace pdid
