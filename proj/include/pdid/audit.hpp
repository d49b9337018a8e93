#pragma once

#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include "pdid/util.hpp"
#include "pdid/uuid.hpp"

namespace pdid {

struct AuditEvent {
  TimeMs t = 0;
  std::string op;     // created, mac_associated, attrs_merged, auth, ...
  Pdid pdid;          // nil for store-wide events
  std::string actor;  // auth, profiler, cli, prune, ...
  std::string detail;

  std::string to_line() const {
    std::string line = "ts=" + std::to_string(t) + " op=" + op + " pdid=" + pdid.to_string() +
                       " actor=" + actor;
    if (!detail.empty()) line += " detail=" + detail;
    return line;
  }
};

/// Append-only audit log: an in-memory event list (queried by audit_trail and
/// reports) plus an optional line-delimited file sink.
class AuditLog {
 public:
  void open_sink(const std::string& path) {
    std::lock_guard lk(mu_);
    sink_.open(path, std::ios::app);
  }

  void append(AuditEvent ev) {
    std::lock_guard lk(mu_);
    if (sink_.is_open()) sink_ << ev.to_line() << '\n' << std::flush;
    events_.push_back(std::move(ev));
  }

  std::vector<AuditEvent> events_for(const Pdid& pdid) const {
    std::lock_guard lk(mu_);
    std::vector<AuditEvent> out;
    for (const auto& e : events_)
      if (e.pdid == pdid) out.push_back(e);
    return out;
  }

  std::vector<AuditEvent> all() const {
    std::lock_guard lk(mu_);
    return events_;
  }

  size_t size() const {
    std::lock_guard lk(mu_);
    return events_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<AuditEvent> events_;
  std::ofstream sink_;
};

}  // namespace pdid
