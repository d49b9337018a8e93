#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>

#include "pdid/util.hpp"

namespace pdid {

struct GuardStats {
  std::uint64_t acquisitions = 0;
  std::uint64_t timeouts = 0;
  std::uint64_t takeovers = 0;
  std::uint64_t double_check_saves = 0;
  std::uint64_t creations = 0;
};

/// Mutual exclusion keyed by identity-signal value, with expiry. Each key has
/// its own lock and condition variable, so requests whose strongest signals
/// differ never contend — the table mutex guards only the key map. A holder
/// that outlives the timeout loses its handle: the epoch moves on and its
/// late commit is rejected.
class CreationGuardTable {
 public:
  using Clock = std::chrono::steady_clock;

  explicit CreationGuardTable(TimeMs timeout_ms = 5000) : timeout_ms_(timeout_ms) {}

  void set_timeout_ms(TimeMs t) { timeout_ms_ = t; }
  TimeMs timeout_ms() const { return timeout_ms_; }

  enum class Outcome { Acquired, HolderFinished, Timeout };

  struct GuardEntry {
    std::mutex m;
    std::condition_variable cv;
    bool held = false;
    std::uint64_t epoch = 0;
    Clock::time_point acquired_at{};
  };

  struct Token {
    std::shared_ptr<GuardEntry> entry;
    std::uint64_t epoch = 0;
  };

  Outcome acquire(const std::string& key, Token* out) {
    auto entry = entry_for(key);
    auto timeout = std::chrono::milliseconds(timeout_ms_);
    auto deadline = Clock::now() + timeout;
    std::unique_lock lk(entry->m);
    for (;;) {
      auto now = Clock::now();
      if (!entry->held) {
        take(*entry, now);
        *out = Token{entry, entry->epoch};
        return Outcome::Acquired;
      }
      if (now - entry->acquired_at > timeout) {
        take(*entry, now);  // holder expired; steal the handle
        takeovers_.fetch_add(1, std::memory_order_relaxed);
        *out = Token{entry, entry->epoch};
        return Outcome::Acquired;
      }
      if (entry->cv.wait_until(lk, deadline) == std::cv_status::timeout) {
        if (!entry->held || Clock::now() - entry->acquired_at > timeout)
          continue;  // released or expired at the wire; take it on the next spin
        timeouts_.fetch_add(1, std::memory_order_relaxed);
        return Outcome::Timeout;
      }
      if (!entry->held) return Outcome::HolderFinished;
      // spurious wakeup; loop and re-evaluate
    }
  }

  /// Runs `fn` iff the token is still the live handle, atomically with the
  /// release. A stalled holder's late commit lands here and is rejected.
  /// Holds only the per-key lock, never the table lock.
  template <typename Fn>
  bool commit(const Token& token, Fn&& fn) {
    if (!token.entry) return false;
    std::unique_lock lk(token.entry->m);
    if (!token.entry->held || token.entry->epoch != token.epoch) return false;
    fn();
    token.entry->held = false;
    lk.unlock();
    token.entry->cv.notify_all();
    return true;
  }

  /// Releases without committing (the double-check found an existing record).
  void release(const Token& token) {
    if (!token.entry) return;
    {
      std::unique_lock lk(token.entry->m);
      if (token.entry->epoch != token.epoch) return;
      token.entry->held = false;
    }
    token.entry->cv.notify_all();
  }

  bool valid(const Token& token) const {
    if (!token.entry) return false;
    std::unique_lock lk(token.entry->m);
    return token.entry->held && token.entry->epoch == token.epoch;
  }

  GuardStats stats() const {
    GuardStats s;
    s.acquisitions = acquisitions_.load(std::memory_order_relaxed);
    s.timeouts = timeouts_.load(std::memory_order_relaxed);
    s.takeovers = takeovers_.load(std::memory_order_relaxed);
    s.double_check_saves = double_check_saves_.load(std::memory_order_relaxed);
    s.creations = creations_.load(std::memory_order_relaxed);
    return s;
  }

  void note_double_check_save() { double_check_saves_.fetch_add(1, std::memory_order_relaxed); }
  void note_creation() { creations_.fetch_add(1, std::memory_order_relaxed); }

 private:
  std::shared_ptr<GuardEntry> entry_for(const std::string& key) {
    std::lock_guard lk(table_mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) it = entries_.emplace(key, std::make_shared<GuardEntry>()).first;
    return it->second;
  }

  void take(GuardEntry& e, Clock::time_point now) {
    e.held = true;
    ++e.epoch;
    e.acquired_at = now;
    acquisitions_.fetch_add(1, std::memory_order_relaxed);
  }

  mutable std::mutex table_mu_;
  std::unordered_map<std::string, std::shared_ptr<GuardEntry>> entries_;
  std::atomic<std::uint64_t> acquisitions_{0};
  std::atomic<std::uint64_t> timeouts_{0};
  std::atomic<std::uint64_t> takeovers_{0};
  std::atomic<std::uint64_t> double_check_saves_{0};
  std::atomic<std::uint64_t> creations_{0};
  TimeMs timeout_ms_;
};

}  // namespace pdid
