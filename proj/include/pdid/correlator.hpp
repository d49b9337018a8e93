#pragma once

#include <functional>
#include <optional>
#include <string>

#include "pdid/guard.hpp"
#include "pdid/radius.hpp"
#include "pdid/store.hpp"

namespace pdid {

using radius::IdentitySignalSet;
using radius::UseCaseHint;

enum class Confidence { VeryHigh, High, Medium, New, None };

inline const char* confidence_name(Confidence c) {
  switch (c) {
    case Confidence::VeryHigh: return "very_high";
    case Confidence::High: return "high";
    case Confidence::Medium: return "medium";
    case Confidence::New: return "new";
    case Confidence::None: return "none";
  }
  return "?";
}

enum class MatchedBy {
  Certificate,
  MdmEnrollment,
  AgentId,
  Username,
  Fingerprint,
  Mac,
  New,
  NoneEphemeral,
};

inline const char* matched_by_name(MatchedBy m) {
  switch (m) {
    case MatchedBy::Certificate: return "certificate";
    case MatchedBy::MdmEnrollment: return "mdm_enrollment";
    case MatchedBy::AgentId: return "agent_id";
    case MatchedBy::Username: return "username";
    case MatchedBy::Fingerprint: return "fingerprint";
    case MatchedBy::Mac: return "mac";
    case MatchedBy::New: return "new";
    case MatchedBy::NoneEphemeral: return "none-ephemeral";
  }
  return "?";
}

inline MatchedBy matched_from_anchor(AnchorKind k) {
  switch (k) {
    case AnchorKind::Certificate: return MatchedBy::Certificate;
    case AnchorKind::MdmEnrollment: return MatchedBy::MdmEnrollment;
    case AnchorKind::AgentId: return MatchedBy::AgentId;
    case AnchorKind::Username: return MatchedBy::Username;
    case AnchorKind::Fingerprint: return MatchedBy::Fingerprint;
  }
  return MatchedBy::New;
}

/// Fixed confidence mapping (correlation effectiveness by identity source).
inline Confidence confidence_of(MatchedBy m) {
  switch (m) {
    case MatchedBy::Certificate:
    case MatchedBy::MdmEnrollment:
    case MatchedBy::Mac:
      return Confidence::VeryHigh;
    case MatchedBy::AgentId:
      return Confidence::High;
    case MatchedBy::Username:
    case MatchedBy::Fingerprint:
      return Confidence::Medium;
    case MatchedBy::New:
      return Confidence::New;
    case MatchedBy::NoneEphemeral:
      return Confidence::None;
  }
  return Confidence::None;
}

struct CorrelationResult {
  Pdid pdid;
  MatchedBy matched_by = MatchedBy::New;
  Confidence confidence = Confidence::New;
  bool created = false;
};

/// Priority-ordered identity correlation plus duplicate-PDID prevention.
/// This is the only component that creates PDIDs.
class Correlator {
 public:
  // anchor priority and the username gate are fixed at assembly time; only
  // the feature toggle stays dynamic (read from the store per request)
  explicit Correlator(IdentityStore& store)
      : store_(store), cfg_(store.config()), guard_(cfg_.guard_timeout_ms) {}

  CreationGuardTable& guard() { return guard_; }
  GuardStats guard_stats() const { return guard_.stats(); }

  /// Test hook: runs between guard acquisition and the creation commit.
  std::function<void(const std::string& key)> after_acquire_hook;

  static std::optional<std::string> signal_for(const IdentitySignalSet& s, AnchorKind k) {
    switch (k) {
      case AnchorKind::Certificate: return s.cert_id;
      case AnchorKind::MdmEnrollment: return s.mdm_id;
      case AnchorKind::AgentId: return s.agent_id;
      case AnchorKind::Username: return s.username;
      case AnchorKind::Fingerprint: return s.fingerprint;
    }
    return std::nullopt;
  }

  struct AnchorMatch {
    Pdid pdid;
    AnchorKind kind;
  };

  /// Walks the configured anchor priority; first hit wins. A username alone
  /// matches only when the request carries a fingerprint the record already
  /// holds (or username_sufficient is set).
  std::optional<AnchorMatch> match_anchors(const IdentitySignalSet& signals) const {
    for (AnchorKind kind : cfg_.anchor_priority) {
      auto value = signal_for(signals, kind);
      if (!value) continue;
      auto owner = store_.anchor_owner(kind, *value);
      if (!owner) continue;
      if (kind == AnchorKind::Username && !cfg_.username_sufficient) {
        if (!signals.fingerprint || !store_.record_has_fingerprint(*owner, *signals.fingerprint))
          continue;
      }
      return AnchorMatch{*owner, kind};
    }
    return std::nullopt;
  }

  Result<CorrelationResult> correlate(const IdentitySignalSet& signals, TimeMs now) {
    if (signals.empty()) return Error{Errc::NoSignals, "no identity signals present"};

    if (auto m = match_anchors(signals)) {
      apply_signals(m->pdid, signals, now, m->kind);
      MatchedBy mb = matched_from_anchor(m->kind);
      return CorrelationResult{m->pdid, mb, confidence_of(mb), false};
    }

    // IoT fixed-MAC path: a universally administered MAC is itself a stable
    // identifier; randomized MACs must not take this path.
    if (signals.mac && !signals.mac->locally_administered()) {
      if (auto rec = store_.lookup_by_mac(*signals.mac); rec && !rec->ephemeral) {
        apply_signals(rec->pdid, signals, now, std::nullopt);
        return CorrelationResult{rec->pdid, MatchedBy::Mac, confidence_of(MatchedBy::Mac), false};
      }
    }

    // Unauthenticated hotspot access has no reliable correlation path; each
    // session gets a short-lived ephemeral record.
    if (signals.hint == UseCaseHint::GuestHotspot) {
      CreationSpec spec;
      spec.ephemeral = true;
      spec.mac = signals.mac;
      spec.actor = "auth";
      auto created = store_.create_record(spec, now);
      if (!created.ok()) return created.error();
      return CorrelationResult{created.value(), MatchedBy::NoneEphemeral, Confidence::None, true};
    }

    return create_with_guard(signals, now);
  }

  /// Serialized first-contact creation: acquire the guard for the strongest
  /// signal, re-check the store, and only then mint a PDID. Concurrent
  /// requests for the same identity converge on one record.
  Result<CorrelationResult> create_with_guard(const IdentitySignalSet& signals, TimeMs now) {
    std::string key = guard_key(signals);
    for (;;) {
      CreationGuardTable::Token token;
      auto outcome = guard_.acquire(key, &token);
      if (outcome == CreationGuardTable::Outcome::Timeout)
        return Error{Errc::GuardTimeout, "creation guard for " + key};
      if (outcome == CreationGuardTable::Outcome::HolderFinished) {
        if (auto m = match_anchors(signals)) {
          guard_.note_double_check_save();
          apply_signals(m->pdid, signals, now, m->kind);
          MatchedBy mb = matched_from_anchor(m->kind);
          return CorrelationResult{m->pdid, mb, confidence_of(mb), false};
        }
        continue;  // holder released without creating a match for us
      }

      // acquired: verify no concurrent request beat us to it
      if (auto m = match_anchors(signals)) {
        guard_.release(token);
        guard_.note_double_check_save();
        apply_signals(m->pdid, signals, now, m->kind);
        MatchedBy mb = matched_from_anchor(m->kind);
        return CorrelationResult{m->pdid, mb, confidence_of(mb), false};
      }

      if (after_acquire_hook) after_acquire_hook(key);

      CreationSpec spec;
      spec.ephemeral = false;
      spec.mac = signals.mac;
      spec.fingerprint = signals.fingerprint;
      spec.actor = "auth";
      for (AnchorKind kind :
           {AnchorKind::Certificate, AnchorKind::MdmEnrollment, AnchorKind::AgentId,
            AnchorKind::Username}) {
        if (auto v = signal_for(signals, kind)) spec.anchors[kind] = *v;
      }

      Result<Pdid> created{Error{Errc::EntropyUnavailable, ""}};
      bool committed = guard_.commit(token, [&] { created = store_.create_record(spec, now); });
      if (!committed) {
        // our handle expired and someone else owns creation now; their record
        // is the device's identity
        if (auto m = match_anchors(signals)) {
          guard_.note_double_check_save();
          apply_signals(m->pdid, signals, now, m->kind);
          MatchedBy mb = matched_from_anchor(m->kind);
          return CorrelationResult{m->pdid, mb, confidence_of(mb), false};
        }
        continue;
      }
      if (!created.ok()) return created.error();
      guard_.note_creation();
      return CorrelationResult{created.value(), MatchedBy::New, Confidence::New, true};
    }
  }

  /// Records newly-seen anchors from the request onto the matched record and
  /// associates the MAC. Conflicting anchor evidence lands in profile history
  /// with a warning, never re-anchors.
  void apply_signals(const Pdid& pdid, const IdentitySignalSet& signals, TimeMs now,
                     std::optional<AnchorKind> matched_kind) {
    for (AnchorKind kind : {AnchorKind::Certificate, AnchorKind::MdmEnrollment,
                            AnchorKind::AgentId, AnchorKind::Username}) {
      auto value = signal_for(signals, kind);
      if (!value) continue;
      auto res = store_.set_anchor(pdid, kind, *value, now);
      if (res.ok() && res.value() == AnchorSetResult::Conflict &&
          (!matched_kind || kind != *matched_kind)) {
        store_.record_conflict_value(pdid, kind, *value, now);
      }
    }
    if (signals.fingerprint) store_.add_fingerprint(pdid, *signals.fingerprint, now);
    if (signals.mac) store_.associate_mac(pdid, *signals.mac, now);
  }

  std::string guard_key(const IdentitySignalSet& signals) const {
    for (AnchorKind kind : cfg_.anchor_priority) {
      if (auto v = signal_for(signals, kind))
        return std::string(anchor_name(kind)) + ":" + *v;
    }
    if (signals.mac) return "mac:" + signals.mac->to_string();
    for (AnchorKind kind : {AnchorKind::Certificate, AnchorKind::MdmEnrollment,
                            AnchorKind::AgentId, AnchorKind::Username, AnchorKind::Fingerprint}) {
      if (auto v = signal_for(signals, kind))
        return std::string(anchor_name(kind)) + ":" + *v;
    }
    return "none";
  }

 private:
  IdentityStore& store_;
  StoreConfig cfg_;
  CreationGuardTable guard_;
};

}  // namespace pdid
