#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "pdid/audit.hpp"
#include "pdid/entropy.hpp"
#include "pdid/errors.hpp"
#include "pdid/io.hpp"
#include "pdid/mac.hpp"
#include "pdid/util.hpp"
#include "pdid/uuid.hpp"

namespace pdid {

enum class AnchorKind : std::uint8_t {
  Certificate = 0,
  MdmEnrollment = 1,
  AgentId = 2,
  Username = 3,
  Fingerprint = 4,
};

inline const char* anchor_name(AnchorKind k) {
  switch (k) {
    case AnchorKind::Certificate: return "certificate";
    case AnchorKind::MdmEnrollment: return "mdm_enrollment";
    case AnchorKind::AgentId: return "agent_id";
    case AnchorKind::Username: return "username";
    case AnchorKind::Fingerprint: return "fingerprint";
  }
  return "?";
}

inline std::optional<AnchorKind> anchor_from_name(std::string_view s) {
  if (s == "certificate") return AnchorKind::Certificate;
  if (s == "mdm_enrollment") return AnchorKind::MdmEnrollment;
  if (s == "agent_id") return AnchorKind::AgentId;
  if (s == "username") return AnchorKind::Username;
  if (s == "fingerprint") return AnchorKind::Fingerprint;
  return std::nullopt;
}

struct StoreConfig {
  bool feature_enabled = true;
  TimeMs retention_ms = 180 * kDay;
  TimeMs ephemeral_retention_ms = 24 * kHour;
  size_t max_macs_per_pdid = 64;
  std::vector<AnchorKind> anchor_priority = {
      AnchorKind::Certificate, AnchorKind::MdmEnrollment, AnchorKind::AgentId,
      AnchorKind::Username, AnchorKind::Fingerprint};
  bool username_sufficient = false;
  TimeMs guard_timeout_ms = 5000;
  TimeMs context_window_ms = 120 * kSecond;

  bool priority_valid() const {
    std::set<AnchorKind> seen;
    for (auto k : anchor_priority)
      if (!seen.insert(k).second) return false;
    return true;
  }
};

struct ProfileValue {
  std::string value;
  std::string source;
  TimeMs t = 0;
};

struct ProfileEntry {
  ProfileValue current;
  std::deque<ProfileValue> history;  // bounded, newest first

  static constexpr size_t kHistoryDepth = 4;

  void push_history(ProfileValue v) {
    history.push_front(std::move(v));
    while (history.size() > kHistoryDepth) history.pop_back();
  }
};

struct MacEntry {
  MacAddress mac;
  TimeMs first_seen = 0;
  TimeMs last_seen = 0;
};

struct DeviceRecord {
  Pdid pdid;
  bool ephemeral = false;
  TimeMs created_at = 0;
  TimeMs last_activity = 0;
  std::optional<std::string> historical_oui;  // OUI prefix of a universal MAC
  std::vector<MacEntry> macs;
  std::map<AnchorKind, std::string> anchors;
  std::set<std::string> fingerprints;
  std::map<std::string, ProfileEntry> profile;
  std::set<std::string> contexts;  // nas/port pairs this device was seen at

  bool has_mac(const MacAddress& m) const {
    return std::any_of(macs.begin(), macs.end(),
                       [&](const MacEntry& e) { return e.mac == m; });
  }

  /// Credential anchors bind identity; fingerprints are weaker evidence and
  /// do not make a record "anchored".
  bool has_credential_anchor() const {
    for (const auto& [k, v] : anchors)
      if (k != AnchorKind::Fingerprint) return true;
    return false;
  }

  /// A record minted by an identity-less MAB auth: nothing but MACs yet.
  bool thin() const { return !ephemeral && !has_credential_anchor() && fingerprints.empty(); }
};

struct LegacyRecord {
  std::string mac;  // canonical form; the legacy key
  TimeMs first_seen = 0;
  TimeMs last_seen = 0;
  std::map<std::string, ProfileValue> profile;
};

struct LicenseCount {
  size_t persistent = 0;
  size_t ephemeral = 0;
};

struct CreationSpec {
  bool ephemeral = false;
  std::map<AnchorKind, std::string> anchors;
  std::optional<MacAddress> mac;
  std::optional<std::string> fingerprint;
  std::string actor = "auth";
};

enum class AnchorSetResult { Set, AlreadySelf, Conflict };

/// The persistent identity store: PDID generation, MAC and anchor indexes,
/// profile merging, retention, licensing counts and snapshot persistence.
/// Every public operation is atomic under one mutex; creation is not
/// deduplicated here (the correlator's guard owns that).
class IdentityStore {
 public:
  explicit IdentityStore(StoreConfig config = {},
                         std::unique_ptr<EntropySource> entropy = nullptr)
      : config_(std::move(config)),
        entropy_(entropy ? std::move(entropy) : std::make_unique<SystemEntropy>()) {}

  // -- configuration ---------------------------------------------------

  StoreConfig config() const {
    std::lock_guard lk(mu_);
    return config_;
  }

  bool feature_enabled() const {
    std::lock_guard lk(mu_);
    return config_.feature_enabled;
  }

  void set_feature_enabled(bool on) {
    std::lock_guard lk(mu_);
    config_.feature_enabled = on;
  }

  AuditLog& audit() { return audit_; }
  const AuditLog& audit() const { return audit_; }

  // -- PDID generation ---------------------------------------------------

  Result<Pdid> generate_pdid() {
    std::lock_guard lk(mu_);
    return generate_locked();
  }

  // -- lookups -----------------------------------------------------------

  std::optional<DeviceRecord> lookup_by_anchor(AnchorKind kind, const std::string& value) const {
    std::lock_guard lk(mu_);
    if (kind == AnchorKind::Fingerprint) {
      // fingerprints may be held by several records; only a unique holder
      // counts as an anchor hit
      auto it = fp_index_.find(value);
      if (it == fp_index_.end() || it->second.size() != 1) return std::nullopt;
      auto rit = records_.find(*it->second.begin());
      if (rit == records_.end()) return std::nullopt;
      return rit->second;
    }
    auto it = anchor_index_.find(anchor_key(kind, value));
    if (it == anchor_index_.end()) return std::nullopt;
    auto rit = records_.find(it->second);
    if (rit == records_.end()) return std::nullopt;
    return rit->second;
  }

  /// Copy-free variant of lookup_by_anchor for the correlator's hot path.
  std::optional<Pdid> anchor_owner(AnchorKind kind, const std::string& value) const {
    std::lock_guard lk(mu_);
    if (kind == AnchorKind::Fingerprint) {
      auto it = fp_index_.find(value);
      if (it == fp_index_.end() || it->second.size() != 1) return std::nullopt;
      return *it->second.begin();
    }
    auto it = anchor_index_.find(anchor_key(kind, value));
    if (it == anchor_index_.end()) return std::nullopt;
    return it->second;
  }

  bool record_has_fingerprint(const Pdid& pdid, const std::string& fp) const {
    std::lock_guard lk(mu_);
    auto it = records_.find(resolve_locked(pdid));
    return it != records_.end() && it->second.fingerprints.count(fp) > 0;
  }

  std::optional<DeviceRecord> lookup_by_mac(const MacAddress& mac) const {
    std::lock_guard lk(mu_);
    auto it = mac_index_.find(mac.to_string());
    if (it == mac_index_.end()) return std::nullopt;
    auto rit = records_.find(it->second);
    if (rit == records_.end()) return std::nullopt;
    return rit->second;
  }

  std::optional<DeviceRecord> get(const Pdid& pdid) const {
    std::lock_guard lk(mu_);
    auto it = records_.find(resolve_locked(pdid));
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  bool exists(const Pdid& pdid) const {
    std::lock_guard lk(mu_);
    return records_.count(resolve_locked(pdid)) > 0;
  }

  /// Follows absorption tombstones to the surviving identity.
  Pdid resolve(const Pdid& pdid) const {
    std::lock_guard lk(mu_);
    return resolve_locked(pdid);
  }

  std::vector<Pdid> fingerprint_holders(const std::string& fp) const {
    std::lock_guard lk(mu_);
    std::vector<Pdid> out;
    auto it = fp_index_.find(fp);
    if (it != fp_index_.end()) out.assign(it->second.begin(), it->second.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<DeviceRecord> all_records() const {
    std::lock_guard lk(mu_);
    std::vector<DeviceRecord> out;
    out.reserve(records_.size());
    for (const auto& [k, r] : records_) out.push_back(r);
    std::sort(out.begin(), out.end(),
              [](const DeviceRecord& a, const DeviceRecord& b) { return a.pdid < b.pdid; });
    return out;
  }

  // -- mutations -----------------------------------------------------------

  /// Creates a record with its anchors, MAC and fingerprint in one atomic
  /// step (the correlator calls this inside its creation guard).
  Result<Pdid> create_record(const CreationSpec& spec, TimeMs now) {
    std::lock_guard lk(mu_);
    auto gen = generate_locked();
    if (!gen.ok()) return gen.error();
    Pdid pdid = gen.value();
    DeviceRecord rec;
    rec.pdid = pdid;
    rec.ephemeral = spec.ephemeral;
    rec.created_at = now;
    rec.last_activity = now;
    records_.emplace(pdid, std::move(rec));
    audit_.append({now, "created", pdid, spec.actor, spec.ephemeral ? "ephemeral" : ""});
    if (!spec.ephemeral) {
      for (const auto& [kind, value] : spec.anchors) set_anchor_locked(pdid, kind, value, now);
      if (spec.fingerprint) add_fingerprint_locked(pdid, *spec.fingerprint, now);
    }
    if (spec.mac) associate_mac_locked(pdid, *spec.mac, now);
    return pdid;
  }

  Status associate_mac(const Pdid& pdid, const MacAddress& mac, TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    if (!records_.count(id)) return Error{Errc::UnknownPdid, pdid.to_string()};
    associate_mac_locked(id, mac, t);
    return {};
  }

  Result<AnchorSetResult> set_anchor(const Pdid& pdid, AnchorKind kind, const std::string& value,
                                     TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    if (!records_.count(id)) return Error{Errc::UnknownPdid, pdid.to_string()};
    return set_anchor_locked(id, kind, value, t);
  }

  Status add_fingerprint(const Pdid& pdid, const std::string& fp, TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    if (!records_.count(id)) return Error{Errc::UnknownPdid, pdid.to_string()};
    add_fingerprint_locked(id, fp, t);
    return {};
  }

  Status add_context(const Pdid& pdid, const std::string& ctx, TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    auto it = records_.find(id);
    if (it == records_.end()) return Error{Errc::UnknownPdid, pdid.to_string()};
    it->second.contexts.insert(ctx);
    it->second.last_activity = std::max(it->second.last_activity, t);
    return {};
  }

  Status merge_attributes(const Pdid& pdid, const std::map<std::string, std::string>& attrs,
                          const std::string& source, TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    auto it = records_.find(id);
    if (it == records_.end()) return Error{Errc::UnknownPdid, pdid.to_string()};
    for (const auto& [key, value] : attrs) merge_attr_locked(it->second, key, {value, source, t});
    it->second.last_activity = std::max(it->second.last_activity, t);
    audit_.append({t, "attrs_merged", id, source, std::to_string(attrs.size()) + " keys"});
    return {};
  }

  /// Record a profile value without anchoring (used for conflicting anchor
  /// evidence, which must never silently re-anchor).
  Status record_conflict_value(const Pdid& pdid, AnchorKind kind, const std::string& value,
                               TimeMs t) {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    auto it = records_.find(id);
    if (it == records_.end()) return Error{Errc::UnknownPdid, pdid.to_string()};
    merge_attr_locked(it->second, std::string("conflict.") + anchor_name(kind),
                      {value, "conflict", t});
    audit_.append({t, "anchor_conflict", id, "auth",
                   std::string(anchor_name(kind)) + "=" + value});
    return {};
  }

  /// Merges `loser` into `winner` and leaves an alias tombstone. Used by the
  /// profiler when fingerprint evidence shows two records are one device.
  Status absorb(const Pdid& loser, const Pdid& winner, TimeMs now) {
    std::lock_guard lk(mu_);
    Pdid lo = resolve_locked(loser), wi = resolve_locked(winner);
    if (lo == wi) return {};
    auto lit = records_.find(lo);
    auto wit = records_.find(wi);
    if (lit == records_.end() || wit == records_.end())
      return Error{Errc::UnknownPdid, "absorb"};
    DeviceRecord& src = lit->second;
    DeviceRecord& dst = wit->second;

    for (const auto& me : src.macs) {
      mac_index_.erase(me.mac.to_string());
      associate_mac_locked(wi, me.mac, me.last_seen, me.first_seen);
    }
    for (const auto& [kind, value] : src.anchors) {
      if (kind == AnchorKind::Fingerprint) continue;
      anchor_index_.erase(anchor_key(kind, value));
      if (!dst.anchors.count(kind)) set_anchor_locked(wi, kind, value, now);
    }
    for (const auto& fp : src.fingerprints) {
      auto& holders = fp_index_[fp];
      holders.erase(lo);
      add_fingerprint_locked(wi, fp, now);
    }
    for (auto& [key, entry] : src.profile) {
      auto dit = dst.profile.find(key);
      if (dit == dst.profile.end()) {
        dst.profile.emplace(key, std::move(entry));
      } else {
        merge_attr_locked(dst, key, entry.current);
        for (auto& h : entry.history) dit->second.push_history(std::move(h));
      }
    }
    for (const auto& c : src.contexts) dst.contexts.insert(c);
    if (!dst.historical_oui && src.historical_oui) dst.historical_oui = src.historical_oui;
    dst.last_activity = std::max({dst.last_activity, src.last_activity, now});

    records_.erase(lit);
    alias_[lo] = wi;
    audit_.append({now, "absorbed", wi, "profiler", "absorbed " + lo.to_string()});
    return {};
  }

  /// Removes a record with all its index entries. Absent is a normal result.
  bool delete_pdid(const Pdid& pdid, TimeMs now, const std::string& actor = "cli") {
    std::lock_guard lk(mu_);
    Pdid id = resolve_locked(pdid);
    auto it = records_.find(id);
    if (it == records_.end()) return false;
    drop_record_locked(it);
    audit_.append({now, "deleted", id, actor, ""});
    return true;
  }

  /// Removes records idle past their retention horizon.
  size_t prune(TimeMs now) {
    std::lock_guard lk(mu_);
    std::vector<Pdid> doomed;
    for (const auto& [id, rec] : records_) {
      TimeMs horizon = rec.ephemeral ? config_.ephemeral_retention_ms : config_.retention_ms;
      if (now - rec.last_activity > horizon) doomed.push_back(id);
    }
    std::sort(doomed.begin(), doomed.end());
    for (const auto& id : doomed) {
      auto it = records_.find(id);
      drop_record_locked(it);
      audit_.append({now, "pruned", id, "prune", ""});
    }
    return doomed.size();
  }

  LicenseCount license_count() const {
    std::lock_guard lk(mu_);
    LicenseCount c;
    for (const auto& [id, rec] : records_) {
      if (rec.ephemeral)
        ++c.ephemeral;
      else
        ++c.persistent;
    }
    return c;
  }

  // -- legacy (MAC-keyed) records, for mixed-mode migration ---------------

  void legacy_upsert(const MacAddress& mac, const std::map<std::string, std::string>& attrs,
                     const std::string& source, TimeMs t) {
    std::lock_guard lk(mu_);
    auto& rec = legacy_[mac.to_string()];
    if (rec.mac.empty()) {
      rec.mac = mac.to_string();
      rec.first_seen = t;
    }
    rec.last_seen = std::max(rec.last_seen, t);
    for (const auto& [k, v] : attrs) {
      auto it = rec.profile.find(k);
      if (it == rec.profile.end() || t >= it->second.t) rec.profile[k] = {v, source, t};
    }
  }

  std::optional<LegacyRecord> legacy_get(const MacAddress& mac) const {
    std::lock_guard lk(mu_);
    auto it = legacy_.find(mac.to_string());
    if (it == legacy_.end()) return std::nullopt;
    return it->second;
  }

  size_t legacy_count() const {
    std::lock_guard lk(mu_);
    return legacy_.size();
  }

  /// Folds a legacy MAC-keyed record into `pdid` and retires it. Returns
  /// false when no legacy record exists for the MAC.
  bool adopt_legacy(const MacAddress& mac, const Pdid& pdid, TimeMs now) {
    std::lock_guard lk(mu_);
    auto lit = legacy_.find(mac.to_string());
    if (lit == legacy_.end()) return false;
    Pdid id = resolve_locked(pdid);
    auto rit = records_.find(id);
    if (rit == records_.end()) return false;
    for (const auto& [key, pv] : lit->second.profile) merge_attr_locked(rit->second, key, pv);
    associate_mac_locked(id, mac, now, lit->second.first_seen);
    rit->second.last_activity = std::max(rit->second.last_activity, now);
    legacy_.erase(lit);
    audit_.append({now, "migrated", id, "auth", "legacy mac " + mac.to_string()});
    return true;
  }

  // -- persistence ---------------------------------------------------------

  Status snapshot_save(const std::string& path) const {
    std::lock_guard lk(mu_);
    BinaryWriter w;
    w.u32(kSnapshotVersion);
    w.u64(records_.size());
    for (const auto& rec : sorted_records_locked()) write_record(w, *rec);
    // the MAC index carries "most recently associated" state that is not
    // derivable from the records themselves
    w.u64(mac_index_.size());
    {
      std::vector<std::pair<std::string, Pdid>> entries(mac_index_.begin(), mac_index_.end());
      std::sort(entries.begin(), entries.end());
      for (const auto& [key, id] : entries) {
        w.str(key);
        w.bytes(id.bytes().data(), 16);
      }
    }
    w.u64(alias_.size());
    {
      std::vector<std::pair<Pdid, Pdid>> pairs(alias_.begin(), alias_.end());
      std::sort(pairs.begin(), pairs.end());
      for (const auto& [from, to] : pairs) {
        w.bytes(from.bytes().data(), 16);
        w.bytes(to.bytes().data(), 16);
      }
    }
    w.u64(legacy_.size());
    {
      std::vector<const LegacyRecord*> recs;
      for (const auto& [k, v] : legacy_) recs.push_back(&v);
      std::sort(recs.begin(), recs.end(),
                [](const LegacyRecord* a, const LegacyRecord* b) { return a->mac < b->mac; });
      for (const auto* rec : recs) {
        w.str(rec->mac);
        w.i64(rec->first_seen);
        w.i64(rec->last_seen);
        w.u32(static_cast<std::uint32_t>(rec->profile.size()));
        for (const auto& [key, pv] : rec->profile) {
          w.str(key);
          write_value(w, pv);
        }
      }
    }
    {
      auto events = audit_.all();
      w.u64(events.size());
      for (const auto& e : events) {
        w.i64(e.t);
        w.str(e.op);
        w.bytes(e.pdid.bytes().data(), 16);
        w.str(e.actor);
        w.str(e.detail);
      }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) return Error{Errc::IoFailure, "cannot open " + path};
    out.write(kSnapshotMagic, 8);
    const auto& payload = w.data();
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    std::uint32_t crc = crc32(payload.data(), payload.size());
    std::uint8_t crc_le[4] = {static_cast<std::uint8_t>(crc), static_cast<std::uint8_t>(crc >> 8),
                              static_cast<std::uint8_t>(crc >> 16),
                              static_cast<std::uint8_t>(crc >> 24)};
    out.write(reinterpret_cast<const char*>(crc_le), 4);
    if (!out) return Error{Errc::IoFailure, "write failed: " + path};
    return {};
  }

  Status snapshot_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return Error{Errc::IoFailure, "cannot open " + path};
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (raw.size() < 12 || std::memcmp(raw.data(), kSnapshotMagic, 8) != 0)
      return Error{Errc::CorruptSnapshot, "bad magic"};
    size_t payload_len = raw.size() - 12;
    const std::uint8_t* payload = raw.data() + 8;
    std::uint32_t stored = std::uint32_t(raw[raw.size() - 4]) |
                           (std::uint32_t(raw[raw.size() - 3]) << 8) |
                           (std::uint32_t(raw[raw.size() - 2]) << 16) |
                           (std::uint32_t(raw[raw.size() - 1]) << 24);
    if (crc32(payload, payload_len) != stored)
      return Error{Errc::CorruptSnapshot, "checksum mismatch"};

    BinaryReader r(payload, payload_len);
    if (r.u32() != kSnapshotVersion) return Error{Errc::CorruptSnapshot, "unknown version"};

    std::lock_guard lk(mu_);
    records_.clear();
    mac_index_.clear();
    anchor_index_.clear();
    fp_index_.clear();
    alias_.clear();
    legacy_.clear();

    std::uint64_t nrec = r.u64();
    for (std::uint64_t i = 0; i < nrec && !r.failed(); ++i) {
      DeviceRecord rec = read_record(r);
      if (r.failed()) break;
      if (!rec.ephemeral) {
        for (const auto& [kind, value] : rec.anchors)
          if (kind != AnchorKind::Fingerprint) anchor_index_[anchor_key(kind, value)] = rec.pdid;
        for (const auto& fp : rec.fingerprints) fp_index_[fp].insert(rec.pdid);
      }
      records_.emplace(rec.pdid, std::move(rec));
    }
    std::uint64_t nmacidx = r.u64();
    for (std::uint64_t i = 0; i < nmacidx && !r.failed(); ++i) {
      std::string key = r.str();
      Pdid::Bytes b{};
      r.bytes(b.data(), 16);
      if (!r.failed()) mac_index_[key] = Pdid(b);
    }
    std::uint64_t nalias = r.u64();
    for (std::uint64_t i = 0; i < nalias && !r.failed(); ++i) {
      Pdid::Bytes fb{}, tb{};
      r.bytes(fb.data(), 16);
      r.bytes(tb.data(), 16);
      alias_[Pdid(fb)] = Pdid(tb);
    }
    std::uint64_t nlegacy = r.u64();
    for (std::uint64_t i = 0; i < nlegacy && !r.failed(); ++i) {
      LegacyRecord rec;
      rec.mac = r.str();
      rec.first_seen = r.i64();
      rec.last_seen = r.i64();
      std::uint32_t n = r.u32();
      for (std::uint32_t j = 0; j < n && !r.failed(); ++j) {
        std::string key = r.str();
        rec.profile[key] = read_value(r);
      }
      legacy_[rec.mac] = std::move(rec);
    }
    std::uint64_t nev = r.u64();
    for (std::uint64_t i = 0; i < nev && !r.failed(); ++i) {
      AuditEvent e;
      e.t = r.i64();
      e.op = r.str();
      Pdid::Bytes b{};
      r.bytes(b.data(), 16);
      e.pdid = Pdid(b);
      e.actor = r.str();
      e.detail = r.str();
      if (!r.failed()) audit_.append(std::move(e));
    }
    if (r.failed()) return Error{Errc::CorruptSnapshot, "truncated payload"};
    return {};
  }

 private:
  static constexpr const char* kSnapshotMagic = "PDIDSNP1";
  static constexpr std::uint32_t kSnapshotVersion = 1;

  static std::string anchor_key(AnchorKind kind, const std::string& value) {
    return std::string(anchor_name(kind)) + "\x1f" + value;
  }

  Result<Pdid> generate_locked() {
    for (int attempt = 0; attempt < 4; ++attempt) {
      auto p = Pdid::generate(*entropy_);
      if (!p.ok()) return p;
      if (!records_.count(p.value()) && !alias_.count(p.value())) return p;
    }
    return Error{Errc::EntropyUnavailable, "repeated PDID collisions"};
  }

  Pdid resolve_locked(Pdid id) const {
    for (int hops = 0; hops < 64; ++hops) {
      auto it = alias_.find(id);
      if (it == alias_.end()) return id;
      id = it->second;
    }
    return id;
  }

  void associate_mac_locked(const Pdid& id, const MacAddress& mac, TimeMs t,
                            std::optional<TimeMs> first = std::nullopt) {
    DeviceRecord& rec = records_.at(id);
    auto it = std::find_if(rec.macs.begin(), rec.macs.end(),
                           [&](const MacEntry& e) { return e.mac == mac; });
    if (it != rec.macs.end()) {
      it->last_seen = std::max(it->last_seen, t);
      if (first) it->first_seen = std::min(it->first_seen, *first);
    } else {
      rec.macs.push_back({mac, first.value_or(t), t});
      audit_.append({t, "mac_associated", id, "auth", mac.to_string()});
    }
    if (!rec.historical_oui && !mac.locally_administered()) rec.historical_oui = mac.oui_prefix();
    mac_index_[mac.to_string()] = id;
    rec.last_activity = std::max(rec.last_activity, t);

    while (rec.macs.size() > config_.max_macs_per_pdid) {
      auto oldest = std::min_element(rec.macs.begin(), rec.macs.end(),
                                     [](const MacEntry& a, const MacEntry& b) {
                                       return a.last_seen < b.last_seen;
                                     });
      std::string key = oldest->mac.to_string();
      auto idx = mac_index_.find(key);
      if (idx != mac_index_.end() && idx->second == id) mac_index_.erase(idx);
      audit_.append({t, "mac_evicted", id, "auth", key});
      rec.macs.erase(oldest);
    }
  }

  AnchorSetResult set_anchor_locked(const Pdid& id, AnchorKind kind, const std::string& value,
                                    TimeMs t) {
    DeviceRecord& rec = records_.at(id);
    if (rec.ephemeral) return AnchorSetResult::Conflict;  // ephemeral records hold no anchors
    if (kind == AnchorKind::Fingerprint) {
      add_fingerprint_locked(id, value, t);
      return AnchorSetResult::Set;
    }
    auto existing = rec.anchors.find(kind);
    if (existing != rec.anchors.end())
      return existing->second == value ? AnchorSetResult::AlreadySelf : AnchorSetResult::Conflict;
    auto key = anchor_key(kind, value);
    auto owner = anchor_index_.find(key);
    if (owner != anchor_index_.end() && owner->second != id) return AnchorSetResult::Conflict;
    rec.anchors[kind] = value;
    anchor_index_[key] = id;
    rec.last_activity = std::max(rec.last_activity, t);
    audit_.append({t, "anchor_added", id, "auth",
                   std::string(anchor_name(kind)) + "=" + value});
    return AnchorSetResult::Set;
  }

  void add_fingerprint_locked(const Pdid& id, const std::string& fp, TimeMs t) {
    DeviceRecord& rec = records_.at(id);
    if (rec.ephemeral) return;
    if (rec.fingerprints.insert(fp).second) {
      fp_index_[fp].insert(id);
      audit_.append({t, "fingerprint_added", id, "profiler", fp});
    }
    rec.last_activity = std::max(rec.last_activity, t);
  }

  void merge_attr_locked(DeviceRecord& rec, const std::string& key, ProfileValue incoming) {
    auto it = rec.profile.find(key);
    if (it == rec.profile.end()) {
      rec.profile[key].current = std::move(incoming);
      return;
    }
    ProfileEntry& entry = it->second;
    if (incoming.t >= entry.current.t) {
      entry.push_history(std::move(entry.current));
      entry.current = std::move(incoming);
    } else {
      entry.push_history(std::move(incoming));
    }
  }

  void drop_record_locked(std::unordered_map<Pdid, DeviceRecord, PdidHash>::iterator it) {
    const DeviceRecord& rec = it->second;
    for (const auto& me : rec.macs) {
      auto idx = mac_index_.find(me.mac.to_string());
      if (idx != mac_index_.end() && idx->second == rec.pdid) mac_index_.erase(idx);
    }
    for (const auto& [kind, value] : rec.anchors) {
      if (kind == AnchorKind::Fingerprint) continue;
      auto idx = anchor_index_.find(anchor_key(kind, value));
      if (idx != anchor_index_.end() && idx->second == rec.pdid) anchor_index_.erase(idx);
    }
    for (const auto& fp : rec.fingerprints) {
      auto idx = fp_index_.find(fp);
      if (idx != fp_index_.end()) {
        idx->second.erase(rec.pdid);
        if (idx->second.empty()) fp_index_.erase(idx);
      }
    }
    records_.erase(it);
  }

  std::vector<const DeviceRecord*> sorted_records_locked() const {
    std::vector<const DeviceRecord*> out;
    out.reserve(records_.size());
    for (const auto& [k, r] : records_) out.push_back(&r);
    std::sort(out.begin(), out.end(),
              [](const DeviceRecord* a, const DeviceRecord* b) { return a->pdid < b->pdid; });
    return out;
  }

  static void write_value(BinaryWriter& w, const ProfileValue& v) {
    w.str(v.value);
    w.str(v.source);
    w.i64(v.t);
  }

  static ProfileValue read_value(BinaryReader& r) {
    ProfileValue v;
    v.value = r.str();
    v.source = r.str();
    v.t = r.i64();
    return v;
  }

  static void write_record(BinaryWriter& w, const DeviceRecord& rec) {
    w.bytes(rec.pdid.bytes().data(), 16);
    std::uint8_t flags = 0;
    if (rec.ephemeral) flags |= 1;
    if (rec.historical_oui) flags |= 2;
    w.u8(flags);
    w.i64(rec.created_at);
    w.i64(rec.last_activity);
    if (rec.historical_oui) w.str(*rec.historical_oui);
    w.u32(static_cast<std::uint32_t>(rec.macs.size()));
    for (const auto& me : rec.macs) {
      w.bytes(me.mac.bytes().data(), 6);
      w.i64(me.first_seen);
      w.i64(me.last_seen);
    }
    w.u32(static_cast<std::uint32_t>(rec.anchors.size()));
    for (const auto& [kind, value] : rec.anchors) {
      w.u8(static_cast<std::uint8_t>(kind));
      w.str(value);
    }
    w.u32(static_cast<std::uint32_t>(rec.fingerprints.size()));
    for (const auto& fp : rec.fingerprints) w.str(fp);
    w.u32(static_cast<std::uint32_t>(rec.contexts.size()));
    for (const auto& c : rec.contexts) w.str(c);
    w.u32(static_cast<std::uint32_t>(rec.profile.size()));
    for (const auto& [key, entry] : rec.profile) {
      w.str(key);
      write_value(w, entry.current);
      w.u32(static_cast<std::uint32_t>(entry.history.size()));
      for (const auto& h : entry.history) write_value(w, h);
    }
  }

  static DeviceRecord read_record(BinaryReader& r) {
    DeviceRecord rec;
    Pdid::Bytes pb{};
    r.bytes(pb.data(), 16);
    rec.pdid = Pdid(pb);
    std::uint8_t flags = r.u8();
    rec.ephemeral = flags & 1;
    rec.created_at = r.i64();
    rec.last_activity = r.i64();
    if (flags & 2) rec.historical_oui = r.str();
    std::uint32_t nmac = r.u32();
    for (std::uint32_t i = 0; i < nmac && !r.failed(); ++i) {
      MacEntry me;
      MacAddress::Bytes mb{};
      r.bytes(mb.data(), 6);
      me.mac = MacAddress(mb);
      me.first_seen = r.i64();
      me.last_seen = r.i64();
      rec.macs.push_back(me);
    }
    std::uint32_t nanchor = r.u32();
    for (std::uint32_t i = 0; i < nanchor && !r.failed(); ++i) {
      auto kind = static_cast<AnchorKind>(r.u8());
      rec.anchors[kind] = r.str();
    }
    std::uint32_t nfp = r.u32();
    for (std::uint32_t i = 0; i < nfp && !r.failed(); ++i) rec.fingerprints.insert(r.str());
    std::uint32_t nctx = r.u32();
    for (std::uint32_t i = 0; i < nctx && !r.failed(); ++i) rec.contexts.insert(r.str());
    std::uint32_t nprof = r.u32();
    for (std::uint32_t i = 0; i < nprof && !r.failed(); ++i) {
      std::string key = r.str();
      ProfileEntry entry;
      entry.current = read_value(r);
      std::uint32_t nh = r.u32();
      for (std::uint32_t j = 0; j < nh && !r.failed(); ++j) entry.history.push_back(read_value(r));
      rec.profile[key] = std::move(entry);
    }
    return rec;
  }

  mutable std::mutex mu_;
  StoreConfig config_;
  std::unique_ptr<EntropySource> entropy_;
  std::unordered_map<Pdid, DeviceRecord, PdidHash> records_;
  std::unordered_map<std::string, Pdid> mac_index_;     // canonical mac -> most recent record
  std::unordered_map<std::string, Pdid> anchor_index_;  // credential anchors, unique
  std::unordered_map<std::string, std::set<Pdid>> fp_index_;  // fingerprints, multi-holder
  std::unordered_map<Pdid, Pdid, PdidHash> alias_;      // absorbed -> survivor
  std::unordered_map<std::string, LegacyRecord> legacy_;
  AuditLog audit_;
};

}  // namespace pdid
