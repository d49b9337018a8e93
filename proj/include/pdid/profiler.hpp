#pragma once

#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pdid/correlator.hpp"
#include "pdid/store.hpp"
#include "pdid/util.hpp"

namespace pdid {

enum class ObservationKind { Dhcp, HttpUserAgent, Dns, Snmp, RadiusMab };

inline const char* observation_kind_name(ObservationKind k) {
  switch (k) {
    case ObservationKind::Dhcp: return "dhcp";
    case ObservationKind::HttpUserAgent: return "http_user_agent";
    case ObservationKind::Dns: return "dns";
    case ObservationKind::Snmp: return "snmp";
    case ObservationKind::RadiusMab: return "radius_mab";
  }
  return "?";
}

struct NetworkContext {
  std::string nas_id;
  std::string port;

  std::string key() const { return nas_id + "/" + port; }
};

/// A profiling event: DHCP lease, HTTP User-Agent sighting, MAB auth, or a
/// DNS/SNMP stub carrying opaque attributes.
struct Observation {
  ObservationKind kind = ObservationKind::Dhcp;
  MacAddress mac;
  NetworkContext context;
  TimeMs t = 0;
  std::map<std::string, std::string> attrs;
};

/// Behavioral fingerprint over the selected attributes: DHCP option list,
/// DHCP vendor class, and the User-Agent product family. Hostname is
/// user-mutable and excluded. DNS/SNMP observations never fingerprint.
inline std::optional<std::string> fingerprint(const Observation& obs) {
  if (obs.kind == ObservationKind::Dns || obs.kind == ObservationKind::Snmp) return std::nullopt;

  auto ua_family = [](const std::string& ua) {
    std::string token = ua.substr(0, ua.find(' '));
    auto slash = token.find('/');
    if (slash == std::string::npos) return token;
    std::string version = token.substr(slash + 1);
    auto dot = version.find('.');
    return token.substr(0, slash + 1) + (dot == std::string::npos ? version : version.substr(0, dot));
  };

  std::map<std::string, std::string> selected;
  if (auto it = obs.attrs.find("dhcp_option_list"); it != obs.attrs.end())
    selected["dhcp_option_list"] = it->second;
  if (auto it = obs.attrs.find("dhcp_vendor_class"); it != obs.attrs.end())
    selected["dhcp_vendor_class"] = it->second;
  if (auto it = obs.attrs.find("user_agent"); it != obs.attrs.end())
    selected["ua_family"] = ua_family(it->second);
  if (selected.empty()) return std::nullopt;

  std::string canonical;
  for (const auto& [k, v] : selected) {
    canonical += k;
    canonical += '=';
    canonical += v;
    canonical += '\x1e';
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical)));
  return std::string(buf);
}

/// OUI registry: "aa:bb:cc Vendor Name" per line, '#' comments.
class OuiRegistry {
 public:
  Status load(const std::string& path) {
    std::ifstream in(path);
    if (!in) return Error{Errc::IoFailure, "cannot open " + path};
    std::string line;
    while (std::getline(in, line)) {
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      auto space = t.find(' ');
      if (space == std::string::npos || space != 8) continue;
      add(to_lower(t.substr(0, space)), trim(t.substr(space + 1)));
    }
    return {};
  }

  void add(const std::string& prefix, const std::string& vendor) { table_[prefix] = vendor; }

  std::optional<std::string> lookup(const std::string& prefix) const {
    auto it = table_.find(prefix);
    if (it == table_.end()) return std::nullopt;
    return it->second;
  }

  size_t size() const { return table_.size(); }

 private:
  std::map<std::string, std::string> table_;
};

/// Vendor for a universally administered MAC; locally-administered addresses
/// carry no meaningful OUI.
inline std::optional<std::string> oui_vendor(const MacAddress& mac, const OuiRegistry& table) {
  auto prefix = mac.oui_prefix();
  if (!prefix) return std::nullopt;
  return table.lookup(*prefix);
}

struct ClassificationRule {
  std::string name;
  std::map<std::string, std::string> required_attrs;  // value or trailing-'*' pattern
  std::optional<std::string> oui_vendor;
  int attr_weight = 2;
  int min_score = 1;
};

inline bool pattern_match(const std::string& pattern, const std::string& value) {
  if (!pattern.empty() && pattern.back() == '*')
    return value.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0;
  return pattern == value;
}

enum class IngestVia { Mac, Context, Fingerprint, New, Hotspot, Legacy };

inline const char* ingest_via_name(IngestVia v) {
  switch (v) {
    case IngestVia::Mac: return "mac";
    case IngestVia::Context: return "context";
    case IngestVia::Fingerprint: return "fingerprint";
    case IngestVia::New: return "new";
    case IngestVia::Hotspot: return "hotspot";
    case IngestVia::Legacy: return "legacy";
  }
  return "?";
}

struct IngestOutcome {
  Pdid pdid;  // nil in legacy mode
  IngestVia via = IngestVia::New;
  bool ambiguous = false;
};

/// Ingests network observations, merges cross-MAC observations by network
/// context or fingerprint, and classifies devices with OUI de-prioritization.
class Profiler {
 public:
  Profiler(IdentityStore& store, Correlator& correlator, OuiRegistry registry = {})
      : store_(store),
        correlator_(correlator),
        registry_(std::move(registry)),
        context_window_ms_(store.config().context_window_ms) {}

  OuiRegistry& registry() { return registry_; }
  const OuiRegistry& registry() const { return registry_; }

  std::uint64_t ambiguity_flags() const { return ambiguity_flags_.load(); }

  std::map<std::string, std::uint64_t> via_counters() const {
    std::lock_guard lk(mu_);
    return via_counters_;
  }

  /// Resolution order: MAC binding, shared network context inside the
  /// window, unique fingerprint, then correlation (which may create). A MAC
  /// binding to a record that is still "thin" (identity-less MAB mint) defers
  /// to fingerprint evidence: a context-affine fingerprint holder absorbs the
  /// thin record — the cross-MAC merge of randomized IoT devices.
  Result<IngestOutcome> ingest(const Observation& obs) {
    const TimeMs t = obs.t;
    const std::string ctx_key = obs.context.key();
    auto fp = fingerprint(obs);

    if (!store_.feature_enabled()) {
      store_.legacy_upsert(obs.mac, obs.attrs, observation_kind_name(obs.kind), t);
      return finish({Pdid{}, IngestVia::Legacy, false});
    }

    // 1. MAC binding
    if (auto rec = store_.lookup_by_mac(obs.mac)) {
      if (rec->ephemeral) {
        // hotspot records never correlate; just keep their profile current
        merge_into(rec->pdid, obs, std::nullopt, t);
        return finish({rec->pdid, IngestVia::Hotspot, false});
      }
      if (fp && rec->thin()) {
        auto holders = store_.fingerprint_holders(*fp);
        std::vector<Pdid> affine;
        for (const auto& h : holders) {
          if (auto hr = store_.get(h); hr && hr->contexts.count(ctx_key)) affine.push_back(h);
        }
        if ((holders.size() == 1 && affine.size() == 1) ||
            (holders.size() > 1 && affine.size() == 1)) {
          Pdid winner = affine.front();
          store_.absorb(rec->pdid, winner, t);
          merge_into(winner, obs, fp, t);
          touch_context(ctx_key, winner, t);
          return finish({winner, IngestVia::Fingerprint, false});
        }
        if (holders.size() > 1) {
          ++ambiguity_flags_;
          store_.audit().append({t, "ambiguous_fingerprint", rec->pdid, "profiler",
                                 *fp + " matches " + std::to_string(holders.size()) + " records"});
          merge_into(rec->pdid, obs, fp, t);
          touch_context(ctx_key, rec->pdid, t);
          return finish({rec->pdid, IngestVia::Mac, true});
        }
        // zero holders, or a single holder with no shared context: the
        // evidence is not strong enough to merge, so the record matures
        merge_into(rec->pdid, obs, fp, t);
        touch_context(ctx_key, rec->pdid, t);
        return finish({rec->pdid, IngestVia::Mac, false});
      }
      merge_into(rec->pdid, obs, fp, t);
      touch_context(ctx_key, rec->pdid, t);
      return finish({rec->pdid, IngestVia::Mac, false});
    }

    // 2. shared network context inside the window
    if (auto hit = context_lookup(ctx_key, t)) {
      Pdid pdid = store_.resolve(*hit);
      if (auto rec = store_.get(pdid); rec && !rec->ephemeral) {
        merge_into(pdid, obs, fp, t);
        store_.associate_mac(pdid, obs.mac, t);
        touch_context(ctx_key, pdid, t);
        return finish({pdid, IngestVia::Context, false});
      }
    }

    // 3. fingerprint match
    if (fp) {
      auto holders = store_.fingerprint_holders(*fp);
      if (holders.size() == 1) {
        Pdid pdid = holders.front();
        merge_into(pdid, obs, fp, t);
        store_.associate_mac(pdid, obs.mac, t);
        touch_context(ctx_key, pdid, t);
        return finish({pdid, IngestVia::Fingerprint, false});
      }
      if (holders.size() > 1) {
        std::vector<Pdid> affine;
        for (const auto& h : holders) {
          if (auto hr = store_.get(h); hr && hr->contexts.count(ctx_key)) affine.push_back(h);
        }
        if (affine.size() == 1) {
          Pdid pdid = affine.front();
          merge_into(pdid, obs, fp, t);
          store_.associate_mac(pdid, obs.mac, t);
          touch_context(ctx_key, pdid, t);
          return finish({pdid, IngestVia::Fingerprint, false});
        }
        // ambiguous: park the observation on a fresh ephemeral record
        ++ambiguity_flags_;
        CreationSpec spec;
        spec.ephemeral = true;
        spec.mac = obs.mac;
        spec.actor = "profiler";
        auto created = store_.create_record(spec, t);
        if (!created.ok()) return created.error();
        store_.audit().append({t, "ambiguous_fingerprint", created.value(), "profiler",
                               *fp + " matches " + std::to_string(holders.size()) + " records"});
        merge_into(created.value(), obs, std::nullopt, t);
        return finish({created.value(), IngestVia::New, true});
      }
    }

    // 4. no evidence matches anything: correlate (creates when nothing hits)
    IdentitySignalSet signals;
    signals.mac = obs.mac;
    signals.fingerprint = fp;
    if (obs.kind == ObservationKind::RadiusMab) signals.hint = UseCaseHint::Mab;
    auto res = correlator_.correlate(signals, t);
    if (!res.ok()) return res.error();
    merge_into(res.value().pdid, obs, std::nullopt, t);  // fp already applied by correlate
    touch_context(ctx_key, res.value().pdid, t);
    return finish({res.value().pdid, IngestVia::New, false});
  }

  /// Scores classification rules against a record. Behavioral attributes
  /// weigh 2, an OUI match weighs 1, and the OUI weight drops to 0 when the
  /// record has only locally-administered MACs and no retained OUI history.
  std::optional<std::string> classify(const DeviceRecord& record,
                                      const std::vector<ClassificationRule>& rules) const {
    bool any_universal = false;
    for (const auto& me : record.macs)
      if (!me.mac.locally_administered()) any_universal = true;
    const bool oui_usable = any_universal || record.historical_oui.has_value();

    std::optional<std::string> vendor;
    if (oui_usable) {
      if (record.historical_oui) vendor = registry_.lookup(*record.historical_oui);
      if (!vendor) {
        for (const auto& me : record.macs) {
          if (auto v = oui_vendor(me.mac, registry_)) {
            vendor = v;
            break;
          }
        }
      }
    }

    int best = 0;
    std::optional<std::string> best_name;
    bool tie = false;
    for (const auto& rule : rules) {
      bool all = true;
      for (const auto& [key, pattern] : rule.required_attrs) {
        auto it = record.profile.find(key);
        if (it == record.profile.end() || !pattern_match(pattern, it->second.current.value)) {
          all = false;
          break;
        }
      }
      if (!all) continue;
      int score = static_cast<int>(rule.required_attrs.size()) * rule.attr_weight;
      if (rule.oui_vendor && oui_usable && vendor && *vendor == *rule.oui_vendor) score += 1;
      if (score < rule.min_score) continue;
      if (score > best) {
        best = score;
        best_name = rule.name;
        tie = false;
      } else if (score == best && best > 0) {
        tie = true;
      }
    }
    if (tie) return std::nullopt;
    return best_name;
  }

 private:
  Result<IngestOutcome> finish(IngestOutcome outcome) {
    std::lock_guard lk(mu_);
    ++via_counters_[ingest_via_name(outcome.via)];
    return outcome;
  }

  void merge_into(const Pdid& pdid, const Observation& obs, const std::optional<std::string>& fp,
                  TimeMs t) {
    store_.merge_attributes(pdid, obs.attrs, observation_kind_name(obs.kind), t);
    store_.add_context(pdid, obs.context.key(), t);
    if (fp) store_.add_fingerprint(pdid, *fp, t);
    store_.associate_mac(pdid, obs.mac, t);
  }

  std::optional<Pdid> context_lookup(const std::string& ctx_key, TimeMs t) const {
    std::lock_guard lk(mu_);
    auto it = context_index_.find(ctx_key);
    if (it == context_index_.end()) return std::nullopt;
    if (t - it->second.second > context_window_ms_) return std::nullopt;
    return it->second.first;
  }

  void touch_context(const std::string& ctx_key, const Pdid& pdid, TimeMs t) {
    std::lock_guard lk(mu_);
    context_index_[ctx_key] = {pdid, t};
  }

  IdentityStore& store_;
  Correlator& correlator_;
  OuiRegistry registry_;
  TimeMs context_window_ms_;
  mutable std::mutex mu_;
  std::map<std::string, std::pair<Pdid, TimeMs>> context_index_;
  std::map<std::string, std::uint64_t> via_counters_;
  std::atomic<std::uint64_t> ambiguity_flags_{0};
};

}  // namespace pdid
