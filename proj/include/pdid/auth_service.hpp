#pragma once

#include <algorithm>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pdid/correlator.hpp"
#include "pdid/profiler.hpp"
#include "pdid/radius.hpp"
#include "pdid/session.hpp"
#include "pdid/store.hpp"

namespace pdid {

struct NasClient {
  std::string name;
  std::string address;  // source key ("ip" or "ip:port" as configured)
  radius::SharedSecret secret;
  UseCaseHint hint = UseCaseHint::None;
};

struct ServerConfig {
  std::uint16_t auth_port = 1812;
  std::uint16_t acct_port = 1813;
  bool reject_unknown_signals = false;
  std::map<std::string, NasClient> clients;  // by address

  bool ports_valid() const { return auth_port != acct_port; }
};

/// The RADIUS engine behind the UDP sockets: signal extraction, correlation,
/// PDID distribution in Access-Accept, accounting sessions, retransmit
/// handling and lazy legacy migration. Transport-independent — the simulator
/// feeds it datagrams in-process, the UDP server from the wire.
class AuthService {
 public:
  AuthService(IdentityStore& store, Correlator& correlator, Profiler& profiler,
              SessionStore& sessions, ServerConfig config)
      : store_(store),
        correlator_(correlator),
        profiler_(profiler),
        sessions_(sessions),
        config_(std::move(config)) {}

  const ServerConfig& config() const { return config_; }
  SessionStore& sessions() { return sessions_; }

  /// Entry point for one datagram. Returns the response payload, or nothing
  /// when the packet must be dropped silently (unknown source, bad
  /// authenticator, undecodable).
  std::optional<radius::Octets> handle_datagram(bool acct_socket, const std::string& source,
                                                const radius::Octets& raw, TimeMs now) {
    auto client_it = config_.clients.find(source);
    if (client_it == config_.clients.end()) return std::nullopt;  // RFC: ignore silently
    const NasClient& client = client_it->second;

    auto decoded = radius::decode_packet(raw);
    if (!decoded.ok()) return std::nullopt;
    radius::RadiusPacket& req = decoded.value();

    if (auto cached = retransmit_lookup(source, req, now)) return cached;

    std::optional<radius::Octets> response;
    if (!acct_socket && req.code == radius::kAccessRequest) {
      response = handle_access_request(req, client, now);
    } else if (acct_socket && req.code == radius::kAccountingRequest) {
      response = handle_accounting(req, client, now);
    } else {
      return std::nullopt;  // wrong code for this socket
    }
    if (response) retransmit_store(source, req, *response, now);
    return response;
  }

  /// Chronological event trail for one device: authentications, MAC
  /// associations, sessions, migrations. Includes history recorded under
  /// identities later absorbed into this one.
  Result<std::vector<AuditEvent>> audit_trail(const Pdid& pdid) const {
    Pdid id = store_.resolve(pdid);
    if (!store_.exists(id)) return Error{Errc::UnknownPdid, pdid.to_string()};
    std::vector<AuditEvent> out;
    for (auto& e : store_.audit().all()) {
      if (!e.pdid.is_nil() && store_.resolve(e.pdid) == id) out.push_back(std::move(e));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const AuditEvent& a, const AuditEvent& b) { return a.t < b.t; });
    return out;
  }

 private:
  std::optional<radius::Octets> handle_access_request(const radius::RadiusPacket& req,
                                                      const NasClient& client, TimeMs now) {
    auto extracted = radius::extract_signals(req);
    if (!extracted.ok()) {
      if (extracted.code() == Errc::MalformedMac) return reject(req, client, "malformed-station-id");
      return std::nullopt;
    }
    IdentitySignalSet signals = std::move(extracted.value());
    if (client.hint == UseCaseHint::GuestHotspot) {
      signals.hint = UseCaseHint::GuestHotspot;
    } else if (signals.hint == UseCaseHint::None) {
      signals.hint = client.hint;
    }

    if (!store_.feature_enabled()) {
      // legacy mode: MAC-keyed record, Accept without the PDID attribute
      if (signals.mac) {
        std::map<std::string, std::string> attrs;
        if (signals.username) attrs["username"] = *signals.username;
        store_.legacy_upsert(*signals.mac, attrs, "auth", now);
      }
      radius::ResponseBuilder b(radius::kAccessAccept, req.identifier);
      auto out = b.finish(req.authenticator, client.secret);
      return out.ok() ? std::optional<radius::Octets>(out.value()) : std::nullopt;
    }

    if (signals.empty()) {
      if (config_.reject_unknown_signals) return reject(req, client, "no-identity-signals");
      // nothing to correlate on; a fresh ephemeral identity keeps the
      // PDID-in-every-Accept invariant without polluting the license count
      CreationSpec spec;
      spec.ephemeral = true;
      spec.actor = "auth";
      auto created = store_.create_record(spec, now);
      if (!created.ok()) return reject(req, client, "store-error");
      return accept_with_pdid(req, client, created.value(), now, MatchedBy::NoneEphemeral,
                              Confidence::None);
    }

    Pdid pdid;
    MatchedBy matched_by;
    Confidence confidence;
    if (signals.hint == UseCaseHint::Mab && signals.mac) {
      // MAB carries no credentials; profiling is its correlation mechanism
      Observation obs;
      obs.kind = ObservationKind::RadiusMab;
      obs.mac = *signals.mac;
      obs.context = context_of(req, client);
      obs.t = now;
      obs.attrs["radius_nas_id"] = obs.context.nas_id;
      obs.attrs["radius_port_id"] = obs.context.port;
      if (signals.username) obs.attrs["username"] = *signals.username;
      auto res = profiler_.ingest(obs);
      if (!res.ok()) return reject(req, client, res.error().to_string());
      pdid = res.value().pdid;
      matched_by = res.value().via == IngestVia::New ? MatchedBy::New : MatchedBy::Fingerprint;
      confidence = res.value().via == IngestVia::New ? Confidence::New : Confidence::Medium;
      if (res.value().via == IngestVia::Mac) {
        matched_by = MatchedBy::Mac;
        confidence = Confidence::VeryHigh;
      }
    } else {
      auto res = correlator_.correlate(signals, now);
      if (!res.ok()) {
        // GuardTimeout or NoSignals: bounded-latency failure
        return reject(req, client, res.error().to_string());
      }
      pdid = res.value().pdid;
      matched_by = res.value().matched_by;
      confidence = res.value().confidence;
    }

    // lazy migration: first post-upgrade auth folds the legacy MAC record in
    if (signals.mac && store_.legacy_get(*signals.mac)) {
      if (store_.adopt_legacy(*signals.mac, pdid, now))
        sessions_.rekey_legacy(signals.mac->to_string(), store_.resolve(pdid));
    }

    return accept_with_pdid(req, client, pdid, now, matched_by, confidence,
                            signals.mac ? signals.mac->to_string() : "");
  }

  std::optional<radius::Octets> handle_accounting(const radius::RadiusPacket& req,
                                                  const NasClient& client, TimeMs now) {
    if (!radius::verify_accounting_request(req, client.secret)) return std::nullopt;

    const auto* sid_attr = req.find(radius::attr::kAcctSessionId);
    const auto* status_attr = req.find(radius::attr::kAcctStatusType);
    if (!sid_attr || !status_attr) return std::nullopt;
    auto status = status_attr->as_integer();
    if (!status) return std::nullopt;
    std::string session_id = sid_attr->as_text();

    MacAddress mac;
    if (const auto* a = req.find(radius::attr::kCallingStationId)) {
      if (auto m = MacAddress::parse(a->as_text())) mac = *m;
    }
    std::uint64_t in_oct = 0, out_oct = 0;
    if (const auto* a = req.find(radius::attr::kAcctInputOctets))
      if (auto v = a->as_integer()) in_oct = *v;
    if (const auto* a = req.find(radius::attr::kAcctOutputOctets))
      if (auto v = a->as_integer()) out_oct = *v;

    Pdid pdid;
    std::string legacy_key;
    if (store_.feature_enabled()) {
      if (auto rec = store_.lookup_by_mac(mac))
        pdid = rec->pdid;
      else
        legacy_key = mac.to_string();
    } else {
      legacy_key = mac.to_string();
    }

    switch (*status) {
      case radius::kAcctStart: {
        sessions_.start(session_id, pdid, legacy_key, mac, client.name, now);
        store_.audit().append({now, "session_start", pdid, "acct", "session=" + session_id});
        break;
      }
      case radius::kAcctInterim:
        if (!sessions_.update(session_id, in_oct, out_oct, now, false))
          sessions_.start(session_id, pdid, legacy_key, mac, client.name, now);
        break;
      case radius::kAcctStop: {
        if (!sessions_.update(session_id, in_oct, out_oct, now, true)) {
          sessions_.orphan_stop(session_id, pdid, legacy_key, mac, client.name, now);
          sessions_.update(session_id, in_oct, out_oct, now, true);
        }
        store_.audit().append({now, "session_stop", pdid, "acct", "session=" + session_id});
        break;
      }
      default:
        break;  // other status types acknowledged without state change
    }

    radius::ResponseBuilder b(radius::kAccountingResponse, req.identifier);
    auto out = b.finish(req.authenticator, client.secret);
    return out.ok() ? std::optional<radius::Octets>(out.value()) : std::nullopt;
  }

  NetworkContext context_of(const radius::RadiusPacket& req, const NasClient& client) const {
    NetworkContext ctx;
    if (const auto* a = req.find(radius::attr::kNasIdentifier))
      ctx.nas_id = a->as_text();
    else
      ctx.nas_id = client.name;
    if (const auto* a = req.find(radius::attr::kNasPortId))
      ctx.port = a->as_text();
    else
      ctx.port = "0";
    return ctx;
  }

  std::optional<radius::Octets> accept_with_pdid(const radius::RadiusPacket& req,
                                                 const NasClient& client, const Pdid& pdid,
                                                 TimeMs now, MatchedBy matched_by,
                                                 Confidence confidence,
                                                 const std::string& mac_str = "") {
    store_.audit().append({now, "auth", store_.resolve(pdid), "auth",
                           std::string("matched=") + matched_by_name(matched_by) +
                               " confidence=" + confidence_name(confidence) +
                               " nas=" + client.name +
                               (mac_str.empty() ? "" : " mac=" + mac_str)});
    radius::ResponseBuilder b(radius::kAccessAccept, req.identifier);
    b.add_pdid(store_.resolve(pdid));
    auto out = b.finish(req.authenticator, client.secret);
    return out.ok() ? std::optional<radius::Octets>(out.value()) : std::nullopt;
  }

  std::optional<radius::Octets> reject(const radius::RadiusPacket& req, const NasClient& client,
                                       const std::string& why) {
    radius::ResponseBuilder b(radius::kAccessReject, req.identifier);
    b.add(radius::Attribute::text(radius::attr::kReplyMessage, why));
    auto out = b.finish(req.authenticator, client.secret);
    return out.ok() ? std::optional<radius::Octets>(out.value()) : std::nullopt;
  }

  // -- duplicate datagram handling ----------------------------------------

  static constexpr TimeMs kRetransmitWindowMs = 5000;

  std::string retransmit_key(const std::string& source, const radius::RadiusPacket& req) const {
    return source + "|" + std::to_string(req.identifier) + "|" +
           to_hex(req.authenticator.data(), req.authenticator.size());
  }

  std::optional<radius::Octets> retransmit_lookup(const std::string& source,
                                                  const radius::RadiusPacket& req, TimeMs now) {
    std::lock_guard lk(cache_mu_);
    auto it = cache_.find(retransmit_key(source, req));
    if (it == cache_.end()) return std::nullopt;
    if (now - it->second.second > kRetransmitWindowMs) {
      cache_.erase(it);
      return std::nullopt;
    }
    return it->second.first;
  }

  void retransmit_store(const std::string& source, const radius::RadiusPacket& req,
                        const radius::Octets& response, TimeMs now) {
    std::lock_guard lk(cache_mu_);
    if (cache_.size() > 4096) {
      for (auto it = cache_.begin(); it != cache_.end();) {
        if (now - it->second.second > kRetransmitWindowMs)
          it = cache_.erase(it);
        else
          ++it;
      }
    }
    cache_[retransmit_key(source, req)] = {response, now};
  }

  IdentityStore& store_;
  Correlator& correlator_;
  Profiler& profiler_;
  SessionStore& sessions_;
  ServerConfig config_;
  std::mutex cache_mu_;
  std::map<std::string, std::pair<radius::Octets, TimeMs>> cache_;
};

}  // namespace pdid
