#pragma once

#include <barrier>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pdid/auth_service.hpp"
#include "pdid/correlator.hpp"
#include "pdid/profiler.hpp"
#include "pdid/session.hpp"
#include "pdid/store.hpp"
#include "pdid/udp.hpp"
#include "pdid/util.hpp"

namespace pdid::sim {

using nlohmann::ordered_json;

enum class Strategy { FixedMac, PerNetwork, PerConnection };

enum class UseCase {
  ByodCert,
  Managed,
  VpnPosture,
  NonVpnPosture,
  GuestRegistered,
  GuestHotspot,
  IotFixed,
  IotRandomized,
};

// Table row order for reports
constexpr UseCase kUseCaseOrder[] = {
    UseCase::ByodCert,       UseCase::Managed,      UseCase::VpnPosture,
    UseCase::NonVpnPosture,  UseCase::GuestRegistered, UseCase::GuestHotspot,
    UseCase::IotFixed,       UseCase::IotRandomized,
};

inline const char* use_case_name(UseCase u) {
  switch (u) {
    case UseCase::ByodCert: return "byod_cert";
    case UseCase::Managed: return "managed";
    case UseCase::VpnPosture: return "vpn_posture";
    case UseCase::NonVpnPosture: return "non_vpn_posture";
    case UseCase::GuestRegistered: return "guest_registered";
    case UseCase::GuestHotspot: return "guest_hotspot";
    case UseCase::IotFixed: return "iot_fixed";
    case UseCase::IotRandomized: return "iot_randomized";
  }
  return "?";
}

inline std::optional<UseCase> use_case_from_name(const std::string& s) {
  for (UseCase u : kUseCaseOrder)
    if (s == use_case_name(u)) return u;
  return std::nullopt;
}

inline std::optional<Strategy> strategy_from_name(const std::string& s) {
  if (s == "fixed") return Strategy::FixedMac;
  if (s == "per_network") return Strategy::PerNetwork;
  if (s == "per_connection") return Strategy::PerConnection;
  return std::nullopt;
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::FixedMac: return "fixed";
    case Strategy::PerNetwork: return "per_network";
    case Strategy::PerConnection: return "per_connection";
  }
  return "?";
}

inline bool anchored_use_case(UseCase u) {
  return u == UseCase::ByodCert || u == UseCase::Managed || u == UseCase::VpnPosture ||
         u == UseCase::NonVpnPosture || u == UseCase::IotFixed;
}

struct SimDevice {
  std::string true_id;
  UseCase use_case = UseCase::ByodCert;
  Strategy strategy = Strategy::PerConnection;
  MacAddress base_mac;
  std::map<std::string, std::string> model_attrs;
  bool per_connection_context = false;

  // credentials presented per use case
  std::optional<std::string> cert_id, mdm_id, agent_id, username;

  // runtime state
  int connections = 0;
  MacAddress current_mac;
  std::string current_network;
  std::string stable_port;
};

/// Deterministic MAC assignment per randomization strategy. Randomized MACs
/// always carry the locally-administered bit and never the multicast bit.
inline MacAddress next_mac(const SimDevice& d, const std::string& network, int connection_index,
                           std::uint64_t seed) {
  if (d.strategy == Strategy::FixedMac) return d.base_mac;
  std::string material = d.true_id + "|" + network + "|" + std::to_string(seed);
  if (d.strategy == Strategy::PerConnection) material += "|" + std::to_string(connection_index);
  std::uint64_t h = fnv1a64(material);
  MacAddress::Bytes b;
  for (int i = 0; i < 6; ++i) b[i] = static_cast<std::uint8_t>(h >> (8 * i));
  b[0] = static_cast<std::uint8_t>((b[0] | 0x02) & ~0x01);
  return MacAddress(b);
}

/// Deterministic universal (non-randomized) MAC for fixed-MAC devices.
inline MacAddress universal_mac(const std::string& true_id, std::uint64_t seed) {
  std::uint64_t h = fnv1a64("base|" + true_id + "|" + std::to_string(seed));
  MacAddress::Bytes b;
  for (int i = 0; i < 6; ++i) b[i] = static_cast<std::uint8_t>(h >> (8 * i));
  b[0] = static_cast<std::uint8_t>(b[0] & ~0x03);  // universal, unicast
  return MacAddress(b);
}

struct ScheduleEvent {
  enum class Op { Connect, Dhcp, Burst, Advance, ToggleFeature, Prune, Rounds };
  Op op = Op::Connect;
  std::vector<size_t> devices;
  std::string network;
  int count = 0;          // burst size / rounds count
  std::int64_t seconds = 0;  // advance / round gap
  bool enabled = true;    // toggle_feature
  std::vector<ScheduleEvent> nested;  // rounds body
};

struct ExpectClause {
  ordered_json raw;  // evaluated against the report
};

struct Scenario {
  std::string name;
  std::uint64_t seed = 1;
  std::vector<std::string> networks{"net0"};
  StoreConfig store_config;
  bool with_accounting = false;
  bool use_udp_transport = false;
  std::vector<SimDevice> devices;
  std::vector<ScheduleEvent> schedule;
  ordered_json expect;  // may be null
};

// -- pairwise partition metrics ---------------------------------------------

/// Pairwise precision/recall of the PDID partition against the true-device
/// partition, computed exactly by pair enumeration.
inline Result<std::pair<double, double>> partition_metrics(
    const std::vector<std::string>& assignments, const std::vector<std::string>& truth) {
  if (assignments.size() != truth.size())
    return Error{Errc::EventSetMismatch,
                 std::to_string(assignments.size()) + " vs " + std::to_string(truth.size())};
  const size_t n = assignments.size();
  std::uint64_t same_pdid = 0, same_true = 0, both = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      bool sp = assignments[i] == assignments[j];
      bool st = truth[i] == truth[j];
      same_pdid += sp;
      same_true += st;
      both += sp && st;
    }
  }
  double precision = same_pdid == 0 ? 1.0 : double(both) / double(same_pdid);
  double recall = same_true == 0 ? 1.0 : double(both) / double(same_true);
  return std::make_pair(precision, recall);
}

struct UseCaseStats {
  UseCase use_case;
  size_t devices = 0;
  size_t events = 0;
  double precision = 1.0;
  double recall = 1.0;
  size_t returns_total = 0;
  size_t returns_correct = 0;

  double success_rate() const {
    return returns_total == 0 ? 1.0 : double(returns_correct) / double(returns_total);
  }
};

struct Metrics {
  size_t events = 0;
  size_t legacy_events = 0;
  size_t distinct_macs = 0;
  size_t persistent_pdids = 0;
  size_t ephemeral_pdids = 0;
  size_t duplicate_pdids = 0;
  double precision = 1.0;
  double recall = 1.0;
  std::uint64_t ambiguity_flags = 0;
  GuardStats guard;
  std::vector<UseCaseStats> use_cases;
};

// -- scenario parsing ---------------------------------------------------------

inline Result<Scenario> parse_scenario(const ordered_json& j,
                                       std::optional<std::uint64_t> seed_override = std::nullopt) {
  auto invalid = [](const std::string& why) { return Error{Errc::ScenarioInvalid, why}; };
  Scenario s;
  try {
    if (!j.is_object()) return invalid("top level must be an object");
    s.name = j.value("name", "scenario");
    if (j.contains("seed")) {
      if (!j["seed"].is_number_integer()) return invalid("seed must be an integer");
      s.seed = j["seed"].get<std::uint64_t>();
    }
    if (seed_override) s.seed = *seed_override;
    if (j.contains("networks")) {
      s.networks.clear();
      for (const auto& n : j["networks"]) s.networks.push_back(n.get<std::string>());
      if (s.networks.empty()) return invalid("networks must not be empty");
    }
    if (j.contains("config")) {
      const auto& c = j["config"];
      s.store_config.feature_enabled = c.value("feature_enabled", true);
      s.store_config.username_sufficient = c.value("username_sufficient", false);
      if (c.contains("max_macs_per_pdid"))
        s.store_config.max_macs_per_pdid = c["max_macs_per_pdid"].get<size_t>();
      if (c.contains("retention_days"))
        s.store_config.retention_ms = c["retention_days"].get<std::int64_t>() * kDay;
      if (c.contains("ephemeral_retention_hours"))
        s.store_config.ephemeral_retention_ms =
            c["ephemeral_retention_hours"].get<std::int64_t>() * kHour;
      if (c.contains("guard_timeout_ms"))
        s.store_config.guard_timeout_ms = c["guard_timeout_ms"].get<std::int64_t>();
      if (c.contains("context_window_seconds"))
        s.store_config.context_window_ms = c["context_window_seconds"].get<std::int64_t>() * kSecond;
    }
    s.with_accounting = j.value("acct", false);
    s.use_udp_transport = j.value("transport", std::string("loopback")) == "udp";

    auto add_device = [&](const ordered_json& d, const std::string& id) -> std::optional<Error> {
      SimDevice dev;
      dev.true_id = id;
      auto uc = use_case_from_name(d.value("use_case", ""));
      if (!uc) return Error{Errc::ScenarioInvalid, "unknown use_case for device " + id};
      dev.use_case = *uc;
      std::string strat = d.value("strategy", "");
      if (strat.empty())
        strat = (dev.use_case == UseCase::IotFixed) ? "fixed" : "per_connection";
      auto st = strategy_from_name(strat);
      if (!st) return Error{Errc::ScenarioInvalid, "unknown strategy for device " + id};
      dev.strategy = *st;
      if (d.contains("base_mac")) {
        auto m = MacAddress::parse(d["base_mac"].get<std::string>());
        if (!m) return Error{Errc::ScenarioInvalid, "bad base_mac for device " + id};
        dev.base_mac = *m;
      } else {
        dev.base_mac = universal_mac(id, s.seed);
      }
      if (d.contains("model")) {
        for (auto it = d["model"].begin(); it != d["model"].end(); ++it)
          dev.model_attrs[it.key()] = it.value().get<std::string>();
      }
      dev.per_connection_context = d.value("context", std::string("stable")) == "per_connection";
      switch (dev.use_case) {
        case UseCase::ByodCert:
          dev.cert_id = "CN=" + id;
          dev.username = "user-" + id;
          break;
        case UseCase::Managed: dev.mdm_id = "mdm-" + id; break;
        case UseCase::VpnPosture:
        case UseCase::NonVpnPosture: dev.agent_id = "agent-" + id; break;
        case UseCase::GuestRegistered: dev.username = "guest-" + id; break;
        case UseCase::GuestHotspot:
        case UseCase::IotFixed:
        case UseCase::IotRandomized: break;
      }
      dev.stable_port = "p" + std::to_string(s.devices.size());
      s.devices.push_back(std::move(dev));
      return std::nullopt;
    };

    if (j.contains("devices")) {
      for (const auto& d : j["devices"]) {
        if (!d.contains("id")) return invalid("device without id");
        if (auto err = add_device(d, d["id"].get<std::string>())) return *err;
      }
    }
    if (j.contains("fleet")) {
      for (const auto& g : j["fleet"]) {
        size_t count = g.value("count", 1);
        std::string prefix = g.value("prefix", "dev");
        for (size_t i = 0; i < count; ++i) {
          char buf[24];
          std::snprintf(buf, sizeof(buf), "%04zu", i);
          if (auto err = add_device(g, prefix + "-" + buf)) return *err;
        }
      }
    }
    if (s.devices.empty() && j.contains("schedule") && !j["schedule"].empty())
      return invalid("schedule present but no devices defined");

    std::map<std::string, size_t> by_id;
    for (size_t i = 0; i < s.devices.size(); ++i) by_id[s.devices[i].true_id] = i;

    auto resolve_devices = [&](const ordered_json& sel,
                               std::vector<size_t>* out) -> std::optional<Error> {
      auto resolve_one = [&](const std::string& name) -> std::optional<Error> {
        if (name == "all") {
          for (size_t i = 0; i < s.devices.size(); ++i) out->push_back(i);
          return std::nullopt;
        }
        if (!name.empty() && name.back() == '*') {
          std::string prefix = name.substr(0, name.size() - 1);
          size_t before = out->size();
          for (size_t i = 0; i < s.devices.size(); ++i)
            if (s.devices[i].true_id.rfind(prefix, 0) == 0) out->push_back(i);
          if (out->size() == before)
            return Error{Errc::ScenarioInvalid, "selector matches no device: " + name};
          return std::nullopt;
        }
        auto it = by_id.find(name);
        if (it == by_id.end())
          return Error{Errc::ScenarioInvalid, "undefined device: " + name};
        out->push_back(it->second);
        return std::nullopt;
      };
      if (sel.is_string()) return resolve_one(sel.get<std::string>());
      if (sel.is_array()) {
        for (const auto& e : sel)
          if (auto err = resolve_one(e.get<std::string>())) return err;
        return std::nullopt;
      }
      return Error{Errc::ScenarioInvalid, "devices selector must be string or array"};
    };

    std::function<Result<ScheduleEvent>(const ordered_json&)> parse_event =
        [&](const ordered_json& e) -> Result<ScheduleEvent> {
      ScheduleEvent ev;
      std::string op = e.value("op", "");
      if (op == "connect" || op == "reconnect" || op == "dhcp" || op == "burst") {
        ev.op = (op == "dhcp") ? ScheduleEvent::Op::Dhcp
                               : (op == "burst" ? ScheduleEvent::Op::Burst
                                                : ScheduleEvent::Op::Connect);
        if (!e.contains("devices")) return Error{Errc::ScenarioInvalid, op + " without devices"};
        if (auto err = resolve_devices(e["devices"], &ev.devices)) return *err;
        ev.network = e.value("network", s.networks.front());
        bool known = false;
        for (const auto& n : s.networks) known |= (n == ev.network);
        if (!known) return Error{Errc::ScenarioInvalid, "unknown network: " + ev.network};
        if (ev.op == ScheduleEvent::Op::Burst) {
          ev.count = e.value("count", 2);
          if (ev.count < 1) return Error{Errc::ScenarioInvalid, "burst count must be >= 1"};
        }
      } else if (op == "advance") {
        ev.op = ScheduleEvent::Op::Advance;
        ev.seconds = e.value("seconds", std::int64_t{0});
        if (ev.seconds < 0) return Error{Errc::ScenarioInvalid, "time must be monotonic"};
      } else if (op == "toggle_feature") {
        ev.op = ScheduleEvent::Op::ToggleFeature;
        if (!e.contains("enabled"))
          return Error{Errc::ScenarioInvalid, "toggle_feature needs enabled"};
        ev.enabled = e["enabled"].get<bool>();
      } else if (op == "prune") {
        ev.op = ScheduleEvent::Op::Prune;
      } else if (op == "rounds") {
        ev.op = ScheduleEvent::Op::Rounds;
        ev.count = e.value("count", 1);
        ev.seconds = e.value("gap_seconds", std::int64_t{600});
        if (ev.count < 1) return Error{Errc::ScenarioInvalid, "rounds count must be >= 1"};
        if (!e.contains("events")) return Error{Errc::ScenarioInvalid, "rounds without events"};
        for (const auto& sub : e["events"]) {
          auto parsed = parse_event(sub);
          if (!parsed.ok()) return parsed.error();
          ev.nested.push_back(std::move(parsed.value()));
        }
      } else {
        return Error{Errc::ScenarioInvalid, "unknown op: " + op};
      }
      return ev;
    };

    if (j.contains("schedule")) {
      for (const auto& e : j["schedule"]) {
        auto parsed = parse_event(e);
        if (!parsed.ok()) return parsed.error();
        s.schedule.push_back(std::move(parsed.value()));
      }
    }
    if (j.contains("expect")) s.expect = j["expect"];
  } catch (const nlohmann::json::exception& ex) {
    return invalid(std::string("malformed scenario: ") + ex.what());
  }
  return s;
}

inline Result<Scenario> load_scenario(const std::string& path,
                                      std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) return Error{Errc::ScenarioInvalid, "cannot open " + path};
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    return Error{Errc::ScenarioInvalid, path + ": " + ex.what()};
  }
  return parse_scenario(j, seed_override);
}

// -- the assembled stack -------------------------------------------------------

/// The full engine wired together the way `serve` runs it, but with seeded
/// entropy and a logical clock. The simulator always speaks the real wire
/// format through the real codec.
struct Stack {
  StoreConfig store_config;
  ServerConfig server_config;
  std::unique_ptr<IdentityStore> store;
  std::unique_ptr<Correlator> correlator;
  std::unique_ptr<Profiler> profiler;
  std::unique_ptr<SessionStore> sessions;
  std::unique_ptr<AuthService> service;

  static constexpr const char* kCorpNas = "127.0.1.1";
  static constexpr const char* kVpnNas = "127.0.1.2";
  static constexpr const char* kHotspotNas = "127.0.1.3";
  static constexpr const char* kIotNas = "127.0.1.4";
  static constexpr const char* kSecret = "sim-secret";

  static Stack assemble(StoreConfig cfg, std::uint64_t seed) {
    Stack st;
    st.store_config = cfg;
    st.store =
        std::make_unique<IdentityStore>(cfg, std::make_unique<SeededEntropy>(seed ^ 0x9E3779B9ULL));
    st.correlator = std::make_unique<Correlator>(*st.store);
    st.profiler = std::make_unique<Profiler>(*st.store, *st.correlator);
    st.sessions = std::make_unique<SessionStore>();
    auto client = [](const char* name, const char* addr, UseCaseHint hint) {
      NasClient c;
      c.name = name;
      c.address = addr;
      c.secret.secret = kSecret;
      c.hint = hint;
      return c;
    };
    st.server_config.clients[kCorpNas] = client("corp-nas", kCorpNas, UseCaseHint::Dot1x);
    st.server_config.clients[kVpnNas] = client("vpn-gw", kVpnNas, UseCaseHint::Vpn);
    st.server_config.clients[kHotspotNas] =
        client("hotspot-ap", kHotspotNas, UseCaseHint::GuestHotspot);
    st.server_config.clients[kIotNas] = client("iot-switch", kIotNas, UseCaseHint::Mab);
    st.service = std::make_unique<AuthService>(*st.store, *st.correlator, *st.profiler,
                                               *st.sessions, st.server_config);
    return st;
  }
};

// -- the runner --------------------------------------------------------------

struct EventRecord {
  std::string true_id;
  UseCase use_case;
  std::string mac;
  Pdid pdid;      // nil for legacy-mode events
  bool legacy = false;
};

struct RunResult {
  Metrics metrics;
  ordered_json report;
  std::string text_report;
  bool expect_passed = true;
  std::vector<std::string> expect_failures;
};

class Runner {
 public:
  explicit Runner(Scenario scenario)
      : scenario_(std::move(scenario)),
        stack_(Stack::assemble(scenario_.store_config, scenario_.seed)),
        packet_rng_(scenario_.seed ^ 0xA5A5A5A5ULL) {}

  Result<RunResult> run() {
    if (scenario_.use_udp_transport) {
      udp_server_ = std::make_unique<UdpServer>(*stack_.service);
      auto st = udp_server_->start(0, 0, 2);
      if (!st.ok()) return st.error();
    }
    for (const auto& ev : scenario_.schedule) {
      auto st = execute(ev);
      if (!st.ok()) return st.error();
    }
    if (udp_server_) udp_server_->stop();
    return finalize();
  }

  const Stack& stack() const { return stack_; }
  Stack& stack() { return stack_; }
  const std::vector<EventRecord>& events() const { return events_; }
  TimeMs now() const { return now_; }

 private:
  static constexpr TimeMs kEpoch = 1700000000000;  // fixed logical origin
  static constexpr TimeMs kStep = 1000;

  Status execute(const ScheduleEvent& ev) {
    switch (ev.op) {
      case ScheduleEvent::Op::Connect: {
        for (size_t idx : ev.devices) {
          auto st = connect_device(idx, ev.network);
          if (!st.ok()) return st;
          now_ += kStep;
        }
        return {};
      }
      case ScheduleEvent::Op::Dhcp: {
        for (size_t idx : ev.devices) {
          auto st = dhcp_observation(idx);
          if (!st.ok()) return st;
          now_ += kStep;
        }
        return {};
      }
      case ScheduleEvent::Op::Burst: {
        for (size_t idx : ev.devices) {
          auto st = burst_device(idx, ev.network, ev.count);
          if (!st.ok()) return st;
          now_ += kStep;
        }
        return {};
      }
      case ScheduleEvent::Op::Advance:
        now_ += ev.seconds * kSecond;
        return {};
      case ScheduleEvent::Op::ToggleFeature:
        stack_.store->set_feature_enabled(ev.enabled);
        return {};
      case ScheduleEvent::Op::Prune:
        stack_.store->prune(now_);
        return {};
      case ScheduleEvent::Op::Rounds: {
        for (int r = 0; r < ev.count; ++r) {
          for (const auto& sub : ev.nested) {
            auto st = execute(sub);
            if (!st.ok()) return st;
          }
          now_ += ev.seconds * kSecond;
        }
        return {};
      }
    }
    return {};
  }

  const char* nas_for(const SimDevice& d) const {
    switch (d.use_case) {
      case UseCase::VpnPosture: return Stack::kVpnNas;
      case UseCase::GuestHotspot: return Stack::kHotspotNas;
      case UseCase::IotFixed:
      case UseCase::IotRandomized: return Stack::kIotNas;
      default: return Stack::kCorpNas;
    }
  }

  std::string port_for(const SimDevice& d, size_t idx, int connection) const {
    if (d.per_connection_context)
      return "p" + std::to_string(idx) + "c" + std::to_string(connection);
    return d.stable_port;
  }

  radius::Octets build_access_request(const SimDevice& d, const MacAddress& mac,
                                      const std::string& port, std::uint8_t identifier,
                                      radius::Authenticator auth) {
    radius::RadiusPacket req;
    req.code = radius::kAccessRequest;
    req.identifier = identifier;
    req.authenticator = auth;
    req.attributes.push_back(
        radius::Attribute::text(radius::attr::kCallingStationId, mac.to_string()));
    if (d.username)
      req.attributes.push_back(radius::Attribute::text(radius::attr::kUserName, *d.username));
    if (d.cert_id)
      req.attributes.push_back(
          radius::make_vsa_text(radius::kVendorId, radius::vsa::kCertificateId, *d.cert_id));
    if (d.mdm_id)
      req.attributes.push_back(
          radius::make_vsa_text(radius::kVendorId, radius::vsa::kMdmEnrollmentId, *d.mdm_id));
    if (d.agent_id)
      req.attributes.push_back(
          radius::make_vsa_text(radius::kVendorId, radius::vsa::kAgentId, *d.agent_id));
    if (d.use_case == UseCase::IotFixed || d.use_case == UseCase::IotRandomized) {
      req.attributes.push_back(radius::Attribute::integer(radius::attr::kServiceType,
                                                          radius::kServiceTypeCallCheck));
      req.attributes.push_back(radius::Attribute::text(radius::attr::kNasIdentifier,
                                                       nas_name_of(nas_for(d))));
      req.attributes.push_back(radius::Attribute::text(radius::attr::kNasPortId, port));
    }
    auto enc = radius::encode_packet(req);
    return enc.value();  // scenario-built packets are always well-formed
  }

  std::string nas_name_of(const std::string& addr) const {
    auto it = stack_.server_config.clients.find(addr);
    return it == stack_.server_config.clients.end() ? addr : it->second.name;
  }

  radius::Authenticator random_authenticator() {
    radius::Authenticator a;
    for (auto& byte : a) byte = static_cast<std::uint8_t>(packet_rng_());
    return a;
  }

  std::optional<radius::Octets> submit(bool acct, const std::string& source,
                                       const radius::Octets& payload) {
    if (udp_server_) {
      UdpClient client;
      client.bind_source(source);  // NAS identity rides on the source address
      return client.exchange("127.0.0.1", acct ? udp_server_->acct_port() : udp_server_->auth_port(),
                             payload);
    }
    return stack_.service->handle_datagram(acct, source, payload, now_);
  }

  Status connect_device(size_t idx, const std::string& network) {
    SimDevice& d = scenario_.devices[idx];
    int conn = d.connections++;
    MacAddress mac = next_mac(d, network, conn, scenario_.seed);
    d.current_mac = mac;
    d.current_network = network;
    std::string port = port_for(d, idx, conn);

    auto payload = build_access_request(d, mac, port, next_identifier(), random_authenticator());
    auto response = submit(false, nas_for(d), payload);
    if (!response) return Error{Errc::ScenarioInvalid, "no response for " + d.true_id};
    auto decoded = radius::decode_packet(*response);
    if (!decoded.ok()) return decoded.error();
    if (decoded.value().code == radius::kAccessReject)
      return Error{Errc::ScenarioInvalid, "access rejected for " + d.true_id};

    EventRecord rec;
    rec.true_id = d.true_id;
    rec.use_case = d.use_case;
    rec.mac = mac.to_string();
    if (auto vsa = decoded.value().find_vsa(radius::kVendorId, radius::vsa::kPdid)) {
      Pdid::Bytes b{};
      std::copy(vsa->data.begin(), vsa->data.end(), b.begin());
      rec.pdid = Pdid(b);
    } else {
      rec.legacy = true;
    }
    events_.push_back(rec);

    if (scenario_.with_accounting && decoded.value().code == radius::kAccessAccept) {
      auto st = send_accounting(d, mac, idx);
      if (!st.ok()) return st;
    }
    return {};
  }

  Status send_accounting(const SimDevice& d, const MacAddress& mac, size_t idx) {
    std::string session_id = "s" + std::to_string(events_.size()) + "-" + std::to_string(idx);
    for (std::uint32_t status : {radius::kAcctStart, radius::kAcctStop}) {
      radius::RadiusPacket req;
      req.code = radius::kAccountingRequest;
      req.identifier = next_identifier();
      req.attributes.push_back(
          radius::Attribute::integer(radius::attr::kAcctStatusType, status));
      req.attributes.push_back(
          radius::Attribute::text(radius::attr::kAcctSessionId, session_id));
      req.attributes.push_back(
          radius::Attribute::text(radius::attr::kCallingStationId, mac.to_string()));
      if (status == radius::kAcctStop) {
        req.attributes.push_back(radius::Attribute::integer(radius::attr::kAcctInputOctets, 1000));
        req.attributes.push_back(radius::Attribute::integer(radius::attr::kAcctOutputOctets, 2000));
      }
      req.authenticator = radius::compute_accounting_request_authenticator(
          req.code, req.identifier, radius::encode_attributes(req.attributes),
          radius::SharedSecret{Stack::kSecret});
      auto enc = radius::encode_packet(req);
      auto response = submit(true, nas_for(d), enc.value());
      if (!response) return Error{Errc::ScenarioInvalid, "no accounting response"};
      now_ += kStep;
    }
    return {};
  }

  Status dhcp_observation(size_t idx) {
    SimDevice& d = scenario_.devices[idx];
    if (d.connections == 0)
      return Error{Errc::ScenarioInvalid, "dhcp before first connect: " + d.true_id};
    Observation obs;
    obs.kind = ObservationKind::Dhcp;
    obs.mac = d.current_mac;
    obs.context.nas_id = nas_name_of(nas_for(d));
    obs.context.port = port_for(d, idx, d.connections - 1);
    obs.t = now_;
    obs.attrs = d.model_attrs;
    obs.attrs["hostname"] = "host-" + d.true_id;
    auto res = stack_.profiler->ingest(obs);
    if (!res.ok()) return res.error();

    EventRecord rec;
    rec.true_id = d.true_id;
    rec.use_case = d.use_case;
    rec.mac = d.current_mac.to_string();
    rec.pdid = res.value().pdid;
    rec.legacy = res.value().via == IngestVia::Legacy;
    events_.push_back(rec);
    return {};
  }

  /// Launches `count` first-contact authentications for one device at the
  /// same logical instant and waits for quiescence.
  Status burst_device(size_t idx, const std::string& network, int count) {
    SimDevice& d = scenario_.devices[idx];
    struct Slot {
      radius::Octets payload;
      MacAddress mac;
      std::optional<radius::Octets> response;
    };
    std::vector<Slot> slots(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      int conn = d.connections++;
      MacAddress mac = next_mac(d, network, conn, scenario_.seed);
      slots[static_cast<size_t>(i)].mac = mac;
      slots[static_cast<size_t>(i)].payload = build_access_request(
          d, mac, port_for(d, idx, conn), next_identifier(), random_authenticator());
    }
    d.current_mac = slots.back().mac;
    d.current_network = network;

    const std::string source = nas_for(d);
    std::barrier sync(count);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      threads.emplace_back([&, i] {
        sync.arrive_and_wait();
        slots[static_cast<size_t>(i)].response = submit(false, source, slots[static_cast<size_t>(i)].payload);
      });
    }
    for (auto& t : threads) t.join();

    for (const auto& slot : slots) {
      if (!slot.response) return Error{Errc::ScenarioInvalid, "burst request dropped"};
      auto decoded = radius::decode_packet(*slot.response);
      if (!decoded.ok()) return decoded.error();
      if (decoded.value().code == radius::kAccessReject)
        return Error{Errc::ScenarioInvalid, "burst request rejected"};
      EventRecord rec;
      rec.true_id = d.true_id;
      rec.use_case = d.use_case;
      rec.mac = slot.mac.to_string();
      if (auto vsa = decoded.value().find_vsa(radius::kVendorId, radius::vsa::kPdid)) {
        Pdid::Bytes b{};
        std::copy(vsa->data.begin(), vsa->data.end(), b.begin());
        rec.pdid = Pdid(b);
      } else {
        rec.legacy = true;
      }
      events_.push_back(rec);
    }
    return {};
  }

  std::uint8_t next_identifier() { return static_cast<std::uint8_t>(identifier_seq_++ & 0xFF); }

  Result<RunResult> finalize();

  Scenario scenario_;
  Stack stack_;
  std::mt19937_64 packet_rng_;
  std::unique_ptr<UdpServer> udp_server_;
  std::vector<EventRecord> events_;
  TimeMs now_ = kEpoch;
  unsigned identifier_seq_ = 0;
};

// -- metrics + report ---------------------------------------------------------

inline Result<RunResult> Runner::finalize() {
  Metrics m;
  m.events = events_.size();
  std::set<std::string> macs;
  for (const auto& e : events_) {
    macs.insert(e.mac);
    if (e.legacy) ++m.legacy_events;
  }
  m.distinct_macs = macs.size();

  auto lc = stack_.store->license_count();
  m.persistent_pdids = lc.persistent;
  m.ephemeral_pdids = lc.ephemeral;
  m.ambiguity_flags = stack_.profiler->ambiguity_flags();
  m.guard = stack_.correlator->guard_stats();

  // final (alias-resolved) assignment per non-legacy event
  std::vector<std::string> assignments, truth;
  std::map<UseCase, std::pair<std::vector<std::string>, std::vector<std::string>>> per_uc;
  for (const auto& e : events_) {
    if (e.legacy) continue;
    std::string resolved = stack_.store->resolve(e.pdid).to_string();
    assignments.push_back(resolved);
    truth.push_back(e.true_id);
    auto& bucket = per_uc[e.use_case];
    bucket.first.push_back(resolved);
    bucket.second.push_back(e.true_id);
  }
  auto overall = partition_metrics(assignments, truth);
  if (!overall.ok()) return overall.error();
  m.precision = overall.value().first;
  m.recall = overall.value().second;

  // duplicate PDIDs: extra persistent records per anchored device
  std::map<std::string, std::set<std::string>> records_per_device;
  std::map<std::string, UseCase> device_uc;
  for (const auto& e : events_) {
    if (e.legacy) continue;
    device_uc[e.true_id] = e.use_case;
    Pdid resolved = stack_.store->resolve(e.pdid);
    if (auto rec = stack_.store->get(resolved); rec && !rec->ephemeral)
      records_per_device[e.true_id].insert(resolved.to_string());
  }
  for (const auto& [id, recs] : records_per_device) {
    if (anchored_use_case(device_uc[id]) && recs.size() > 1)
      m.duplicate_pdids += recs.size() - 1;
  }

  // per-use-case stats, Table II row order
  std::map<UseCase, std::set<std::string>> devices_per_uc;
  for (const auto& d : scenario_.devices) devices_per_uc[d.use_case].insert(d.true_id);
  for (UseCase uc : kUseCaseOrder) {
    auto it = per_uc.find(uc);
    if (it == per_uc.end() && !devices_per_uc.count(uc)) continue;
    UseCaseStats st;
    st.use_case = uc;
    st.devices = devices_per_uc.count(uc) ? devices_per_uc[uc].size() : 0;
    if (it != per_uc.end()) {
      st.events = it->second.first.size();
      auto pr = partition_metrics(it->second.first, it->second.second);
      if (!pr.ok()) return pr.error();
      st.precision = pr.value().first;
      st.recall = pr.value().second;
      // success = returning events resolving to the device's first identity
      std::map<std::string, std::string> home;
      for (size_t i = 0; i < it->second.first.size(); ++i) {
        const std::string& dev = it->second.second[i];
        auto h = home.find(dev);
        if (h == home.end()) {
          home[dev] = it->second.first[i];
        } else {
          ++st.returns_total;
          if (h->second == it->second.first[i]) ++st.returns_correct;
        }
      }
    }
    m.use_cases.push_back(st);
  }

  RunResult out;
  out.metrics = m;

  ordered_json rep;
  rep["scenario"] = scenario_.name;
  rep["seed"] = scenario_.seed;
  rep["events"] = m.events;
  rep["legacy_events"] = m.legacy_events;
  rep["distinct_macs"] = m.distinct_macs;
  rep["license"] = ordered_json{{"persistent", m.persistent_pdids},
                                {"ephemeral", m.ephemeral_pdids}};
  rep["without_framework_records"] = m.distinct_macs;
  rep["with_framework_records"] = m.persistent_pdids;
  rep["duplicate_pdids"] = m.duplicate_pdids;
  rep["precision"] = m.precision;
  rep["recall"] = m.recall;
  rep["ambiguity_flags"] = m.ambiguity_flags;
  rep["use_cases"] = ordered_json::array();
  for (const auto& st : m.use_cases) {
    ordered_json u;
    u["use_case"] = use_case_name(st.use_case);
    u["devices"] = st.devices;
    u["events"] = st.events;
    u["precision"] = st.precision;
    u["recall"] = st.recall;
    u["success_rate"] = st.success_rate();
    rep["use_cases"].push_back(u);
  }
  rep["guard"] = ordered_json{{"acquisitions", m.guard.acquisitions},
                              {"timeouts", m.guard.timeouts},
                              {"takeovers", m.guard.takeovers},
                              {"double_check_saves", m.guard.double_check_saves},
                              {"creations", m.guard.creations}};

  // expectation check
  out.expect_passed = true;
  if (!scenario_.expect.is_null()) {
    auto check_num = [&](const std::string& key, double actual) {
      if (!scenario_.expect.contains(key)) return;
      double want = scenario_.expect[key].get<double>();
      if (std::abs(actual - want) > 1e-9) {
        out.expect_passed = false;
        out.expect_failures.push_back(key + ": expected " + std::to_string(want) + ", got " +
                                      std::to_string(actual));
      }
    };
    auto check_min = [&](const std::string& key, double actual) {
      if (!scenario_.expect.contains(key)) return;
      double want = scenario_.expect[key].get<double>();
      if (actual < want) {
        out.expect_passed = false;
        out.expect_failures.push_back(key + ": expected >= " + std::to_string(want) + ", got " +
                                      std::to_string(actual));
      }
    };
    check_num("events", double(m.events));
    check_num("legacy_events", double(m.legacy_events));
    check_num("distinct_macs", double(m.distinct_macs));
    check_num("persistent_pdids", double(m.persistent_pdids));
    check_num("ephemeral_pdids", double(m.ephemeral_pdids));
    check_num("duplicate_pdids", double(m.duplicate_pdids));
    check_num("precision", m.precision);
    check_num("recall", m.recall);
    check_num("ambiguity_flags", double(m.ambiguity_flags));
    check_num("without_framework", double(m.distinct_macs));
    check_num("with_framework", double(m.persistent_pdids));
    check_min("ambiguity_flags_min", double(m.ambiguity_flags));
    if (scenario_.expect.contains("use_cases")) {
      for (auto it = scenario_.expect["use_cases"].begin();
           it != scenario_.expect["use_cases"].end(); ++it) {
        const UseCaseStats* found = nullptr;
        for (const auto& st : m.use_cases)
          if (use_case_name(st.use_case) == it.key()) found = &st;
        if (!found) {
          out.expect_passed = false;
          out.expect_failures.push_back("use case absent: " + it.key());
          continue;
        }
        auto sub = [&](const char* k, double actual) {
          if (!it.value().contains(k)) return;
          double want = it.value()[k].get<double>();
          if (std::abs(actual - want) > 1e-9) {
            out.expect_passed = false;
            out.expect_failures.push_back(it.key() + "." + k + ": expected " +
                                          std::to_string(want) + ", got " + std::to_string(actual));
          }
        };
        sub("precision", found->precision);
        sub("recall", found->recall);
        sub("success_rate", found->success_rate());
      }
    }
  }
  rep["expect"] = ordered_json{{"passed", out.expect_passed},
                               {"failures", out.expect_failures}};
  out.report = rep;

  // human-readable table
  std::ostringstream txt;
  txt << "scenario: " << scenario_.name << " (seed " << scenario_.seed << ")\n";
  txt << "events: " << m.events;
  if (m.legacy_events) txt << " (" << m.legacy_events << " legacy)";
  txt << "\n";
  txt << "record counts   without framework: " << m.distinct_macs
      << "   with framework: " << m.persistent_pdids << "\n";
  txt << "license         persistent: " << m.persistent_pdids
      << "   ephemeral: " << m.ephemeral_pdids << "\n";
  txt << "partition       precision: " << m.precision << "   recall: " << m.recall
      << "   duplicate pdids: " << m.duplicate_pdids << "\n";
  txt << "profiler        ambiguity flags: " << m.ambiguity_flags << "\n";
  txt << "guard           acquisitions: " << m.guard.acquisitions
      << "   timeouts: " << m.guard.timeouts << "   saves: " << m.guard.double_check_saves
      << "\n";
  if (!m.use_cases.empty()) {
    txt << "use case                devices   events   precision   recall   success\n";
    for (const auto& st : m.use_cases) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-22s %8zu %8zu %11.4f %8.4f %9.4f\n",
                    use_case_name(st.use_case), st.devices, st.events, st.precision, st.recall,
                    st.success_rate());
      txt << line;
    }
  }
  txt << "expect: " << (out.expect_passed ? "pass" : "FAIL") << "\n";
  for (const auto& f : out.expect_failures) txt << "  - " << f << "\n";
  out.text_report = txt.str();
  return out;
}

}  // namespace pdid::sim
