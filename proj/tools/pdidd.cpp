// pdidd: RADIUS persistent-device-identity engine.
// Subcommands: serve, simulate, report, store-list, store-delete,
// store-prune, config-show. Exit codes: 0 success, 1 domain error,
// 2 input error, 3 environment error.

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "pdid/auth_service.hpp"
#include "pdid/config.hpp"
#include "pdid/correlator.hpp"
#include "pdid/profiler.hpp"
#include "pdid/session.hpp"
#include "pdid/sim.hpp"
#include "pdid/store.hpp"
#include "pdid/udp.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitInput = 2;
constexpr int kExitEnvironment = 3;

using nlohmann::ordered_json;

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

std::string lock_path_for(const std::string& store_path) { return store_path + ".lock"; }

bool acquire_lock(const std::string& store_path) {
  int fd = ::open(lock_path_for(store_path).c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) return false;
  std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
  return true;
}

void release_lock(const std::string& store_path) {
  ::unlink(lock_path_for(store_path).c_str());
}

bool locked(const std::string& store_path) {
  struct stat st{};
  return ::stat(lock_path_for(store_path).c_str(), &st) == 0;
}

int load_store_or_exit(pdid::IdentityStore& store, const std::string& path) {
  if (path.empty()) {
    std::cerr << "error: --store is required\n";
    return kExitInput;
  }
  auto st = store.snapshot_load(path);
  if (!st.ok()) {
    std::cerr << "error: " << st.error().to_string() << "\n";
    return st.code() == pdid::Errc::IoFailure ? kExitEnvironment : kExitDomain;
  }
  return kExitOk;
}

void print_kv(const ordered_json& j, const std::string& format) {
  if (format == "json") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.value().is_structured())
      std::cout << it.key() << " = " << it.value().dump() << "\n";
    else if (it.value().is_string())
      std::cout << it.key() << " = " << it.value().get<std::string>() << "\n";
    else
      std::cout << it.key() << " = " << it.value().dump() << "\n";
  }
}

int cmd_serve(const std::string& config_path) {
  auto loaded = pdid::load_config(config_path);
  if (!loaded.ok()) {
    std::cerr << "error: " << loaded.error().to_string() << "\n";
    return kExitInput;
  }
  pdid::FileConfig cfg = std::move(loaded.value());
  pdid::apply_env_overrides(cfg);

  pdid::IdentityStore store(cfg.store);
  if (!cfg.store_path.empty() && std::filesystem::exists(cfg.store_path)) {
    auto st = store.snapshot_load(cfg.store_path);
    if (!st.ok()) {
      std::cerr << "error: " << st.error().to_string() << "\n";
      return kExitEnvironment;
    }
  }
  if (!cfg.store_path.empty() && !acquire_lock(cfg.store_path)) {
    std::cerr << "error: store is locked: " << lock_path_for(cfg.store_path) << "\n";
    return kExitEnvironment;
  }
  if (!cfg.audit_log_path.empty()) store.audit().open_sink(cfg.audit_log_path);

  pdid::Correlator correlator(store);
  pdid::OuiRegistry registry;
  if (!cfg.oui_registry_path.empty()) {
    auto st = registry.load(cfg.oui_registry_path);
    if (!st.ok()) std::cerr << "warning: " << st.error().to_string() << "\n";
  }
  pdid::Profiler profiler(store, correlator, std::move(registry));
  pdid::SessionStore sessions;
  pdid::AuthService service(store, correlator, profiler, sessions, cfg.server);

  pdid::UdpServer server(service);
  auto st = server.start(cfg.server.auth_port, cfg.server.acct_port, 4);
  if (!st.ok()) {
    std::cerr << "error: " << st.error().to_string() << "\n";
    if (!cfg.store_path.empty()) release_lock(cfg.store_path);
    return kExitEnvironment;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "pdidd listening auth=" << server.auth_port() << " acct=" << server.acct_port()
            << " feature=" << (store.feature_enabled() ? "on" : "off") << std::endl;

  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));

  server.stop();
  if (!cfg.store_path.empty()) {
    auto saved = store.snapshot_save(cfg.store_path);
    if (!saved.ok()) std::cerr << "warning: snapshot save failed: " << saved.error().to_string() << "\n";
    release_lock(cfg.store_path);
  }
  std::cout << "pdidd stopped\n";
  return kExitOk;
}

int cmd_simulate(const std::string& scenario_path, std::optional<std::uint64_t> seed,
                 const std::string& format) {
  auto scenario = pdid::sim::load_scenario(scenario_path, seed);
  if (!scenario.ok()) {
    std::cerr << "error: " << scenario.error().to_string() << "\n";
    return kExitInput;
  }
  pdid::sim::Runner runner(std::move(scenario.value()));
  auto result = runner.run();
  if (!result.ok()) {
    std::cerr << "error: " << result.error().to_string() << "\n";
    return result.code() == pdid::Errc::ScenarioInvalid ? kExitInput : kExitDomain;
  }
  if (format == "json")
    std::cout << result.value().report.dump(2) << "\n";
  else
    std::cout << result.value().text_report;
  return result.value().expect_passed ? kExitOk : kExitDomain;
}

ordered_json inventory_row(const pdid::DeviceRecord& rec, const pdid::Profiler* profiler,
                           const std::vector<pdid::ClassificationRule>& rules) {
  ordered_json row;
  row["pdid"] = rec.pdid.to_string();
  row["ephemeral"] = rec.ephemeral;
  row["macs"] = rec.macs.size();
  ordered_json anchors = ordered_json::array();
  for (const auto& [kind, value] : rec.anchors) anchors.push_back(pdid::anchor_name(kind));
  if (!rec.fingerprints.empty()) anchors.push_back("fingerprint");
  row["anchors"] = anchors;
  row["profile_keys"] = rec.profile.size();
  if (rec.historical_oui) row["historical_oui"] = *rec.historical_oui;
  std::string cls = "-";
  if (profiler && !rules.empty()) {
    if (auto c = profiler->classify(rec, rules)) cls = *c;
  }
  row["class"] = cls;
  return row;
}

std::vector<pdid::ClassificationRule> load_rules(const std::string& path) {
  std::vector<pdid::ClassificationRule> rules;
  if (path.empty()) return rules;
  std::ifstream in(path);
  if (!in) return rules;
  ordered_json j;
  try {
    in >> j;
    for (const auto& r : j) {
      pdid::ClassificationRule rule;
      rule.name = r.value("name", "");
      if (r.contains("required_attrs"))
        for (auto it = r["required_attrs"].begin(); it != r["required_attrs"].end(); ++it)
          rule.required_attrs[it.key()] = it.value().get<std::string>();
      if (r.contains("oui_vendor")) rule.oui_vendor = r["oui_vendor"].get<std::string>();
      rule.min_score = r.value("min_score", 1);
      rules.push_back(std::move(rule));
    }
  } catch (const nlohmann::json::exception&) {
    rules.clear();
  }
  return rules;
}

int cmd_report(const std::string& kind, const std::string& store_path, const std::string& pdid_str,
               const std::string& format, const std::string& rules_path,
               const std::string& oui_path) {
  pdid::IdentityStore store;
  if (int rc = load_store_or_exit(store, store_path); rc != kExitOk) return rc;

  if (kind == "license") {
    auto lc = store.license_count();
    ordered_json j{{"persistent", lc.persistent}, {"ephemeral", lc.ephemeral}};
    if (format == "json")
      std::cout << j.dump(2) << "\n";
    else
      std::cout << "persistent: " << lc.persistent << ", ephemeral: " << lc.ephemeral << "\n";
    return kExitOk;
  }

  if (kind == "inventory") {
    pdid::Correlator correlator(store);
    pdid::OuiRegistry registry;
    if (!oui_path.empty()) registry.load(oui_path);
    pdid::Profiler profiler(store, correlator, std::move(registry));
    auto rules = load_rules(rules_path);
    ordered_json rows = ordered_json::array();
    for (const auto& rec : store.all_records()) rows.push_back(inventory_row(rec, &profiler, rules));
    if (format == "json") {
      std::cout << rows.dump(2) << "\n";
    } else {
      std::cout << "pdid                                  eph macs anchors                 class\n";
      for (const auto& row : rows) {
        char line[256];
        std::string anchors;
        for (const auto& a : row["anchors"]) anchors += a.get<std::string>() + ",";
        if (!anchors.empty()) anchors.pop_back();
        std::snprintf(line, sizeof(line), "%s  %s %4zu %-23s %s\n",
                      row["pdid"].get<std::string>().c_str(),
                      row["ephemeral"].get<bool>() ? "yes" : "no ",
                      row["macs"].get<size_t>(), anchors.c_str(),
                      row["class"].get<std::string>().c_str());
        std::cout << line;
      }
    }
    return kExitOk;
  }

  if (kind == "audit") {
    auto parsed = pdid::Pdid::parse(pdid_str);
    if (!parsed) {
      std::cerr << "error: --pdid must be a UUID\n";
      return kExitInput;
    }
    pdid::Pdid id = store.resolve(*parsed);
    if (!store.exists(id)) {
      std::cerr << "error: UnknownPdid: " << pdid_str << "\n";
      return kExitDomain;
    }
    std::vector<pdid::AuditEvent> trail;
    for (auto& e : store.audit().all())
      if (!e.pdid.is_nil() && store.resolve(e.pdid) == id) trail.push_back(std::move(e));
    std::stable_sort(trail.begin(), trail.end(),
                     [](const pdid::AuditEvent& a, const pdid::AuditEvent& b) { return a.t < b.t; });
    if (format == "json") {
      ordered_json rows = ordered_json::array();
      for (const auto& e : trail) {
        rows.push_back(ordered_json{{"ts", e.t},
                                    {"op", e.op},
                                    {"pdid", e.pdid.to_string()},
                                    {"actor", e.actor},
                                    {"detail", e.detail}});
      }
      std::cout << rows.dump(2) << "\n";
    } else {
      for (const auto& e : trail) std::cout << e.to_line() << "\n";
    }
    return kExitOk;
  }

  std::cerr << "error: unknown report kind: " << kind << "\n";
  return kExitInput;
}

int cmd_store_list(const std::string& store_path, const std::string& format) {
  return cmd_report("inventory", store_path, "", format, "", "");
}

int cmd_store_delete(const std::string& store_path, const std::string& pdid_str,
                     const std::string& format) {
  if (locked(store_path)) {
    std::cerr << "error: store is locked by a running server\n";
    return kExitEnvironment;
  }
  pdid::IdentityStore store;
  if (int rc = load_store_or_exit(store, store_path); rc != kExitOk) return rc;
  auto parsed = pdid::Pdid::parse(pdid_str);
  if (!parsed) {
    std::cerr << "error: --pdid must be a UUID\n";
    return kExitInput;
  }
  bool deleted = store.delete_pdid(*parsed, pdid::wall_now_ms(), "cli");
  if (!deleted) {
    std::cerr << "error: UnknownPdid: " << pdid_str << "\n";
    return kExitDomain;
  }
  auto st = store.snapshot_save(store_path);
  if (!st.ok()) {
    std::cerr << "error: " << st.error().to_string() << "\n";
    return kExitEnvironment;
  }
  ordered_json j{{"deleted", 1}};
  print_kv(j, format);
  return kExitOk;
}

int cmd_store_prune(const std::string& store_path, std::optional<std::int64_t> now_override,
                    const std::string& format) {
  if (locked(store_path)) {
    std::cerr << "error: store is locked by a running server\n";
    return kExitEnvironment;
  }
  pdid::IdentityStore store;
  if (int rc = load_store_or_exit(store, store_path); rc != kExitOk) return rc;
  pdid::TimeMs now = now_override.value_or(pdid::wall_now_ms());
  size_t n = store.prune(now);
  auto st = store.snapshot_save(store_path);
  if (!st.ok()) {
    std::cerr << "error: " << st.error().to_string() << "\n";
    return kExitEnvironment;
  }
  ordered_json j{{"pruned", n}};
  print_kv(j, format);
  return kExitOk;
}

int cmd_config_show(const std::string& config_path, const std::string& format) {
  auto loaded = pdid::load_config(config_path);
  if (!loaded.ok()) {
    std::cerr << "error: " << loaded.error().to_string() << "\n";
    return kExitInput;
  }
  pdid::FileConfig cfg = std::move(loaded.value());
  pdid::apply_env_overrides(cfg);
  ordered_json j;
  j["auth_port"] = cfg.server.auth_port;
  j["acct_port"] = cfg.server.acct_port;
  j["feature_enabled"] = cfg.store.feature_enabled;
  j["reject_unknown_signals"] = cfg.server.reject_unknown_signals;
  j["retention_days"] = cfg.store.retention_ms / pdid::kDay;
  j["ephemeral_retention_hours"] = cfg.store.ephemeral_retention_ms / pdid::kHour;
  j["max_macs_per_pdid"] = cfg.store.max_macs_per_pdid;
  std::string prio;
  for (auto k : cfg.store.anchor_priority) prio += std::string(pdid::anchor_name(k)) + ",";
  if (!prio.empty()) prio.pop_back();
  j["anchor_priority"] = prio;
  j["username_sufficient"] = cfg.store.username_sufficient;
  j["guard_timeout_ms"] = cfg.store.guard_timeout_ms;
  j["context_window_seconds"] = cfg.store.context_window_ms / pdid::kSecond;
  j["store"] = cfg.store_path;
  j["audit_log"] = cfg.audit_log_path;
  j["oui_registry"] = cfg.oui_registry_path;
  ordered_json nas = ordered_json::array();
  for (const auto& [addr, client] : cfg.server.clients) {
    nas.push_back(ordered_json{{"name", client.name},
                               {"address", client.address},
                               {"hint", pdid::radius::hint_name(client.hint)}});
  }
  j["nas_clients"] = nas;
  print_kv(j, format);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RADIUS persistent device identity engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::string store_path;
  std::string format = "text";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "configuration file")->envname("PDID_CONFIG");
  app.add_option("--store", store_path, "store snapshot file");
  app.add_option("--format", format, "output format")->check(CLI::IsMember({"text", "json"}));
  app.add_option("--seed", seed, "simulation seed override");

  auto* serve = app.add_subcommand("serve", "run the RADIUS service");

  std::string scenario_path;
  auto* simulate = app.add_subcommand("simulate", "run a fleet scenario");
  simulate->add_option("scenario", scenario_path, "scenario JSON file")->required();

  std::string report_kind;
  std::string pdid_str;
  std::string rules_path;
  std::string oui_path;
  auto* report = app.add_subcommand("report", "license / inventory / audit reports");
  report->add_option("kind", report_kind, "report kind")
      ->required()
      ->check(CLI::IsMember({"license", "inventory", "audit"}));
  report->add_option("--pdid", pdid_str, "device selector for audit");
  report->add_option("--rules", rules_path, "classification rules JSON");
  report->add_option("--oui", oui_path, "OUI registry file");

  auto* store_list = app.add_subcommand("store-list", "list device records");

  std::string delete_pdid;
  auto* store_delete = app.add_subcommand("store-delete", "delete one PDID");
  store_delete->add_option("--pdid", delete_pdid, "PDID to delete")->required();

  std::optional<std::int64_t> prune_now;
  auto* store_prune = app.add_subcommand("store-prune", "prune stale records");
  store_prune->add_option("--now-ms", prune_now, "override the current time (ms since epoch)");

  auto* config_show = app.add_subcommand("config-show", "print the effective configuration");

  CLI11_PARSE(app, argc, argv);

  if (serve->parsed()) {
    if (config_path.empty()) {
      std::cerr << "error: serve requires --config\n";
      return kExitInput;
    }
    return cmd_serve(config_path);
  }
  if (simulate->parsed()) return cmd_simulate(scenario_path, seed, format);
  if (report->parsed())
    return cmd_report(report_kind, store_path, pdid_str, format, rules_path, oui_path);
  if (store_list->parsed()) return cmd_store_list(store_path, format);
  if (store_delete->parsed()) return cmd_store_delete(store_path, delete_pdid, format);
  if (store_prune->parsed()) return cmd_store_prune(store_path, prune_now, format);
  if (config_show->parsed()) {
    if (config_path.empty()) {
      std::cerr << "error: config-show requires --config\n";
      return kExitInput;
    }
    return cmd_config_show(config_path, format);
  }
  return kExitInput;
}
