#include "pdid/correlator.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <barrier>
#include <chrono>
#include <thread>

#include "support.hpp"

using namespace pdid;

namespace {

struct Fixture {
  IdentityStore store;
  Correlator correlator;

  explicit Fixture(StoreConfig cfg = {}, std::uint64_t seed = 42)
      : store(cfg, std::make_unique<SeededEntropy>(seed)), correlator(store) {}
};

IdentitySignalSet cert_signals(const std::string& cn, const std::string& mac_str) {
  IdentitySignalSet s;
  s.cert_id = cn;
  s.mac = MacAddress::parse(mac_str);
  return s;
}

}  // namespace

TEST(Confidence, FixedMapping) {
  EXPECT_EQ(confidence_of(MatchedBy::Certificate), Confidence::VeryHigh);
  EXPECT_EQ(confidence_of(MatchedBy::MdmEnrollment), Confidence::VeryHigh);
  EXPECT_EQ(confidence_of(MatchedBy::AgentId), Confidence::High);
  EXPECT_EQ(confidence_of(MatchedBy::Username), Confidence::Medium);
  EXPECT_EQ(confidence_of(MatchedBy::Fingerprint), Confidence::Medium);
  EXPECT_EQ(confidence_of(MatchedBy::Mac), Confidence::VeryHigh);
  EXPECT_EQ(confidence_of(MatchedBy::New), Confidence::New);
  EXPECT_EQ(confidence_of(MatchedBy::NoneEphemeral), Confidence::None);
}

TEST(Correlate, NoSignalsIsAnError) {
  Fixture f;
  auto r = f.correlator.correlate({}, 1000);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.code(), Errc::NoSignals);
}

TEST(Correlate, FirstContactCreatesAndIndexesEverything) {
  Fixture f;
  auto r = f.correlator.correlate(cert_signals("CN=dev-9", "02:00:00:00:00:09"), 1000);
  ASSERT_TRUE(r.ok());
  EXPECT_EQ(r.value().matched_by, MatchedBy::New);
  EXPECT_EQ(r.value().confidence, Confidence::New);
  auto by_anchor = f.store.lookup_by_anchor(AnchorKind::Certificate, "CN=dev-9");
  ASSERT_TRUE(by_anchor.has_value());
  EXPECT_EQ(by_anchor->pdid, r.value().pdid);
  auto by_mac = f.store.lookup_by_mac(*MacAddress::parse("02:00:00:00:00:09"));
  ASSERT_TRUE(by_mac.has_value());
  EXPECT_EQ(by_mac->pdid, r.value().pdid);
}

TEST(Correlate, ReturningCertDeviceMatchesVeryHigh) {
  Fixture f;
  auto first = f.correlator.correlate(cert_signals("CN=dev-1", "02:00:00:00:00:01"), 1000);
  ASSERT_TRUE(first.ok());
  auto again = f.correlator.correlate(cert_signals("CN=dev-1", "06:11:22:33:44:55"), 2000);
  ASSERT_TRUE(again.ok());
  EXPECT_EQ(again.value().pdid, first.value().pdid);
  EXPECT_EQ(again.value().matched_by, MatchedBy::Certificate);
  EXPECT_EQ(again.value().confidence, Confidence::VeryHigh);
  // the fresh randomized MAC was associated
  EXPECT_EQ(f.store.lookup_by_mac(*MacAddress::parse("06:11:22:33:44:55"))->pdid,
            first.value().pdid);
}

TEST(Correlate, MdmDeviceReturnsWithFreshRandomizedMac) {
  Fixture f;
  IdentitySignalSet enroll;
  enroll.mdm_id = "mdm-77";
  enroll.mac = MacAddress::parse("02:aa:aa:aa:aa:01");
  auto first = f.correlator.correlate(enroll, 1000);
  ASSERT_TRUE(first.ok());

  IdentitySignalSet back;
  back.mdm_id = "mdm-77";
  back.mac = MacAddress::parse("02:bb:bb:bb:bb:02");
  auto again = f.correlator.correlate(back, 5000);
  ASSERT_TRUE(again.ok());
  EXPECT_EQ(again.value().pdid, first.value().pdid);
  EXPECT_EQ(again.value().matched_by, MatchedBy::MdmEnrollment);
  EXPECT_EQ(again.value().confidence, Confidence::VeryHigh);
  auto rec = f.store.get(first.value().pdid);
  EXPECT_EQ(rec->macs.size(), 2u);
}

TEST(Correlate, HotspotCreatesEphemeralEveryTime) {
  Fixture f;
  IdentitySignalSet s;
  s.mac = MacAddress::parse("02:00:00:00:00:01");
  s.hint = UseCaseHint::GuestHotspot;
  auto r1 = f.correlator.correlate(s, 1000);
  ASSERT_TRUE(r1.ok());
  EXPECT_EQ(r1.value().matched_by, MatchedBy::NoneEphemeral);
  EXPECT_EQ(r1.value().confidence, Confidence::None);

  IdentitySignalSet s2;
  s2.mac = MacAddress::parse("02:00:00:00:00:02");  // rotated MAC
  s2.hint = UseCaseHint::GuestHotspot;
  auto r2 = f.correlator.correlate(s2, 2000);
  ASSERT_TRUE(r2.ok());
  EXPECT_NE(r2.value().pdid, r1.value().pdid);
  auto lc = f.store.license_count();
  EXPECT_EQ(lc.persistent, 0u);
  EXPECT_EQ(lc.ephemeral, 2u);
}

TEST(Correlate, FixedMacPathOnlyForUniversalMacs) {
  Fixture f;
  IdentitySignalSet first;
  first.mac = MacAddress::parse("a8:00:00:00:00:01");  // universal: IoT fixed
  auto r1 = f.correlator.correlate(first, 1000);
  ASSERT_TRUE(r1.ok());
  EXPECT_EQ(r1.value().matched_by, MatchedBy::New);

  auto r2 = f.correlator.correlate(first, 2000);
  ASSERT_TRUE(r2.ok());
  EXPECT_EQ(r2.value().pdid, r1.value().pdid);
  EXPECT_EQ(r2.value().matched_by, MatchedBy::Mac);
  EXPECT_EQ(r2.value().confidence, Confidence::VeryHigh);

  // a locally-administered MAC never takes the fixed-MAC path
  IdentitySignalSet random_mac;
  random_mac.mac = MacAddress::parse("02:00:00:00:00:77");
  auto r3 = f.correlator.correlate(random_mac, 3000);
  ASSERT_TRUE(r3.ok());
  auto r4 = f.correlator.correlate(random_mac, 4000);
  ASSERT_TRUE(r4.ok());
  EXPECT_NE(r4.value().pdid, r3.value().pdid) << "randomized MAC must not re-correlate by MAC";
}

TEST(Correlate, PriorityRespected) {
  // both cert and username anchors exist on DIFFERENT records; cert wins
  StoreConfig cfg;
  cfg.username_sufficient = true;
  Fixture f(cfg);
  IdentitySignalSet a;
  a.cert_id = "CN=laptop";
  auto cert_rec = f.correlator.correlate(a, 1000);
  ASSERT_TRUE(cert_rec.ok());
  IdentitySignalSet b;
  b.username = "alice";
  auto user_rec = f.correlator.correlate(b, 2000);
  ASSERT_TRUE(user_rec.ok());
  ASSERT_NE(cert_rec.value().pdid, user_rec.value().pdid);

  IdentitySignalSet both;
  both.cert_id = "CN=laptop";
  both.username = "alice";
  auto r = f.correlator.correlate(both, 3000);
  ASSERT_TRUE(r.ok());
  EXPECT_EQ(r.value().pdid, cert_rec.value().pdid);
  EXPECT_EQ(r.value().matched_by, MatchedBy::Certificate);
}

TEST(Correlate, UsernameAloneGatedByDefault) {
  Fixture f;
  IdentitySignalSet guest;
  guest.username = "guest-1";
  guest.mac = MacAddress::parse("02:00:00:00:00:01");
  auto r1 = f.correlator.correlate(guest, 1000);
  ASSERT_TRUE(r1.ok());
  EXPECT_EQ(r1.value().matched_by, MatchedBy::New);

  // same username, new MAC, no fingerprint evidence: stays separate
  IdentitySignalSet back;
  back.username = "guest-1";
  back.mac = MacAddress::parse("02:00:00:00:00:02");
  auto r2 = f.correlator.correlate(back, 2000);
  ASSERT_TRUE(r2.ok());
  EXPECT_NE(r2.value().pdid, r1.value().pdid);
}

TEST(Correlate, UsernameMatchesWhenFingerprintShared) {
  Fixture f;
  IdentitySignalSet first;
  first.username = "guest-2";
  first.mac = MacAddress::parse("02:00:00:00:01:01");
  first.fingerprint = "fp-phone-model";
  auto r1 = f.correlator.correlate(first, 1000);
  ASSERT_TRUE(r1.ok());

  IdentitySignalSet back;
  back.username = "guest-2";
  back.mac = MacAddress::parse("02:00:00:00:01:02");
  back.fingerprint = "fp-phone-model";
  auto r2 = f.correlator.correlate(back, 2000);
  ASSERT_TRUE(r2.ok());
  EXPECT_EQ(r2.value().pdid, r1.value().pdid);
  EXPECT_EQ(r2.value().matched_by, MatchedBy::Username);
  EXPECT_EQ(r2.value().confidence, Confidence::Medium);
}

TEST(Correlate, UsernameSufficientFlagBypassesGate) {
  StoreConfig cfg;
  cfg.username_sufficient = true;
  Fixture f(cfg);
  IdentitySignalSet first;
  first.username = "guest-3";
  auto r1 = f.correlator.correlate(first, 1000);
  auto r2 = f.correlator.correlate(first, 2000);
  ASSERT_TRUE(r1.ok() && r2.ok());
  EXPECT_EQ(r2.value().pdid, r1.value().pdid);
}

TEST(Correlate, AnchorConflictWarnsAndNeverReanchors) {
  Fixture f;
  IdentitySignalSet a = cert_signals("CN=dev-1", "02:00:00:00:00:01");
  a.username = "alice";
  auto r1 = f.correlator.correlate(a, 1000);
  ASSERT_TRUE(r1.ok());

  // same device by cert, but a different username signal
  IdentitySignalSet b = cert_signals("CN=dev-1", "02:00:00:00:00:02");
  b.username = "bob";
  auto r2 = f.correlator.correlate(b, 2000);
  ASSERT_TRUE(r2.ok());
  EXPECT_EQ(r2.value().pdid, r1.value().pdid);

  auto rec = f.store.get(r1.value().pdid);
  EXPECT_EQ(rec->anchors.at(AnchorKind::Username), "alice") << "conflict must not re-anchor";
  ASSERT_TRUE(rec->profile.count("conflict.username"));
  EXPECT_EQ(rec->profile.at("conflict.username").current.value, "bob");
  bool warned = false;
  for (const auto& e : f.store.audit().all())
    if (e.op == "anchor_conflict") warned = true;
  EXPECT_TRUE(warned);
}

TEST(CreateWithGuard, TwoConcurrentIdenticalCertRequests) {
  Fixture f;
  std::barrier sync(2);
  Result<CorrelationResult> r1{Error{Errc::NoSignals, ""}}, r2{Error{Errc::NoSignals, ""}};
  std::thread t1([&] {
    sync.arrive_and_wait();
    r1 = f.correlator.correlate(cert_signals("CN=same", "02:00:00:00:00:01"), 1000);
  });
  std::thread t2([&] {
    sync.arrive_and_wait();
    r2 = f.correlator.correlate(cert_signals("CN=same", "02:00:00:00:00:02"), 1000);
  });
  t1.join();
  t2.join();
  ASSERT_TRUE(r1.ok() && r2.ok());
  EXPECT_EQ(r1.value().pdid, r2.value().pdid);
  EXPECT_EQ(f.store.license_count().persistent, 1u);
}

TEST(CreateWithGuard, SixtyFourConcurrentSameAgent) {
  Fixture f;
  constexpr int kThreads = 64;
  std::barrier sync(kThreads);
  std::vector<std::thread> threads;
  std::vector<Pdid> results(kThreads);
  std::atomic<int> failures{0};
  for (int i = 0; i < kThreads; ++i) {
    threads.emplace_back([&, i] {
      IdentitySignalSet s;
      s.agent_id = "agent-racy";
      char m[18];
      std::snprintf(m, sizeof(m), "02:00:00:00:b0:%02x", i);
      s.mac = MacAddress::parse(m);
      sync.arrive_and_wait();
      auto r = f.correlator.correlate(s, 1000);
      if (r.ok())
        results[static_cast<size_t>(i)] = r.value().pdid;
      else
        ++failures;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(failures, 0);
  for (int i = 1; i < kThreads; ++i) EXPECT_EQ(results[static_cast<size_t>(i)], results[0]);
  // brute-force oracle: scan the store after quiescence
  EXPECT_EQ(f.store.license_count().persistent, 1u);
  EXPECT_EQ(f.store.all_records().size(), 1u);
}

TEST(CreateWithGuard, ReturningDeviceNeverTouchesTheGuard) {
  Fixture f;
  ASSERT_TRUE(f.correlator.correlate(cert_signals("CN=dev", "02:00:00:00:00:01"), 1000).ok());
  auto acquisitions_before = f.correlator.guard_stats().acquisitions;
  for (int i = 0; i < 50; ++i) {
    char m[18];
    std::snprintf(m, sizeof(m), "02:00:00:00:c0:%02x", i);
    ASSERT_TRUE(f.correlator.correlate(cert_signals("CN=dev", m), 2000 + i).ok());
  }
  EXPECT_EQ(f.correlator.guard_stats().acquisitions, acquisitions_before);
}

TEST(CreateWithGuard, DistinctKeysDoNotBlockEachOther) {
  Fixture f;
  f.correlator.guard().set_timeout_ms(200);
  std::atomic<bool> slow_held{false};
  f.correlator.after_acquire_hook = [&](const std::string& key) {
    if (key == "certificate:CN=slow") {
      slow_held = true;
      std::this_thread::sleep_for(std::chrono::milliseconds(150));
    }
  };
  std::thread slow([&] {
    ASSERT_TRUE(f.correlator.correlate(cert_signals("CN=slow", "02:00:00:00:00:01"), 1000).ok());
  });
  while (!slow_held) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  auto t0 = std::chrono::steady_clock::now();
  ASSERT_TRUE(f.correlator.correlate(cert_signals("CN=fast", "02:00:00:00:00:02"), 1000).ok());
  auto elapsed = std::chrono::steady_clock::now() - t0;
  slow.join();
  EXPECT_LT(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count(), 100)
      << "a creation under a different key must not wait for the slow holder";
}

// A holder that stalls past the timeout loses its handle: a second requester
// takes over and creates; the stalled holder's late commit is rejected and it
// returns the takeover's record.
TEST(CreateWithGuard, StalledHolderLateWriteRejected) {
  Fixture f;
  f.correlator.guard().set_timeout_ms(100);
  std::atomic<bool> first_acquired{false};
  std::atomic<bool> second_done{false};
  std::atomic<int> stall_count{0};
  f.correlator.after_acquire_hook = [&](const std::string&) {
    if (stall_count.fetch_add(1) == 0) {
      first_acquired = true;
      while (!second_done) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
  };

  Result<CorrelationResult> r1{Error{Errc::NoSignals, ""}}, r2{Error{Errc::NoSignals, ""}};
  std::thread stalled([&] {
    r1 = f.correlator.correlate(cert_signals("CN=contended", "02:00:00:00:00:01"), 1000);
  });
  while (!first_acquired) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  std::thread taker([&] {
    r2 = f.correlator.correlate(cert_signals("CN=contended", "02:00:00:00:00:02"), 1000);
    second_done = true;
  });
  taker.join();
  stalled.join();

  ASSERT_TRUE(r1.ok() && r2.ok());
  EXPECT_EQ(r1.value().pdid, r2.value().pdid) << "late write must converge on the takeover record";
  EXPECT_EQ(f.store.license_count().persistent, 1u);
  EXPECT_EQ(r2.value().matched_by, MatchedBy::New);
  EXPECT_EQ(r1.value().matched_by, MatchedBy::Certificate) << "stalled holder re-checked and hit";
  EXPECT_GE(f.correlator.guard_stats().takeovers, 1u);
}

TEST(CreateWithGuard, TimeoutSurfacesWhenHolderOccupiesKey) {
  Fixture f;
  f.correlator.guard().set_timeout_ms(80);
  std::atomic<bool> held{false};
  std::atomic<bool> release{false};
  std::atomic<int> calls{0};
  f.correlator.after_acquire_hook = [&](const std::string&) {
    if (calls.fetch_add(1) == 0) {
      held = true;
      // stall but keep re-arming under the expiry horizon is impossible; the
      // waiter's own deadline fires first because both share one timeout
      while (!release) std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  };
  std::thread holder([&] {
    (void)f.correlator.correlate(cert_signals("CN=key", "02:00:00:00:00:01"), 1000);
  });
  while (!held) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  // the waiter times out OR takes over after expiry; either way it returns the
  // single record and never duplicates
  auto r = f.correlator.correlate(cert_signals("CN=key", "02:00:00:00:00:02"), 1000);
  release = true;
  holder.join();
  ASSERT_TRUE(r.ok());
  EXPECT_EQ(f.store.license_count().persistent, 1u);
}
