#include "pdid/store.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>
#include <unordered_set>

#include "support.hpp"

using namespace pdid;

namespace {

MacAddress mac(const std::string& s) { return *MacAddress::parse(s); }

IdentityStore seeded_store(std::uint64_t seed, StoreConfig cfg = {}) {
  return IdentityStore(cfg, std::make_unique<SeededEntropy>(seed));
}

Pdid create_plain(IdentityStore& store, TimeMs t = 1000, bool ephemeral = false) {
  CreationSpec spec;
  spec.ephemeral = ephemeral;
  auto r = store.create_record(spec, t);
  EXPECT_TRUE(r.ok());
  return r.value();
}

}  // namespace

TEST(GeneratePdid, VersionAndVariantBits) {
  auto store = seeded_store(1);
  for (int i = 0; i < 1000; ++i) {
    auto p = store.generate_pdid();
    ASSERT_TRUE(p.ok());
    EXPECT_EQ(p.value().version(), 4);
    EXPECT_EQ(p.value().variant_bits(), 0b10);
  }
}

TEST(GeneratePdid, MillionDistinct) {
  auto store = seeded_store(2);
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(2'100'000);
  size_t collisions = 0;
  for (int i = 0; i < 1'000'000; ++i) {
    auto p = store.generate_pdid();
    ASSERT_TRUE(p.ok());
    std::uint64_t hi, lo;
    std::memcpy(&hi, p.value().bytes().data(), 8);
    std::memcpy(&lo, p.value().bytes().data() + 8, 8);
    if (!seen.insert(hi ^ (lo * 0x9E3779B97F4A7C15ULL)).second) ++collisions;
  }
  EXPECT_EQ(collisions, 0u);
}

TEST(GeneratePdid, IndependentlySeededStoresAreDisjoint) {
  auto a = seeded_store(100);
  auto b = seeded_store(200);
  std::set<Pdid> from_a, from_b;
  for (int i = 0; i < 10'000; ++i) {
    from_a.insert(a.generate_pdid().value());
    from_b.insert(b.generate_pdid().value());
  }
  std::vector<Pdid> common;
  std::set_intersection(from_a.begin(), from_a.end(), from_b.begin(), from_b.end(),
                        std::back_inserter(common));
  EXPECT_TRUE(common.empty());
}

TEST(GeneratePdid, EntropyFailureSurfaces) {
  class BrokenEntropy : public EntropySource {
   public:
    bool fill(std::uint8_t*, size_t) override { return false; }
  };
  IdentityStore store({}, std::make_unique<BrokenEntropy>());
  auto p = store.generate_pdid();
  ASSERT_FALSE(p.ok());
  EXPECT_EQ(p.code(), Errc::EntropyUnavailable);
}

TEST(AnchorLookup, EmptyStoreAbsent) {
  auto store = seeded_store(3);
  EXPECT_FALSE(store.lookup_by_anchor(AnchorKind::Certificate, "CN=anything").has_value());
}

TEST(AnchorLookup, WriteThenRead) {
  auto store = seeded_store(4);
  CreationSpec spec;
  spec.anchors[AnchorKind::Certificate] = "CN=dev-1";
  auto p = store.create_record(spec, 1000);
  ASSERT_TRUE(p.ok());
  auto rec = store.lookup_by_anchor(AnchorKind::Certificate, "CN=dev-1");
  ASSERT_TRUE(rec.has_value());
  EXPECT_EQ(rec->pdid, p.value());
}

TEST(AnchorLookup, KindsAreDistinctNamespaces) {
  auto store = seeded_store(5);
  CreationSpec spec;
  spec.anchors[AnchorKind::Certificate] = "shared-value";
  ASSERT_TRUE(store.create_record(spec, 1000).ok());
  EXPECT_TRUE(store.lookup_by_anchor(AnchorKind::Certificate, "shared-value").has_value());
  EXPECT_FALSE(store.lookup_by_anchor(AnchorKind::Username, "shared-value").has_value());
}

TEST(AnchorUniqueness, SecondRecordCannotClaimOwnedValue) {
  auto store = seeded_store(6);
  CreationSpec spec;
  spec.anchors[AnchorKind::MdmEnrollment] = "mdm-1";
  auto p1 = store.create_record(spec, 1000);
  auto p2 = create_plain(store);
  auto res = store.set_anchor(p2, AnchorKind::MdmEnrollment, "mdm-1", 2000);
  ASSERT_TRUE(res.ok());
  EXPECT_EQ(res.value(), AnchorSetResult::Conflict);
  EXPECT_EQ(store.lookup_by_anchor(AnchorKind::MdmEnrollment, "mdm-1")->pdid, p1.value());
}

TEST(MacLookup, UnknownAbsent) {
  auto store = seeded_store(7);
  EXPECT_FALSE(store.lookup_by_mac(mac("02:00:00:00:00:01")).has_value());
}

TEST(MacLookup, AssociateThenLookup) {
  auto store = seeded_store(8);
  auto p = create_plain(store);
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:01"), 2000).ok());
  auto rec = store.lookup_by_mac(mac("02:00:00:00:00:01"));
  ASSERT_TRUE(rec.has_value());
  EXPECT_EQ(rec->pdid, p);
}

TEST(AssociateMac, UnknownPdid) {
  auto store = seeded_store(9);
  auto st = store.associate_mac(store.generate_pdid().value(), mac("02:00:00:00:00:01"), 1);
  ASSERT_FALSE(st.ok());
  EXPECT_EQ(st.code(), Errc::UnknownPdid);
}

TEST(AssociateMac, LruEvictionAtCap) {
  StoreConfig cfg;
  cfg.max_macs_per_pdid = 3;
  auto store = seeded_store(10, cfg);
  auto p = create_plain(store);
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:01"), 1).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:02"), 2).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:03"), 3).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:04"), 4).ok());
  auto rec = store.get(p);
  ASSERT_TRUE(rec.has_value());
  ASSERT_EQ(rec->macs.size(), 3u);
  std::set<std::string> kept;
  for (const auto& me : rec->macs) kept.insert(me.mac.to_string());
  EXPECT_EQ(kept, (std::set<std::string>{"02:00:00:00:00:02", "02:00:00:00:00:03",
                                          "02:00:00:00:00:04"}));
  // the evicted MAC no longer resolves
  EXPECT_FALSE(store.lookup_by_mac(mac("02:00:00:00:00:01")).has_value());
}

TEST(AssociateMac, ReassociateUpdatesLastSeenWithoutGrowth) {
  auto store = seeded_store(11);
  auto p = create_plain(store);
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:01"), 10).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("02:00:00:00:00:01"), 99).ok());
  auto rec = store.get(p);
  ASSERT_EQ(rec->macs.size(), 1u);
  EXPECT_EQ(rec->macs[0].first_seen, 10);
  EXPECT_EQ(rec->macs[0].last_seen, 99);
}

TEST(HistoricalOui, SetFromUniversalMac) {
  auto store = seeded_store(12);
  auto p = create_plain(store);
  ASSERT_TRUE(store.associate_mac(p, mac("a8:bb:cc:00:00:07"), 1).ok());
  auto rec = store.get(p);
  ASSERT_TRUE(rec->historical_oui.has_value());
  EXPECT_EQ(*rec->historical_oui, "a8:bb:cc");
}

TEST(HistoricalOui, NeverFromLocallyAdministeredMac) {
  auto store = seeded_store(13);
  auto p = create_plain(store);
  ASSERT_TRUE(store.associate_mac(p, mac("02:11:22:00:00:07"), 1).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("06:11:22:00:00:08"), 2).ok());
  EXPECT_FALSE(store.get(p)->historical_oui.has_value());
  // first universal MAC fills it, later ones do not overwrite
  ASSERT_TRUE(store.associate_mac(p, mac("a8:00:00:00:00:01"), 3).ok());
  ASSERT_TRUE(store.associate_mac(p, mac("ac:00:00:00:00:02"), 4).ok());
  EXPECT_EQ(store.get(p)->historical_oui.value(), "a8:00:00");
}

TEST(MergeAttributes, UnionOfKeys) {
  auto store = seeded_store(14);
  auto p = create_plain(store);
  ASSERT_TRUE(store.merge_attributes(p, {{"dhcp_fp", "X"}}, "dhcp", 100).ok());
  ASSERT_TRUE(store.merge_attributes(p, {{"user_agent", "Y"}}, "http", 200).ok());
  auto rec = store.get(p);
  ASSERT_EQ(rec->profile.size(), 2u);
  EXPECT_EQ(rec->profile.at("dhcp_fp").current.value, "X");
  EXPECT_EQ(rec->profile.at("user_agent").current.value, "Y");
}

TEST(MergeAttributes, LastWriteWinsWithHistory) {
  auto store = seeded_store(15);
  auto p = create_plain(store);
  ASSERT_TRUE(store.merge_attributes(p, {{"k", "v1"}}, "s", 100).ok());
  ASSERT_TRUE(store.merge_attributes(p, {{"k", "v2"}}, "s", 200).ok());
  auto rec = store.get(p);
  const auto& entry = rec->profile.at("k");
  EXPECT_EQ(entry.current.value, "v2");
  ASSERT_EQ(entry.history.size(), 1u);
  EXPECT_EQ(entry.history[0].value, "v1");
}

TEST(MergeAttributes, HistoryBoundedAtDepthFour) {
  auto store = seeded_store(16);
  auto p = create_plain(store);
  for (int i = 1; i <= 8; ++i)
    ASSERT_TRUE(store.merge_attributes(p, {{"k", "v" + std::to_string(i)}}, "s", i * 10).ok());
  const auto entry = store.get(p)->profile.at("k");
  EXPECT_EQ(entry.current.value, "v8");
  ASSERT_EQ(entry.history.size(), ProfileEntry::kHistoryDepth);
  EXPECT_EQ(entry.history.front().value, "v7");  // newest first
  EXPECT_EQ(entry.history.back().value, "v4");
}

TEST(MergeAttributes, OutOfOrderTimestampGoesToHistory) {
  auto store = seeded_store(17);
  auto p = create_plain(store);
  ASSERT_TRUE(store.merge_attributes(p, {{"k", "new"}}, "s", 500).ok());
  ASSERT_TRUE(store.merge_attributes(p, {{"k", "stale"}}, "s", 100).ok());
  const auto entry = store.get(p)->profile.at("k");
  EXPECT_EQ(entry.current.value, "new");
  ASSERT_EQ(entry.history.size(), 1u);
  EXPECT_EQ(entry.history[0].value, "stale");
}

TEST(MergeAttributes, UnknownPdid) {
  auto store = seeded_store(18);
  auto st = store.merge_attributes(store.generate_pdid().value(), {{"k", "v"}}, "s", 1);
  ASSERT_FALSE(st.ok());
  EXPECT_EQ(st.code(), Errc::UnknownPdid);
}

TEST(DeletePdid, RemovesAllIndexEntries) {
  auto store = seeded_store(19);
  CreationSpec spec;
  spec.anchors[AnchorKind::AgentId] = "agent-1";
  spec.mac = mac("02:00:00:00:00:01");
  spec.fingerprint = "fp-1";
  auto p = store.create_record(spec, 1000);
  ASSERT_TRUE(p.ok());
  EXPECT_TRUE(store.delete_pdid(p.value(), 2000));
  EXPECT_FALSE(store.lookup_by_mac(mac("02:00:00:00:00:01")).has_value());
  EXPECT_FALSE(store.lookup_by_anchor(AnchorKind::AgentId, "agent-1").has_value());
  EXPECT_TRUE(store.fingerprint_holders("fp-1").empty());
  // audit trail recorded the deletion
  bool logged = false;
  for (const auto& e : store.audit().all())
    if (e.op == "deleted" && e.pdid == p.value()) logged = true;
  EXPECT_TRUE(logged);
}

TEST(DeletePdid, DoubleDeleteIsAbsent) {
  auto store = seeded_store(20);
  auto p = create_plain(store);
  EXPECT_TRUE(store.delete_pdid(p, 1));
  EXPECT_FALSE(store.delete_pdid(p, 2));
}

TEST(Prune, EmptyStore) {
  auto store = seeded_store(21);
  EXPECT_EQ(store.prune(1'000'000), 0u);
}

TEST(Prune, RetentionThreshold) {
  StoreConfig cfg;
  cfg.retention_ms = 1000;
  auto store = seeded_store(22, cfg);
  auto p = create_plain(store, 0);
  EXPECT_EQ(store.prune(1000), 0u);  // exactly at horizon: kept
  EXPECT_EQ(store.prune(1001), 1u);  // past it: gone
  EXPECT_FALSE(store.get(p).has_value());
}

TEST(Prune, EphemeralPrunedSelectively) {
  StoreConfig cfg;
  cfg.retention_ms = 100 * kDay;
  cfg.ephemeral_retention_ms = 1000;
  auto store = seeded_store(23, cfg);
  auto persistent = create_plain(store, 0, false);
  auto ephemeral = create_plain(store, 0, true);
  EXPECT_EQ(store.prune(2000), 1u);
  EXPECT_TRUE(store.get(persistent).has_value());
  EXPECT_FALSE(store.get(ephemeral).has_value());
}

TEST(LicenseCount, EmptyStore) {
  auto store = seeded_store(24);
  auto lc = store.license_count();
  EXPECT_EQ(lc.persistent, 0u);
  EXPECT_EQ(lc.ephemeral, 0u);
}

TEST(LicenseCount, CountsRecordsNotMacs) {
  auto store = seeded_store(25);
  auto p = create_plain(store);
  for (int i = 1; i <= 20; ++i)
    ASSERT_TRUE(
        store.associate_mac(p, mac("02:00:00:00:01:" + testsupport::hex((std::uint8_t*)&i, 1)), i)
            .ok());
  create_plain(store, 1, true);
  auto lc = store.license_count();
  EXPECT_EQ(lc.persistent, 1u);
  EXPECT_EQ(lc.ephemeral, 1u);
}

TEST(Absorb, MovesMacsAnchorsProfileAndLeavesAlias) {
  auto store = seeded_store(26);
  CreationSpec winner_spec;
  winner_spec.fingerprint = "fp-model";
  winner_spec.mac = mac("02:00:00:00:00:01");
  auto winner = store.create_record(winner_spec, 100);
  ASSERT_TRUE(winner.ok());
  ASSERT_TRUE(store.merge_attributes(winner.value(), {{"dhcp_option_list", "1,3,6"}}, "dhcp", 100).ok());

  CreationSpec loser_spec;
  loser_spec.mac = mac("02:00:00:00:00:02");
  auto loser = store.create_record(loser_spec, 200);
  ASSERT_TRUE(loser.ok());
  ASSERT_TRUE(store.merge_attributes(loser.value(), {{"radius_nas_id", "sw1"}}, "radius_mab", 200).ok());

  ASSERT_TRUE(store.absorb(loser.value(), winner.value(), 300).ok());

  EXPECT_FALSE(store.exists(loser.value()) &&
               store.resolve(loser.value()) == loser.value());
  EXPECT_EQ(store.resolve(loser.value()), winner.value());
  auto rec = store.get(winner.value());
  ASSERT_TRUE(rec.has_value());
  EXPECT_EQ(rec->macs.size(), 2u);
  EXPECT_TRUE(rec->profile.count("dhcp_option_list"));
  EXPECT_TRUE(rec->profile.count("radius_nas_id"));
  EXPECT_EQ(store.lookup_by_mac(mac("02:00:00:00:00:02"))->pdid, winner.value());
  auto lc = store.license_count();
  EXPECT_EQ(lc.persistent, 1u);
}

TEST(Snapshot, RoundTripPreservesLookupsAndCounts) {
  testsupport::TempDir dir("snap");
  auto store = seeded_store(27);
  CreationSpec s1;
  s1.anchors[AnchorKind::Certificate] = "CN=a";
  s1.mac = mac("02:00:00:00:00:01");
  s1.fingerprint = "fp-a";
  auto p1 = store.create_record(s1, 100);
  CreationSpec s2;
  s2.anchors[AnchorKind::Username] = "bob";
  auto p2 = store.create_record(s2, 200);
  create_plain(store, 300, true);
  ASSERT_TRUE(store.merge_attributes(p1.value(), {{"k1", "v1"}, {"k2", "v2"}}, "dhcp", 150).ok());
  ASSERT_TRUE(store.merge_attributes(p1.value(), {{"k1", "v9"}}, "dhcp", 160).ok());
  store.legacy_upsert(mac("a8:00:00:00:00:10"), {{"old", "attr"}}, "auth", 50);

  auto path = dir.file("store.snap");
  ASSERT_TRUE(store.snapshot_save(path).ok());

  IdentityStore loaded;
  ASSERT_TRUE(loaded.snapshot_load(path).ok());
  auto lc = loaded.license_count();
  EXPECT_EQ(lc.persistent, 2u);
  EXPECT_EQ(lc.ephemeral, 1u);
  EXPECT_EQ(loaded.lookup_by_anchor(AnchorKind::Certificate, "CN=a")->pdid, p1.value());
  EXPECT_EQ(loaded.lookup_by_anchor(AnchorKind::Username, "bob")->pdid, p2.value());
  EXPECT_EQ(loaded.lookup_by_mac(mac("02:00:00:00:00:01"))->pdid, p1.value());
  EXPECT_EQ(loaded.fingerprint_holders("fp-a").size(), 1u);
  auto rec = loaded.get(p1.value());
  EXPECT_EQ(rec->profile.at("k1").current.value, "v9");
  ASSERT_EQ(rec->profile.at("k1").history.size(), 1u);
  EXPECT_EQ(rec->profile.at("k1").history[0].value, "v1");
  ASSERT_TRUE(loaded.legacy_get(mac("a8:00:00:00:00:10")).has_value());
  EXPECT_EQ(loaded.legacy_get(mac("a8:00:00:00:00:10"))->profile.at("old").value, "attr");
  EXPECT_EQ(loaded.audit().size(), store.audit().size());
}

TEST(Snapshot, EmptyStoreRoundTrip) {
  testsupport::TempDir dir("snap_empty");
  auto store = seeded_store(28);
  auto path = dir.file("empty.snap");
  ASSERT_TRUE(store.snapshot_save(path).ok());
  IdentityStore loaded;
  ASSERT_TRUE(loaded.snapshot_load(path).ok());
  EXPECT_EQ(loaded.license_count().persistent, 0u);
  EXPECT_EQ(loaded.license_count().ephemeral, 0u);
}

TEST(Snapshot, TruncatedFileIsCorrupt) {
  testsupport::TempDir dir("snap_trunc");
  auto store = seeded_store(29);
  create_plain(store);
  auto path = dir.file("store.snap");
  ASSERT_TRUE(store.snapshot_save(path).ok());
  auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 5);
  IdentityStore loaded;
  auto st = loaded.snapshot_load(path);
  ASSERT_FALSE(st.ok());
  EXPECT_EQ(st.code(), Errc::CorruptSnapshot);
}

TEST(Snapshot, FlippedByteIsCorrupt) {
  testsupport::TempDir dir("snap_flip");
  auto store = seeded_store(30);
  create_plain(store);
  auto path = dir.file("store.snap");
  ASSERT_TRUE(store.snapshot_save(path).ok());
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(30);
  char c;
  f.seekg(30);
  f.get(c);
  f.seekp(30);
  f.put(static_cast<char>(c ^ 0xFF));
  f.close();
  IdentityStore loaded;
  auto st = loaded.snapshot_load(path);
  ASSERT_FALSE(st.ok());
  EXPECT_EQ(st.code(), Errc::CorruptSnapshot);
}

TEST(Snapshot, MissingFileIsIoFailure) {
  IdentityStore loaded;
  auto st = loaded.snapshot_load("/nonexistent/path/store.snap");
  ASSERT_FALSE(st.ok());
  EXPECT_EQ(st.code(), Errc::IoFailure);
}

// Property: after any operation sequence the store invariants hold, and a
// snapshot round trip preserves every lookup result.
TEST(StoreProperties, RandomOperationSequences) {
  std::mt19937_64 rng(0xBEEF);
  for (int round = 0; round < 20; ++round) {
    StoreConfig cfg;
    cfg.max_macs_per_pdid = 4;
    auto store = seeded_store(1000 + round, cfg);
    std::vector<Pdid> pdids;
    std::vector<std::string> macs;
    for (int i = 0; i < 12; ++i) {
      char buf[18];
      std::snprintf(buf, sizeof(buf), "02:00:00:00:%02x:%02x", round, i);
      macs.push_back(buf);
    }

    for (int op = 0; op < 120; ++op) {
      TimeMs t = op * 10;
      switch (rng() % 6) {
        case 0: {
          CreationSpec spec;
          spec.ephemeral = rng() % 4 == 0;
          if (rng() % 2) spec.anchors[AnchorKind::Certificate] = "cn-" + std::to_string(rng() % 8);
          auto p = store.create_record(spec, t);
          ASSERT_TRUE(p.ok());
          pdids.push_back(p.value());
          break;
        }
        case 1:
          if (!pdids.empty())
            store.associate_mac(pdids[rng() % pdids.size()], mac(macs[rng() % macs.size()]), t);
          break;
        case 2:
          if (!pdids.empty())
            store.merge_attributes(pdids[rng() % pdids.size()],
                                   {{"k" + std::to_string(rng() % 3), std::to_string(rng())}},
                                   "s", t);
          break;
        case 3:
          if (!pdids.empty())
            store.set_anchor(pdids[rng() % pdids.size()], AnchorKind::Username,
                             "u" + std::to_string(rng() % 6), t);
          break;
        case 4:
          if (!pdids.empty() && rng() % 8 == 0) store.delete_pdid(pdids[rng() % pdids.size()], t);
          break;
        case 5:
          if (pdids.size() >= 2 && rng() % 8 == 0) {
            auto a = store.resolve(pdids[rng() % pdids.size()]);
            auto b = store.resolve(pdids[rng() % pdids.size()]);
            if (a != b && store.exists(a) && store.exists(b) && !store.get(a)->ephemeral &&
                !store.get(b)->ephemeral)
              store.absorb(a, b, t);
          }
          break;
      }
    }

    // invariant: anchor uniqueness by full scan
    std::map<std::pair<AnchorKind, std::string>, int> anchor_holders;
    for (const auto& rec : store.all_records()) {
      EXPECT_LE(rec.macs.size(), cfg.max_macs_per_pdid);
      if (!rec.ephemeral)
        for (const auto& [kind, value] : rec.anchors) ++anchor_holders[{kind, value}];
    }
    for (const auto& [key, count] : anchor_holders) EXPECT_EQ(count, 1);

    // invariant: MAC -> record is a function, and lookups match record state
    for (const auto& m : macs) {
      auto rec = store.lookup_by_mac(mac(m));
      if (rec) {
        EXPECT_TRUE(rec->has_mac(mac(m)));
      }
    }

    // snapshot round trip preserves all observable state
    testsupport::TempDir dir("prop" + std::to_string(round));
    auto path = dir.file("s.snap");
    ASSERT_TRUE(store.snapshot_save(path).ok());
    IdentityStore loaded;
    ASSERT_TRUE(loaded.snapshot_load(path).ok());
    EXPECT_EQ(loaded.license_count().persistent, store.license_count().persistent);
    EXPECT_EQ(loaded.license_count().ephemeral, store.license_count().ephemeral);
    for (const auto& m : macs) {
      auto a = store.lookup_by_mac(mac(m));
      auto b = loaded.lookup_by_mac(mac(m));
      EXPECT_EQ(a.has_value(), b.has_value());
      if (a && b) {
        EXPECT_EQ(a->pdid, b->pdid);
      }
    }
    for (const auto& rec : store.all_records()) {
      auto other = loaded.get(rec.pdid);
      ASSERT_TRUE(other.has_value());
      EXPECT_EQ(other->profile.size(), rec.profile.size());
      EXPECT_EQ(other->anchors, rec.anchors);
      EXPECT_EQ(other->fingerprints, rec.fingerprints);
    }
  }
}
