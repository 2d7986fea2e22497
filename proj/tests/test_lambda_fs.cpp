#include <gtest/gtest.h>

#include <random>

#include "csd/lambda_fs.hpp"
#include "lock_model.hpp"
#include "test_util.hpp"

using namespace csd;
using namespace csd::fs;
using nvme::PcieFunction;

namespace {

nvme::NamespaceTable layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, 1000},
                                          {nvme::NamespaceKind::Sharable, 1000, 9000}};
    return nvme::define_namespaces(spec);
}

struct Fixture {
    nvme::NvmeController ctl{layout()};
    LambdaFs fs{ctl};
};

}  // namespace

TEST(Mkfs, LayoutVisibleOnlyToFirmware) {
    Fixture f;
    EXPECT_NO_THROW(f.fs.walk(PcieFunction::Firmware, "/images/blobs"));
    EXPECT_NO_THROW(f.fs.walk(PcieFunction::Firmware, "/images/manifest"));
    EXPECT_NO_THROW(f.fs.walk(PcieFunction::Firmware, "/containers"));
    EXPECT_CSD_ERROR(f.fs.walk(PcieFunction::Host, "/images/blobs"), ErrorCode::NamespaceNotVisible);
    EXPECT_CSD_ERROR(f.fs.walk(PcieFunction::Host, "/containers"), ErrorCode::NamespaceNotVisible);
    EXPECT_TRUE(f.fs.list(PcieFunction::Host, "/").empty());
    EXPECT_EQ(f.fs.list(PcieFunction::Firmware, "/"), (std::vector<std::string>{"containers", "images"}));
}

TEST(Mkfs, NeedsBothNamespaces) {
    // A controller whose table lacks a kind cannot be built through
    // define_namespaces, so use an empty table.
    nvme::NvmeController ctl{nvme::NamespaceTable{}};
    EXPECT_CSD_ERROR(LambdaFs(ctl), ErrorCode::NamespaceMissing);
}

TEST(Files, WriteReadAcrossBlocks) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/data/tpch");
    Bytes data(10'000);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<std::uint8_t>(i * 7);
    f.fs.write_file(PcieFunction::Host, "/data/tpch/lineitem", data);
    EXPECT_EQ(f.fs.stat(PcieFunction::Host, "/data/tpch/lineitem").blocks.size(), 3u);
    EXPECT_EQ(f.fs.read_file(PcieFunction::Firmware, "/data/tpch/lineitem"), data);
    f.fs.append_file(PcieFunction::Host, "/data/tpch/lineitem", to_bytes("tail"));
    EXPECT_EQ(f.fs.read_file(PcieFunction::Host, "/data/tpch/lineitem").size(), 10'004u);
    EXPECT_EQ(nvme::audit_isolation(f.ctl.access_log(), f.ctl.namespaces()), 0u);
}

TEST(Files, BlockListsStayDisjoint) {
    Fixture f;
    std::mt19937_64 rng(3);
    for (int i = 0; i < 200; ++i) {
        auto path = "/f" + std::to_string(rng() % 20);
        if (rng() % 4 == 0 && f.fs.exists(PcieFunction::Host, path)) {
            f.fs.unlink(PcieFunction::Host, path);
        } else {
            f.fs.write_file(PcieFunction::Host, path, Bytes(rng() % 20'000, 1));
        }
    }
    std::set<std::uint64_t> seen;
    for (const auto& name : f.fs.list(PcieFunction::Host, "/")) {
        const auto& node = f.fs.stat(PcieFunction::Host, "/" + name);
        EXPECT_LE(node.size, node.blocks.size() * nvme::kBlockSize);
        for (auto lba : node.blocks) EXPECT_TRUE(seen.insert(lba).second);
    }
}

TEST(Files, ErrorsAndSymlinks) {
    Fixture f;
    EXPECT_CSD_ERROR(f.fs.read_file(PcieFunction::Host, "/missing"), ErrorCode::PathNotFound);
    f.fs.mkdir(PcieFunction::Host, "/d");
    EXPECT_CSD_ERROR(f.fs.mkdir(PcieFunction::Host, "/d"), ErrorCode::AlreadyExists);
    f.fs.write_file(PcieFunction::Host, "/d/x", to_bytes("x"));
    EXPECT_CSD_ERROR(f.fs.unlink(PcieFunction::Host, "/d"), ErrorCode::DirectoryNotEmpty);
    EXPECT_CSD_ERROR(f.fs.read_file(PcieFunction::Host, "/d"), ErrorCode::IsADirectory);
    EXPECT_CSD_ERROR(f.fs.create(PcieFunction::Host, "/d/x/y"), ErrorCode::NotADirectory);
    f.fs.symlink(PcieFunction::Host, "/d/x", "/link");
    EXPECT_EQ(to_text(f.fs.read_file(PcieFunction::Host, "/link")), "x");
    EXPECT_CSD_ERROR(f.fs.mkdir(PcieFunction::Host, "/images/evil"), ErrorCode::NamespaceNotVisible);
}

TEST(Files, UnlinkNotifiesListeners) {
    Fixture f;
    std::vector<std::string> removed;
    f.fs.add_unlink_listener([&](const std::string& p) { removed.push_back(p); });
    f.fs.write_file(PcieFunction::Host, "/x", to_bytes("1"));
    f.fs.unlink(PcieFunction::Host, "/x");
    EXPECT_EQ(removed, std::vector<std::string>{"/x"});
}

TEST(Files, PrivateNamespaceFillsUp) {
    Fixture f;
    Bytes big(nvme::kBlockSize * 600, 0);
    f.fs.write_file(PcieFunction::Firmware, "/containers/a", big);
    EXPECT_CSD_ERROR(f.fs.write_file(PcieFunction::Firmware, "/containers/b", big), ErrorCode::StorageFull);
    EXPECT_FALSE(f.fs.exists(PcieFunction::Firmware, "/containers/b") &&
                 f.fs.stat(PcieFunction::Firmware, "/containers/b").size > 0);
}

TEST(Bind, SendsOneSyncFrameAndIsIdempotent) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/data/tpch");
    auto a = f.fs.bind("/data/tpch");
    EXPECT_EQ(f.fs.locks().refcount(a), 0u);
    EXPECT_EQ(f.fs.sync_log().size(), 1u);
    EXPECT_EQ(f.fs.sync_log()[0].ethertype, ether::kEtherTypeSync);
    EXPECT_EQ(f.fs.bind("/data/tpch"), a);
    EXPECT_EQ(f.fs.sync_log().size(), 1u);
}

TEST(Bind, RejectsPrivateAndMissing) {
    Fixture f;
    EXPECT_CSD_ERROR(f.fs.bind("/images/blobs"), ErrorCode::PrivatePathBind);
    EXPECT_CSD_ERROR(f.fs.bind("/nope"), ErrorCode::PathNotFound);
}

TEST(Locks, ContainerGrantInvalidatesHostCache) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/data");
    f.fs.write_file(PcieFunction::Host, "/data/t", to_bytes("old"));
    f.fs.read_file(PcieFunction::Host, "/data/t");
    auto ino = f.fs.walk(PcieFunction::Host, "/data/t");
    EXPECT_TRUE(f.fs.vfs().valid(ino));
    auto out = f.fs.open(Side::Container, "/data/t");
    EXPECT_EQ(out.status, OpenStatus::Granted);
    EXPECT_FALSE(f.fs.vfs().valid(ino));
}

TEST(Locks, OpposingHolderBlocksThenFifoGrant) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/data");
    f.fs.write_file(PcieFunction::Host, "/data/t", to_bytes("x"));
    auto host = f.fs.open(Side::Host, "/data/t");
    auto c1 = f.fs.open(Side::Container, "/data/t");
    auto c2 = f.fs.open(Side::Container, "/data/t");
    EXPECT_EQ(c1.status, OpenStatus::Blocked);
    EXPECT_EQ(c2.status, OpenStatus::Blocked);
    auto granted = f.fs.close(host.handle);
    ASSERT_EQ(granted.size(), 2u);
    EXPECT_EQ(granted[0].id, c1.handle);
    EXPECT_EQ(granted[1].id, c2.handle);
}

TEST(Locks, DirectoryLockBlocksSibling) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/d");
    f.fs.write_file(PcieFunction::Host, "/d/a", to_bytes("a"));
    f.fs.write_file(PcieFunction::Host, "/d/b", to_bytes("b"));
    f.fs.open(Side::Host, "/d/a");
    EXPECT_EQ(f.fs.open(Side::Container, "/d/b").status, OpenStatus::Blocked);
}

TEST(Locks, RepeatedOpenCloseThenOpposingOpen) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("x"));
    for (int i = 0; i < 25; ++i) f.fs.close(f.fs.open(Side::Host, "/t").handle);
    EXPECT_EQ(f.fs.open(Side::Container, "/t").status, OpenStatus::Granted);
}

TEST(Locks, DoubleClose) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("x"));
    auto h = f.fs.open(Side::Host, "/t");
    f.fs.close(h.handle);
    EXPECT_CSD_ERROR(f.fs.close(h.handle), ErrorCode::DoubleClose);
}

TEST(Locks, RefcountTracksLiveHandles) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("x"));
    auto ino = f.fs.walk(PcieFunction::Host, "/t");
    std::mt19937_64 rng(9);
    std::vector<std::uint64_t> live;
    for (int i = 0; i < 1000; ++i) {
        if (live.empty() || rng() % 2 == 0) {
            live.push_back(f.fs.open(Side::Host, "/t").handle);
        } else {
            auto k = rng() % live.size();
            f.fs.close(live[k]);
            live.erase(live.begin() + static_cast<std::ptrdiff_t>(k));
        }
        ASSERT_EQ(f.fs.locks().refcount(ino, Side::Host), live.size());
    }
}

TEST(Locks, CoherentAfterContainerWrite) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("short"));
    EXPECT_EQ(to_text(f.fs.read_file(PcieFunction::Host, "/t")), "short");
    auto c = f.fs.open(Side::Container, "/t");
    f.fs.write_file(PcieFunction::Firmware, "/t", to_bytes("a much longer body"));
    f.fs.close(c.handle);
    auto h = f.fs.open(Side::Host, "/t");
    EXPECT_EQ(h.status, OpenStatus::Granted);
    EXPECT_EQ(to_text(f.fs.read_file(PcieFunction::Host, "/t")), "a much longer body");
}

TEST(Locks, BoundPathOpenCloseSendsSync) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/data");
    f.fs.write_file(PcieFunction::Host, "/data/t", to_bytes("x"));
    f.fs.bind("/data");
    auto before = f.fs.sync_log().size();
    auto h = f.fs.open(Side::Container, "/data/t");
    f.fs.close(h.handle);
    EXPECT_EQ(f.fs.sync_log().size(), before + 2);
    EXPECT_EQ(f.fs.stats().sync_round_trips, f.fs.stats().sync_frames);
}

TEST(Crash, ClearsLocksKeepsData) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("keep"));
    auto ino = f.fs.walk(PcieFunction::Host, "/t");
    for (int i = 0; i < 3; ++i) f.fs.open(Side::Host, "/t");
    EXPECT_EQ(f.fs.locks().refcount(ino), 3u);
    f.fs.crash_recover();
    EXPECT_EQ(f.fs.locks().refcount(ino), 0u);
    EXPECT_EQ(to_text(f.fs.read_file(PcieFunction::Host, "/t")), "keep");
    f.fs.crash_recover();
    EXPECT_EQ(f.fs.locks().live_count(), 0u);
}

TEST(Crash, MidTraceReplayNeverBlocksOnOldHandles) {
    Fixture f;
    f.fs.write_file(PcieFunction::Host, "/t", to_bytes("x"));
    f.fs.open(Side::Host, "/t");
    f.fs.open(Side::Host, "/t");
    f.fs.crash_recover();
    EXPECT_EQ(f.fs.open(Side::Container, "/t").status, OpenStatus::Granted);
}

TEST(Trace, ParseFormatRoundTrip) {
    auto events = parse_trace("# sample\nbind container /d\nopen host /d/a grant\n\nopen container /d/b block\n"
                              "close host /d/a\ncrash\n");
    ASSERT_EQ(events.size(), 5u);
    EXPECT_EQ(events[1].expect, OpenStatus::Granted);
    EXPECT_EQ(events[2].expect, OpenStatus::Blocked);
    EXPECT_EQ(events[4].op, TraceOp::Crash);
    for (const auto& e : events) EXPECT_EQ(parse_trace(format_event(e)).at(0), e);
    EXPECT_CSD_ERROR(parse_trace("jump host /d"), ErrorCode::InvalidArgument);
}

TEST(Trace, ReplayReportsDeferredGrants) {
    Fixture f;
    f.fs.mkdirs(PcieFunction::Host, "/d");
    f.fs.write_file(PcieFunction::Host, "/d/a", to_bytes("a"));
    f.fs.write_file(PcieFunction::Host, "/d/b", to_bytes("b"));
    auto run = run_trace(f.fs, parse_trace("bind container /d\nopen host /d/a grant\nopen container /d/b block\n"
                                           "close host /d/a\nclose container /d/b\n"));
    EXPECT_EQ(run.mismatches, 0u);
    EXPECT_EQ(run.lines.at(4), "# granted container /d/b");
}

TEST(ModelCheck, ShortTracesExhaustive) {
    auto report = lock_model::Checker(6).run();
    EXPECT_TRUE(report.ok()) << report.first_failure;
    EXPECT_GT(report.blocks, 0u);
    EXPECT_GT(report.traces, 1000u);
}
