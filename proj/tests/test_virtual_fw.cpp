#include <gtest/gtest.h>

#include <random>
#include <set>

#include "csd/virtual_fw.hpp"
#include "test_util.hpp"

using namespace csd;
using namespace csd::vfw;
using nvme::PcieFunction;

namespace {

nvme::NamespaceTable layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, 2000},
                                          {nvme::NamespaceKind::Sharable, 2000, 8000}};
    return nvme::define_namespaces(spec);
}

struct Rig {
    nvme::NvmeController ctl{layout()};
    fs::LambdaFs fs{ctl};
    IoNodeCache cache{64};
    LambdaFsBackend backend{fs, cache};
    VirtualFw fw{backend};
};

SyscallInvocation call(std::string name) {
    SyscallInvocation c;
    c.name = std::move(name);
    return c;
}

// Components a plain walker would look up: one per non-empty segment.
std::size_t reference_lookups(std::string_view path) {
    std::size_t n = 0;
    bool in_segment = false;
    for (char c : path) {
        if (c == '/') {
            in_segment = false;
        } else if (!in_segment) {
            in_segment = true;
            ++n;
        }
    }
    return n;
}

}  // namespace

TEST(Catalog, CountsPerHandler) {
    const auto& t = SyscallTable::builtin();
    EXPECT_EQ(t.count(HandlerKind::Thread), 65u);
    EXPECT_EQ(t.count(HandlerKind::Io), 43u);
    EXPECT_EQ(t.count(HandlerKind::Network), 25u);
    EXPECT_EQ(t.entries().size(), 133u);
    EXPECT_EQ(t.executable_count(HandlerKind::Thread), 10u);
    EXPECT_EQ(t.executable_count(HandlerKind::Io), 10u);
    EXPECT_EQ(t.executable_count(HandlerKind::Network), 10u);
}

TEST(Catalog, TableExamplesAreExecutable) {
    const auto& t = SyscallTable::builtin();
    for (auto name : {"fork", "exit", "brk", "mmap", "pipe", "mq_open", "futex", "openat", "mkdir", "read", "symlink",
                      "chmod", "chown", "epoll_create", "socket", "bind", "sendto"})
        EXPECT_TRUE(t.executable(name)) << name;
    EXPECT_EQ(t.canonical("open")->name, "openat");
    EXPECT_EQ(t.canonical("accept4")->name, "accept");
    EXPECT_FALSE(t.executable("mprotect"));
}

TEST(Catalog, EmulatedCheaperThanFullOs) {
    for (const auto& e : SyscallTable::builtin().entries()) EXPECT_LT(e.cost_ns, e.fullos_ns) << e.name;
}

TEST(Catalog, ParseRejectsBadRows) {
    EXPECT_CSD_ERROR(SyscallTable::parse_csv("name,handler,category,cost_ns,fullos_ns,alias_of\nx,disk,c,1,2,\n"),
                     ErrorCode::InvalidArgument);
    EXPECT_CSD_ERROR(SyscallTable::parse_csv("name,handler\n"), ErrorCode::InvalidArgument);
    auto t = SyscallTable::parse_csv("name,handler,category,cost_ns,fullos_ns,alias_of\nread,io,x,10,20,\n");
    EXPECT_EQ(t.find("read")->cost_ns, 10u);
}

TEST(Emulate, OpenGoesToIoHandlerWithoutContextSwitch) {
    Rig r;
    r.fs.mkdirs(PcieFunction::Firmware, "/data");
    r.fs.write_file(PcieFunction::Firmware, "/data/x", to_bytes("abc"));
    auto c = call("open");
    c.path = "/data/x";
    auto res = r.fw.emulate(c);
    EXPECT_GE(res.value, 3);
    EXPECT_EQ(res.handler, HandlerKind::Io);
    EXPECT_EQ(res.dispatched, "openat");
    auto walk_cost = 2 * r.fw.costs().walk_lookup_ns;
    EXPECT_EQ(res.cost_ns, SyscallTable::builtin().find("openat")->cost_ns + walk_cost);
    EXPECT_EQ(r.fw.stats().context_switches, 0u);
}

TEST(Emulate, FullOsChargesSwitch) {
    Rig r;
    CostConfig costs;
    costs.mode = ExecutionMode::FullOs;
    VirtualFw full(r.backend, costs);
    auto res = full.emulate(call("getpid"));
    EXPECT_EQ(res.cost_ns, 2500u + 5000u);
    EXPECT_EQ(full.stats().context_switches, 1u);
}

TEST(Emulate, ForkCreatesThread) {
    Rig r;
    auto& parent = r.fw.spawn_container_thread("c1", std::string("run.sh"));
    auto c = call("fork");
    c.tid = parent.tid;
    auto res = r.fw.emulate(c);
    EXPECT_EQ(res.handler, HandlerKind::Thread);
    ASSERT_NE(r.fw.thread(static_cast<std::uint32_t>(res.value)), nullptr);
    EXPECT_EQ(r.fw.thread(static_cast<std::uint32_t>(res.value))->owner, "c1");
}

TEST(Emulate, UnknownAndCatalogOnlyCalls) {
    Rig r;
    EXPECT_CSD_ERROR(r.fw.emulate(call("frobnicate")), ErrorCode::UnimplementedSyscall);
    EXPECT_CSD_ERROR(r.fw.emulate(call("mprotect")), ErrorCode::UnimplementedSyscall);
}

TEST(Emulate, FileRoundTrip) {
    Rig r;
    auto mk = call("mkdir");
    mk.path = "/work";
    EXPECT_EQ(r.fw.emulate(mk).value, 0);
    EXPECT_EQ(r.fw.emulate(mk).value, kEEXIST);
    auto op = call("openat");
    op.path = "/work/out";
    op.args = {kOpenCreate};
    auto fd = r.fw.emulate(op).value;
    auto wr = call("write");
    wr.args = {fd};
    wr.data = to_bytes("hello world");
    EXPECT_EQ(r.fw.emulate(wr).value, 11);
    auto seek = call("lseek");
    seek.args = {fd, 6};
    r.fw.emulate(seek);
    auto rd = call("read");
    rd.args = {fd, 100};
    auto got = r.fw.emulate(rd);
    EXPECT_EQ(to_text(got.data), "world");
    auto cl = call("close");
    cl.args = {fd};
    r.fw.emulate(cl);
    EXPECT_CSD_ERROR(r.fw.emulate(cl), ErrorCode::BadFileDescriptor);
    auto missing = call("openat");
    missing.path = "/work/none";
    EXPECT_EQ(r.fw.emulate(missing).value, kENOENT);
    auto sl = call("symlink");
    sl.path = "/work/out";
    sl.path2 = "/work/link";
    EXPECT_EQ(r.fw.emulate(sl).value, 0);
    auto ch = call("chmod");
    ch.path = "/work/link";
    ch.args = {0644};
    EXPECT_EQ(r.fw.emulate(ch).value, 0);
    auto un = call("unlink");
    un.path = "/work/out";
    EXPECT_EQ(r.fw.emulate(un).value, 0);
    EXPECT_FALSE(r.fs.exists(PcieFunction::Firmware, "/work/out"));
}

TEST(Emulate, MemoryAndIpcCalls) {
    Rig r;
    auto b0 = r.fw.emulate(call("brk")).value;
    auto grow = call("brk");
    grow.args = {b0 + 8192};
    EXPECT_EQ(r.fw.emulate(grow).value, b0 + 8192);
    auto mm = call("mmap");
    mm.args = {0, 10000};
    auto addr = r.fw.emulate(mm).value;
    EXPECT_EQ(r.fw.pools().pool_of(static_cast<std::uint64_t>(addr)), PoolKind::Isp);
    auto pipe = r.fw.emulate(call("pipe2"));
    EXPECT_EQ(pipe.dispatched, "pipe");
    EXPECT_EQ(pipe.data.size(), 8u);
    EXPECT_EQ(r.fw.emulate(call("futex")).value, 0);
    EXPECT_GE(r.fw.emulate(call("mq_open")).value, 3);
}

TEST(Emulate, SocketHandshakeAndSend) {
    Rig r;
    std::vector<ether::TcpSegment> wire;
    r.fw.set_segment_sink([&](const ether::TcpSegment& s) { wire.push_back(s); });
    auto s = r.fw.emulate(call("socket")).value;
    auto send = call("sendto");
    send.args = {s};
    send.data = Bytes(3000, 1);
    EXPECT_EQ(r.fw.emulate(send).value, kENOTCONN);
    auto conn = call("connect");
    conn.args = {s, 2375};
    EXPECT_EQ(r.fw.emulate(conn).value, 0);
    EXPECT_EQ(r.fw.connection(static_cast<int>(s))->state, TcpState::Established);
    EXPECT_EQ(r.fw.emulate(send).value, 3000);
    EXPECT_EQ(wire.size(), 3u);
    r.fw.deliver_to_socket(static_cast<int>(s), to_bytes("reply"));
    auto recv = call("recvfrom");
    recv.args = {s, 100};
    EXPECT_EQ(to_text(r.fw.emulate(recv).data), "reply");
    auto sh = call("shutdown");
    sh.args = {s};
    r.fw.emulate(sh);
    EXPECT_EQ(r.fw.connection(static_cast<int>(s))->state, TcpState::FinWait1);
}

TEST(Emulate, ListenAcceptAndEpoll) {
    Rig r;
    auto s = r.fw.emulate(call("socket")).value;
    auto b = call("bind");
    b.args = {s, 80};
    EXPECT_EQ(r.fw.emulate(b).value, 0);
    auto l = call("listen");
    l.args = {s};
    r.fw.emulate(l);
    EXPECT_EQ(r.fw.connection(static_cast<int>(s))->state, TcpState::Listen);
    auto a = call("accept");
    a.args = {s};
    EXPECT_EQ(r.fw.emulate(a).value, kEAGAIN);
    r.fw.deliver_to_socket(static_cast<int>(s), to_bytes("GET /"));
    auto child = r.fw.emulate(a).value;
    EXPECT_EQ(r.fw.connection(static_cast<int>(child))->state, TcpState::Established);
    auto ep = r.fw.emulate(call("epoll_create")).value;
    auto ctl = call("epoll_ctl");
    ctl.args = {ep, 1, child};
    EXPECT_EQ(r.fw.emulate(ctl).value, 0);
}

TEST(Privilege, UserTouchOfFwPoolFaults) {
    MemoryPools pools;
    pools.set_mode(Mode::Privileged);
    auto fw = pools.allocate(PoolKind::Fw, 100);
    auto isp = pools.allocate(PoolKind::Isp, 100);
    pools.write(fw, to_bytes("table"));
    pools.write(isp, to_bytes("args"));
    EXPECT_EQ(pools.copies(), 0u);
    pools.set_mode(Mode::User);
    EXPECT_CSD_ERROR(pools.read(fw, 4), ErrorCode::Fault);
    EXPECT_CSD_ERROR(pools.write(fw, to_bytes("x")), ErrorCode::Fault);
    EXPECT_EQ(to_text(pools.read(isp, 4)), "args");
    EXPECT_EQ(pools.faults(), 2u);
    EXPECT_EQ(pools.user_fw_successes(), 0u);
}

TEST(Privilege, SyscallWithFwBufferFaults) {
    Rig r;
    r.fw.pools().set_mode(Mode::Privileged);
    auto fw_addr = r.fw.pools().allocate(PoolKind::Fw, 64);
    r.fw.pools().set_mode(Mode::User);
    auto c = call("getpid");
    c.buffer = fw_addr;
    EXPECT_CSD_ERROR(r.fw.emulate(c), ErrorCode::Fault);
    EXPECT_EQ(r.fw.pools().user_fw_successes(), 0u);
}

TEST(PathWalk, ColdThenWarm) {
    Rig r;
    r.fs.mkdirs(PcieFunction::Firmware, "/a/b/c");
    auto cold = path_walk(r.fs, r.cache, "/a/b/c");
    EXPECT_EQ(cold.lookups, reference_lookups("/a/b/c"));
    EXPECT_FALSE(cold.cache_hit);
    auto warm = path_walk(r.fs, r.cache, "/a/b/c");
    EXPECT_TRUE(warm.cache_hit);
    EXPECT_EQ(warm.lookups, 0u);
    EXPECT_EQ(warm.ino, cold.ino);
    auto partial = path_walk(r.fs, r.cache, "/a/b");
    EXPECT_TRUE(partial.cache_hit);
}

TEST(PathWalk, RootAndMissing) {
    Rig r;
    EXPECT_EQ(path_walk(r.fs, r.cache, "/").ino, fs::kRootIno);
    auto before = r.cache.size();
    EXPECT_CSD_ERROR(path_walk(r.fs, r.cache, "/nope/deeper"), ErrorCode::PathNotFound);
    EXPECT_EQ(r.cache.size(), before);
}

TEST(PathWalk, RandomInvalidationStaysSound) {
    Rig r;
    std::mt19937_64 rng(21);
    std::vector<std::string> paths;
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) {
            auto p = "/d" + std::to_string(i) + "/e" + std::to_string(j);
            r.fs.mkdirs(PcieFunction::Firmware, p);
            r.fs.write_file(PcieFunction::Firmware, p + "/f", to_bytes("x"));
            paths.push_back(p + "/f");
            paths.push_back(p);
        }
    for (int step = 0; step < 3000; ++step) {
        auto& p = paths[rng() % paths.size()];
        switch (rng() % 6) {
        case 0: r.cache.clear(); break;
        case 1: r.cache.invalidate_prefix(p); break;
        case 2:
            if (r.fs.exists(PcieFunction::Firmware, p) && r.fs.stat(PcieFunction::Firmware, p).kind == fs::InodeKind::File) {
                r.fs.unlink(PcieFunction::Firmware, p);
                r.cache.invalidate_prefix(p);
                r.fs.write_file(PcieFunction::Firmware, p, to_bytes("y"));
            }
            break;
        default: {
            auto expected = r.fs.walk(PcieFunction::Firmware, p);
            ASSERT_EQ(path_walk(r.fs, r.cache, p).ino, expected) << p;
        }
        }
    }
}

TEST(PathWalk, UnlinkThroughBackendInvalidates) {
    Rig r;
    r.fs.add_unlink_listener([&](const std::string& p) { r.cache.invalidate_prefix(p); });
    r.fs.write_file(PcieFunction::Firmware, "/x", to_bytes("1"));
    auto first = path_walk(r.fs, r.cache, "/x").ino;
    r.fs.unlink(PcieFunction::Firmware, "/x");
    r.fs.write_file(PcieFunction::Firmware, "/x", to_bytes("2"));
    auto second = path_walk(r.fs, r.cache, "/x").ino;
    EXPECT_NE(first, second);
    EXPECT_EQ(second, r.fs.walk(PcieFunction::Firmware, "/x"));
}

TEST(IoNodeCache, EvictsLeastRecentlyUsed) {
    IoNodeCache cache(2);
    cache.put("/a", 2);
    cache.put("/b", 3);
    cache.get("/a");
    cache.put("/c", 4);
    EXPECT_TRUE(cache.get("/a").has_value());
    EXPECT_FALSE(cache.get("/b").has_value());
    EXPECT_TRUE(cache.get("/c").has_value());
}

namespace {

using S = TcpState;
using E = TcpEvent;

// The standard edge set, without CLOSING (simultaneous close folds into
// TIME_WAIT).
const std::map<std::pair<S, E>, S>& legal_edges() {
    static const std::map<std::pair<S, E>, S> edges{
        {{S::Closed, E::PassiveOpen}, S::Listen},     {{S::Closed, E::ActiveOpen}, S::SynSent},
        {{S::Listen, E::Syn}, S::SynRcvd},            {{S::Listen, E::Close}, S::Closed},
        {{S::SynSent, E::SynAck}, S::Established},    {{S::SynSent, E::Syn}, S::SynRcvd},
        {{S::SynSent, E::Close}, S::Closed},          {{S::SynSent, E::Timeout}, S::Closed},
        {{S::SynRcvd, E::Ack}, S::Established},       {{S::SynRcvd, E::Close}, S::FinWait1},
        {{S::SynRcvd, E::Timeout}, S::Closed},        {{S::Established, E::Close}, S::FinWait1},
        {{S::Established, E::Fin}, S::CloseWait},     {{S::FinWait1, E::Ack}, S::FinWait2},
        {{S::FinWait1, E::Fin}, S::TimeWait},         {{S::FinWait2, E::Fin}, S::TimeWait},
        {{S::CloseWait, E::Close}, S::LastAck},       {{S::LastAck, E::Ack}, S::Closed},
        {{S::TimeWait, E::Timeout}, S::Closed},
    };
    return edges;
}

}  // namespace

TEST(Tcp, CanonicalEdges) {
    EXPECT_EQ(tcp_step(S::Closed, E::ActiveOpen), S::SynSent);
    EXPECT_EQ(tcp_step(S::Listen, E::Syn), S::SynRcvd);
    EXPECT_CSD_ERROR(tcp_step(S::Established, E::Syn), ErrorCode::IllegalTransition);
}

TEST(Tcp, EveryPairMatchesEdgeSet) {
    for (std::size_t s = 0; s < kTcpStateCount; ++s)
        for (std::size_t e = 0; e < kTcpEventCount; ++e) {
            auto state = static_cast<S>(s);
            auto event = static_cast<E>(e);
            auto it = legal_edges().find({state, event});
            if (it == legal_edges().end()) {
                EXPECT_CSD_ERROR(tcp_step(state, event), ErrorCode::IllegalTransition);
            } else {
                EXPECT_EQ(tcp_step(state, event), it->second) << to_string(state) << " " << to_string(event);
            }
        }
}

TEST(Tcp, EstablishedOnlyThroughHandshake) {
    std::mt19937_64 rng(31);
    for (int run = 0; run < 2000; ++run) {
        TcpConnection conn;
        std::vector<E> since_closed;
        for (int i = 0; i < 30; ++i) {
            auto event = static_cast<E>(rng() % kTcpEventCount);
            auto before = conn.state;
            if (!tcp_next(before, event)) {
                EXPECT_CSD_ERROR(conn.step(event), ErrorCode::IllegalTransition);
                continue;
            }
            conn.step(event);
            since_closed.push_back(event);
            if (conn.state == S::Established && before != S::Established) {
                // active: open, syn_ack; passive: open, syn, ack; simultaneous: open, syn, ack
                bool active = since_closed.size() == 2 && since_closed[0] == E::ActiveOpen && since_closed[1] == E::SynAck;
                bool three = since_closed.size() == 3 &&
                             (since_closed[0] == E::PassiveOpen || since_closed[0] == E::ActiveOpen) &&
                             since_closed[1] == E::Syn && since_closed[2] == E::Ack;
                ASSERT_TRUE(active || three);
            }
            if (conn.state == S::Closed) since_closed.clear();
        }
    }
}

TEST(Tcp, SequenceNumbersAdvanceOnSynAndFin) {
    TcpConnection c;
    c.step(E::ActiveOpen);
    EXPECT_EQ(c.snd_nxt, 1u);
    c.step(E::SynAck);
    EXPECT_EQ(c.rcv_nxt, 1u);
    c.step(E::Fin);
    EXPECT_EQ(c.rcv_nxt, 2u);
}

TEST(Scheduler, TwelveThreadsOnSixCores) {
    Rig r;
    std::vector<std::uint32_t> tids;
    for (int i = 0; i < 12; ++i) tids.push_back(r.fw.spawn_container_thread("c", std::string("e")).tid);
    auto& s = r.fw.scheduler();
    auto running = s.running();
    EXPECT_EQ(running, std::vector<std::uint32_t>(tids.begin(), tids.begin() + 6));
    EXPECT_EQ(s.queued(), std::vector<std::uint32_t>(tids.begin() + 6, tids.end()));
    s.tick();
    EXPECT_EQ(s.running(), std::vector<std::uint32_t>(tids.begin() + 6, tids.end()));
    EXPECT_EQ(s.thread(tids[0])->cpu_ns, 1'000'000u);
    EXPECT_EQ(s.thread(tids[7])->cpu_ns, 0u);
}

TEST(Scheduler, ExitFreesCore) {
    Scheduler s(2);
    ThreadRecord a{1, "x", "e"}, b{2, "x", "e"}, c{3, "x", "e"};
    s.admit(a);
    s.admit(b);
    s.admit(c);
    EXPECT_EQ(c.state, ThreadState::Runnable);
    s.exit(1);
    EXPECT_EQ(c.state, ThreadState::Running);
    EXPECT_EQ(a.state, ThreadState::Exited);
}

TEST(Spawn, MissingEntry) {
    Rig r;
    EXPECT_CSD_ERROR(r.fw.spawn_container_thread("c", std::nullopt), ErrorCode::NoEntryScript);
    EXPECT_CSD_ERROR(r.fw.spawn_container_thread("c", std::string()), ErrorCode::NoEntryScript);
    auto& t = r.fw.spawn_container_thread("c", std::string("run"));
    EXPECT_EQ(t.state, ThreadState::Running);
    EXPECT_EQ(r.fw.pools().pool_of(t.record_addr), PoolKind::Isp);
}
