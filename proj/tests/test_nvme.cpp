#include <gtest/gtest.h>

#include <random>

#include "csd/nvme.hpp"
#include "test_util.hpp"

using namespace csd;
using namespace csd::nvme;

namespace {

NamespaceTable standard_layout() {
    std::vector<NamespaceSpec> layout{{NamespaceKind::Private, 0, 1000}, {NamespaceKind::Sharable, 1000, 9000}};
    return define_namespaces(layout);
}

NvmeCommand read_cmd(std::uint16_t cid, std::uint32_t nsid, std::uint64_t lba, PageAddress prp) {
    return {Opcode::Read, cid, nsid, prp, lba, 4096, 0};
}

}  // namespace

TEST(Namespaces, FirmwareSeesBothHostSeesSharable) {
    auto table = standard_layout();
    EXPECT_EQ(table.visible_nsids(PcieFunction::Firmware), (std::vector<std::uint32_t>{1, 2}));
    EXPECT_EQ(table.visible_nsids(PcieFunction::Host), (std::vector<std::uint32_t>{2}));
}

TEST(Namespaces, RejectsOverlapAndMissingKind) {
    std::vector<NamespaceSpec> overlap{{NamespaceKind::Private, 0, 1000}, {NamespaceKind::Sharable, 999, 10}};
    EXPECT_CSD_ERROR(define_namespaces(overlap), ErrorCode::OverlappingRanges);
    std::vector<NamespaceSpec> only_private{{NamespaceKind::Private, 0, 1000}};
    EXPECT_CSD_ERROR(define_namespaces(only_private), ErrorCode::MissingKind);
}

TEST(CommandCodec, GoldenTransmitBytes) {
    NvmeCommand cmd{Opcode::TransmitFrame, 7, 0, {0x1000'0000}, 0, 32, 0};
    auto raw = encode_command(cmd);
    EXPECT_EQ(to_hex(raw), read_golden_hex("cmd_tx_hello.hex"));
    EXPECT_EQ(decode_command(raw), cmd);
}

TEST(CommandCodec, RejectsUnknownOpcodeAndUnalignedPrp) {
    std::array<std::uint8_t, kCommandSize> raw{};
    raw[0] = 0x09;
    EXPECT_CSD_ERROR(decode_command(raw), ErrorCode::InvalidCommand);
    NvmeCommand cmd{Opcode::Read, 1, 2, {0x1000'0010}, 0, 4096, 0};
    EXPECT_CSD_ERROR(validate(cmd), ErrorCode::InvalidCommand);
}

TEST(Submit, HostReadOnSharableIssuesTicket) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    auto ticket = ctl.submit(q, read_cmd(3, 2, 0, page), PcieFunction::Host);
    EXPECT_EQ(ticket.queue_id, q);
    EXPECT_EQ(ticket.command_id, 3);
    EXPECT_EQ(ctl.queue(q).sq_doorbell(), 1u);
}

TEST(Submit, HostReadOnPrivateIsRejected) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    EXPECT_CSD_ERROR(ctl.submit(q, read_cmd(0, 1, 0, page), PcieFunction::Host), ErrorCode::NamespaceNotVisible);
    EXPECT_NO_THROW(ctl.submit(q, read_cmd(0, 1, 0, page), PcieFunction::Firmware));
}

TEST(Submit, OverflowsAtDepthPlusOne) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    // Independent count: the first 64 must fit, the 65th must not.
    for (std::uint16_t cid = 0; cid < 64; ++cid)
        ASSERT_NO_THROW(ctl.submit(q, read_cmd(cid, 2, cid, page), PcieFunction::Host)) << cid;
    EXPECT_CSD_ERROR(ctl.submit(q, read_cmd(64, 2, 0, page), PcieFunction::Host), ErrorCode::QueueFull);
}

TEST(Submit, DuplicateOutstandingId) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    ctl.submit(q, read_cmd(5, 2, 0, page), PcieFunction::Host);
    EXPECT_CSD_ERROR(ctl.submit(q, read_cmd(5, 2, 1, page), PcieFunction::Host), ErrorCode::DuplicateCommandId);
}

TEST(Submit, LbaBeyondNamespace) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    EXPECT_CSD_ERROR(ctl.submit(q, read_cmd(0, 1, 1000, page), PcieFunction::Firmware), ErrorCode::LbaOutOfRange);
}

TEST(Fetch, FifoAndEmpty) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    EXPECT_CSD_ERROR(ctl.device_fetch(q), ErrorCode::Empty);
    ctl.submit(q, read_cmd(10, 2, 0, page), PcieFunction::Host);
    ctl.submit(q, read_cmd(11, 2, 0, page), PcieFunction::Host);
    EXPECT_EQ(ctl.device_fetch(q).command_id, 10);
    EXPECT_EQ(ctl.device_fetch(q).command_id, 11);
}

TEST(Fetch, RandomInterleavingMatchesSubmissionOrder) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    std::mt19937_64 rng(42);
    std::vector<std::uint16_t> submitted, fetched;
    std::uint16_t cid = 0;
    for (int i = 0; i < 1000; ++i) {
        auto& qp = ctl.queue(q);
        bool can_submit = qp.free_entries() > 0;
        bool can_fetch = qp.unfetched() > 0;
        if (can_submit && (!can_fetch || rng() % 2 == 0)) {
            ctl.submit(q, read_cmd(cid, 2, 0, page), PcieFunction::Host);
            submitted.push_back(cid++);
        } else {
            auto cmd = ctl.device_fetch(q);
            fetched.push_back(cmd.command_id);
            ctl.device_complete(q, cmd.command_id, 0);
        }
        ASSERT_EQ(qp.submitted(), qp.completed() + qp.outstanding());
    }
    while (ctl.queue(q).unfetched() > 0) fetched.push_back(ctl.device_fetch(q).command_id);
    EXPECT_EQ(fetched, submitted);
}

TEST(Complete, EmitsMsiAndRejectsSecondCompletion) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    ctl.submit(q, read_cmd(9, 2, 0, page), PcieFunction::Host);
    auto cmd = ctl.device_fetch(q);
    auto msi = ctl.device_complete(q, cmd.command_id, 0);
    EXPECT_EQ(msi.command_id, 9);
    EXPECT_CSD_ERROR(ctl.device_complete(q, 9, 0), ErrorCode::UnknownCommand);
}

TEST(Complete, UnfetchedCommandIsUnknown) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    ctl.submit(q, read_cmd(1, 2, 0, page), PcieFunction::Host);
    EXPECT_CSD_ERROR(ctl.device_complete(q, 1, 0), ErrorCode::UnknownCommand);
}

TEST(Complete, NCommandsGiveNEvents) {
    NvmeController ctl(standard_layout());
    auto q = ctl.create_queue_pair();
    auto page = ctl.dma().allocate();
    for (std::uint16_t cid = 0; cid < 17; ++cid) ctl.submit(q, read_cmd(cid, 2, cid, page), PcieFunction::Host);
    auto events = ctl.process(q);
    EXPECT_EQ(events.size(), 17u);
    EXPECT_EQ(ctl.queue(q).completions().size(), 17u);
    EXPECT_EQ(ctl.msi_log().size(), 17u);
}

TEST(BlockIo, WriteThenReadThroughPorts) {
    NvmeController ctl(standard_layout());
    BlockPort fw(ctl, PcieFunction::Firmware);
    BlockPort host(ctl, PcieFunction::Host);
    auto data = to_bytes("sharable payload");
    fw.write(2, 17, data);
    auto page = host.read(2, 17);
    EXPECT_EQ(to_text(ByteView(page.data(), data.size())), "sharable payload");
    EXPECT_CSD_ERROR(host.read(1, 0), ErrorCode::NamespaceNotVisible);
    EXPECT_EQ(audit_isolation(ctl.access_log(), ctl.namespaces()), 0u);
}

TEST(Determinism, SameTraceSameCompletionLog) {
    auto run = [] {
        NvmeController ctl(standard_layout());
        auto q = ctl.create_queue_pair();
        auto page = ctl.dma().allocate();
        std::mt19937_64 rng(7);
        for (std::uint16_t cid = 0; cid < 50; ++cid) {
            NvmeCommand cmd{rng() % 2 ? Opcode::Read : Opcode::Write, cid, 2, page, rng() % 9000, 4096, 0};
            ctl.submit(q, cmd, PcieFunction::Host);
        }
        ctl.process(q);
        return ctl.msi_log();
    };
    EXPECT_EQ(run(), run());
}
