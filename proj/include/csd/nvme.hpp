#pragma once

// Simulated NVMe substrate: queue pairs, doorbells, PRP pages, MSI events,
// namespaces and the split between the firmware and host PCIe functions.

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "csd/common.hpp"

namespace csd::nvme {

inline constexpr std::size_t kPageSize = 4096;
inline constexpr std::size_t kBlockSize = 4096;
inline constexpr std::size_t kCommandSize = 64;
inline constexpr std::size_t kDefaultQueueDepth = 64;

enum class Opcode : std::uint8_t {
    Write = 0x01,
    Read = 0x02,
    TransmitFrame = 0xE0,
    ReceiveFrame = 0xE1,
};

bool is_known_opcode(std::uint8_t raw) noexcept;
inline bool is_block_io(Opcode op) noexcept { return op == Opcode::Read || op == Opcode::Write; }

enum class PcieFunction { Firmware, Host };
enum class NamespaceKind { Private, Sharable };

std::string_view to_string(PcieFunction f) noexcept;
std::string_view to_string(NamespaceKind k) noexcept;

struct PageAddress {
    std::uint64_t value = 0;

    bool aligned() const noexcept { return value % kPageSize == 0; }
    auto operator<=>(const PageAddress&) const = default;
};

using PageBytes = std::array<std::uint8_t, kPageSize>;

/// One 4 KiB page of the simulated DMA address space.
struct Page {
    PageAddress address;
    PageBytes bytes{};
};

/// Host-visible DMA memory. Pages are handed out 4 KiB aligned and zeroed.
class DmaMemory {
public:
    PageAddress allocate();
    void release(PageAddress addr);
    void store(const Page& page);

    PageBytes& at(PageAddress addr);
    const PageBytes& at(PageAddress addr) const;
    bool contains(PageAddress addr) const { return pages_.contains(addr.value); }
    std::size_t size() const noexcept { return pages_.size(); }

private:
    std::map<std::uint64_t, PageBytes> pages_;
    std::uint64_t next_ = 0x1000'0000;
};

struct NvmeCommand {
    Opcode opcode = Opcode::Read;
    std::uint16_t command_id = 0;
    std::uint32_t nsid = 0;
    PageAddress prp;
    std::uint64_t lba = 0;
    std::uint32_t length = 0;
    std::uint32_t cdw12 = 0;

    bool operator==(const NvmeCommand&) const = default;
};

/// Throws InvalidCommand when a field violates the command invariants.
void validate(const NvmeCommand& cmd);

/// Little-endian 64-byte submission entry: byte 0 opcode, 2..3 CID, 4..7
/// NSID, 24..31 PRP1, 40..47 LBA (CDW10/11), 48..51 CDW12, 52..55 length
/// (CDW13). Everything else is zero.
std::array<std::uint8_t, kCommandSize> encode_command(const NvmeCommand& cmd);
NvmeCommand decode_command(std::span<const std::uint8_t, kCommandSize> raw);

struct CompletionEntry {
    std::uint16_t command_id = 0;
    std::uint8_t status = 0;
    std::uint32_t result = 0;  // command-specific DW0
};

struct MsiEvent {
    std::uint16_t queue_id = 0;
    std::uint16_t command_id = 0;
    std::uint8_t status = 0;
    std::uint32_t result = 0;
    SimTime time = 0;

    bool operator==(const MsiEvent&) const = default;
};

struct CommandTicket {
    std::uint16_t queue_id = 0;
    std::uint16_t command_id = 0;
};

class QueuePair {
public:
    QueuePair(std::uint16_t id, std::size_t depth);

    CommandTicket push(const NvmeCommand& cmd, PcieFunction function);
    NvmeCommand fetch();
    CompletionEntry complete(std::uint16_t command_id, std::uint8_t status, std::uint32_t result = 0);

    bool is_outstanding(std::uint16_t command_id) const { return outstanding_.contains(command_id); }
    PcieFunction submitter(std::uint16_t command_id) const;

    std::uint16_t id() const noexcept { return id_; }
    std::size_t depth() const noexcept { return depth_; }
    std::size_t outstanding() const noexcept { return outstanding_.size(); }
    std::size_t unfetched() const noexcept { return unfetched_.size(); }
    std::size_t free_entries() const noexcept { return depth_ - outstanding_.size(); }
    std::uint64_t submitted() const noexcept { return submitted_; }
    std::uint64_t completed() const noexcept { return completed_; }
    std::uint64_t sq_doorbell() const noexcept { return sq_doorbell_; }
    std::uint64_t cq_doorbell() const noexcept { return cq_doorbell_; }
    std::span<const CompletionEntry> completions() const noexcept { return cq_; }

private:
    struct Slot {
        NvmeCommand cmd;
        PcieFunction function;
        bool fetched = false;
    };

    std::uint16_t id_;
    std::size_t depth_;
    std::deque<std::uint16_t> unfetched_;
    std::map<std::uint16_t, Slot> outstanding_;
    std::vector<CompletionEntry> cq_;
    std::uint64_t sq_doorbell_ = 0;
    std::uint64_t cq_doorbell_ = 0;
    std::uint64_t submitted_ = 0;
    std::uint64_t completed_ = 0;
};

/// One entry of a namespace layout request.
struct NamespaceSpec {
    NamespaceKind kind;
    std::uint64_t first_block;
    std::uint64_t block_count;
};

struct Namespace {
    std::uint32_t nsid = 0;
    NamespaceKind kind = NamespaceKind::Sharable;
    std::uint64_t first_block = 0;
    std::uint64_t block_count = 0;

    bool contains_media_block(std::uint64_t block) const noexcept {
        return block >= first_block && block - first_block < block_count;
    }
};

class NamespaceTable {
public:
    NamespaceTable() = default;

    bool visible(PcieFunction function, std::uint32_t nsid) const;
    const Namespace& get(std::uint32_t nsid) const;
    const Namespace* find(NamespaceKind kind) const;
    std::vector<std::uint32_t> visible_nsids(PcieFunction function) const;
    std::span<const Namespace> namespaces() const noexcept { return namespaces_; }

private:
    friend NamespaceTable define_namespaces(std::span<const NamespaceSpec> layout);
    std::vector<Namespace> namespaces_;
};

/// Builds the namespace table. nsids are assigned 1.. in layout order.
/// Exactly one private and one sharable namespace are required.
NamespaceTable define_namespaces(std::span<const NamespaceSpec> layout);

/// Sparse backing store for the flash media, addressed by media block.
class MediaStore {
public:
    const PageBytes& read(std::uint64_t block) const;
    void write(std::uint64_t block, ByteView data, std::size_t offset = 0);
    std::size_t blocks_written() const noexcept { return blocks_.size(); }

private:
    std::map<std::uint64_t, PageBytes> blocks_;
};

/// A successful media access made on behalf of a PCIe function.
struct AccessRecord {
    PcieFunction function;
    std::uint32_t nsid;
    std::uint64_t media_block;
    Opcode opcode;
};

struct NvmeTiming {
    SimTime fetch_ns = 150;
    SimTime complete_ns = 150;
    SimTime flash_read_ns = 20'000;
    SimTime flash_write_ns = 45'000;
};

class NvmeController {
public:
    explicit NvmeController(NamespaceTable table, NvmeTiming timing = {});

    std::uint16_t create_queue_pair(std::size_t depth = kDefaultQueueDepth);
    QueuePair& queue(std::uint16_t qid);
    const QueuePair& queue(std::uint16_t qid) const;
    std::size_t queue_count() const noexcept { return queues_.size(); }

    /// Host or firmware side: place a command and ring the SQ doorbell.
    CommandTicket submit(std::uint16_t qid, const NvmeCommand& cmd, PcieFunction function);
    /// Device side: take the oldest unfetched command.
    NvmeCommand device_fetch(std::uint16_t qid);
    /// Device side: post a CQ entry and raise an MSI.
    MsiEvent device_complete(std::uint16_t qid, std::uint16_t command_id, std::uint8_t status,
                             std::uint32_t result = 0);

    /// Moves data between the media and the command's PRP page. Only valid
    /// for fetched block I/O commands. Returns the NVMe status (0 = success).
    std::uint8_t execute_block_io(std::uint16_t qid, const NvmeCommand& cmd);

    /// Fetches, executes and completes every unfetched block I/O command.
    std::vector<MsiEvent> process(std::uint16_t qid);

    const NamespaceTable& namespaces() const noexcept { return table_; }
    DmaMemory& dma() noexcept { return dma_; }
    MediaStore& media() noexcept { return media_; }
    const std::vector<MsiEvent>& msi_log() const noexcept { return msi_log_; }
    const std::vector<AccessRecord>& access_log() const noexcept { return access_log_; }
    SimTime now() const noexcept { return now_; }
    const NvmeTiming& timing() const noexcept { return timing_; }

private:
    NamespaceTable table_;
    NvmeTiming timing_;
    std::vector<QueuePair> queues_;
    DmaMemory dma_;
    MediaStore media_;
    std::vector<MsiEvent> msi_log_;
    std::vector<AccessRecord> access_log_;
    SimTime now_ = 0;
};

/// Number of successful host-function accesses that landed on a private
/// namespace block. Anything but zero is an isolation breach.
std::size_t audit_isolation(std::span<const AccessRecord> log, const NamespaceTable& table);

/// Synchronous block port: submits one command on a dedicated queue and
/// drives it to completion. Used by components that need block I/O through
/// a specific PCIe function.
class BlockPort {
public:
    BlockPort(NvmeController& controller, PcieFunction function);

    PageBytes read(std::uint32_t nsid, std::uint64_t lba);
    void write(std::uint32_t nsid, std::uint64_t lba, ByteView data);

    PcieFunction function() const noexcept { return function_; }
    std::uint64_t commands_issued() const noexcept { return issued_; }

private:
    std::uint8_t run(NvmeCommand cmd);

    NvmeController& controller_;
    PcieFunction function_;
    std::uint16_t qid_;
    std::uint16_t next_cid_ = 0;
    PageAddress page_;
    std::uint64_t issued_ = 0;
};

}  // namespace csd::nvme
