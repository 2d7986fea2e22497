#include "csd/nvme.hpp"

#include <algorithm>
#include <cstring>

#include <fmt/format.h>

namespace csd::nvme {

namespace {

template <typename T>
void put_le(std::uint8_t* dst, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = static_cast<std::uint8_t>(value >> (8 * i));
}

template <typename T>
T get_le(const std::uint8_t* src) {
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(src[i]) << (8 * i);
    return value;
}

}  // namespace

bool is_known_opcode(std::uint8_t raw) noexcept {
    switch (static_cast<Opcode>(raw)) {
    case Opcode::Write:
    case Opcode::Read:
    case Opcode::TransmitFrame:
    case Opcode::ReceiveFrame: return true;
    }
    return false;
}

std::string_view to_string(PcieFunction f) noexcept { return f == PcieFunction::Host ? "host" : "firmware"; }
std::string_view to_string(NamespaceKind k) noexcept { return k == NamespaceKind::Private ? "private" : "sharable"; }

// --- DmaMemory -------------------------------------------------------------

PageAddress DmaMemory::allocate() {
    PageAddress addr{next_};
    next_ += kPageSize;
    pages_.emplace(addr.value, PageBytes{});
    return addr;
}

void DmaMemory::release(PageAddress addr) { pages_.erase(addr.value); }

void DmaMemory::store(const Page& page) {
    if (!page.address.aligned()) throw Error(ErrorCode::InvalidCommand, "unaligned PRP page");
    pages_[page.address.value] = page.bytes;
    next_ = std::max(next_, page.address.value + kPageSize);
}

PageBytes& DmaMemory::at(PageAddress addr) {
    auto it = pages_.find(addr.value);
    if (it == pages_.end()) throw Error(ErrorCode::InvalidCommand, fmt::format("no DMA page at {:#x}", addr.value));
    return it->second;
}

const PageBytes& DmaMemory::at(PageAddress addr) const {
    auto it = pages_.find(addr.value);
    if (it == pages_.end()) throw Error(ErrorCode::InvalidCommand, fmt::format("no DMA page at {:#x}", addr.value));
    return it->second;
}

// --- command codec ---------------------------------------------------------

void validate(const NvmeCommand& cmd) {
    if (!is_known_opcode(static_cast<std::uint8_t>(cmd.opcode)))
        throw Error(ErrorCode::InvalidCommand, "unsupported opcode");
    if (!cmd.prp.aligned()) throw Error(ErrorCode::InvalidCommand, "PRP not 4 KiB aligned");
    if (cmd.length > kPageSize) throw Error(ErrorCode::InvalidCommand, "length exceeds one PRP page");
}

std::array<std::uint8_t, kCommandSize> encode_command(const NvmeCommand& cmd) {
    std::array<std::uint8_t, kCommandSize> raw{};
    raw[0] = static_cast<std::uint8_t>(cmd.opcode);
    put_le<std::uint16_t>(&raw[2], cmd.command_id);
    put_le<std::uint32_t>(&raw[4], cmd.nsid);
    put_le<std::uint64_t>(&raw[24], cmd.prp.value);
    put_le<std::uint64_t>(&raw[40], cmd.lba);
    put_le<std::uint32_t>(&raw[48], cmd.cdw12);
    put_le<std::uint32_t>(&raw[52], cmd.length);
    return raw;
}

NvmeCommand decode_command(std::span<const std::uint8_t, kCommandSize> raw) {
    if (!is_known_opcode(raw[0])) throw Error(ErrorCode::InvalidCommand, fmt::format("opcode {:#04x}", raw[0]));
    NvmeCommand cmd;
    cmd.opcode = static_cast<Opcode>(raw[0]);
    cmd.command_id = get_le<std::uint16_t>(&raw[2]);
    cmd.nsid = get_le<std::uint32_t>(&raw[4]);
    cmd.prp.value = get_le<std::uint64_t>(&raw[24]);
    cmd.lba = get_le<std::uint64_t>(&raw[40]);
    cmd.cdw12 = get_le<std::uint32_t>(&raw[48]);
    cmd.length = get_le<std::uint32_t>(&raw[52]);
    validate(cmd);
    return cmd;
}

// --- QueuePair -------------------------------------------------------------

QueuePair::QueuePair(std::uint16_t id, std::size_t depth) : id_(id), depth_(depth) {
    if (depth == 0) throw Error(ErrorCode::InvalidArgument, "queue depth must be positive");
}

CommandTicket QueuePair::push(const NvmeCommand& cmd, PcieFunction function) {
    if (outstanding_.size() >= depth_) throw Error(ErrorCode::QueueFull, fmt::format("SQ {} depth {}", id_, depth_));
    if (outstanding_.contains(cmd.command_id))
        throw Error(ErrorCode::DuplicateCommandId, fmt::format("CID {} on SQ {}", cmd.command_id, id_));
    outstanding_.emplace(cmd.command_id, Slot{cmd, function, false});
    unfetched_.push_back(cmd.command_id);
    ++sq_doorbell_;
    ++submitted_;
    return {id_, cmd.command_id};
}

NvmeCommand QueuePair::fetch() {
    if (unfetched_.empty()) throw Error(ErrorCode::Empty, fmt::format("SQ {}", id_));
    auto cid = unfetched_.front();
    unfetched_.pop_front();
    auto& slot = outstanding_.at(cid);
    slot.fetched = true;
    return slot.cmd;
}

CompletionEntry QueuePair::complete(std::uint16_t command_id, std::uint8_t status, std::uint32_t result) {
    auto it = outstanding_.find(command_id);
    if (it == outstanding_.end() || !it->second.fetched)
        throw Error(ErrorCode::UnknownCommand, fmt::format("CID {} on SQ {}", command_id, id_));
    outstanding_.erase(it);
    CompletionEntry entry{command_id, status, result};
    cq_.push_back(entry);
    ++cq_doorbell_;
    ++completed_;
    return entry;
}

PcieFunction QueuePair::submitter(std::uint16_t command_id) const {
    auto it = outstanding_.find(command_id);
    if (it == outstanding_.end()) throw Error(ErrorCode::UnknownCommand, fmt::format("CID {}", command_id));
    return it->second.function;
}

// --- namespaces ------------------------------------------------------------

bool NamespaceTable::visible(PcieFunction function, std::uint32_t nsid) const {
    auto it = std::find_if(namespaces_.begin(), namespaces_.end(), [&](const Namespace& ns) { return ns.nsid == nsid; });
    if (it == namespaces_.end()) return false;
    return function == PcieFunction::Firmware || it->kind == NamespaceKind::Sharable;
}

const Namespace& NamespaceTable::get(std::uint32_t nsid) const {
    for (const auto& ns : namespaces_)
        if (ns.nsid == nsid) return ns;
    throw Error(ErrorCode::NamespaceMissing, fmt::format("nsid {}", nsid));
}

const Namespace* NamespaceTable::find(NamespaceKind kind) const {
    for (const auto& ns : namespaces_)
        if (ns.kind == kind) return &ns;
    return nullptr;
}

std::vector<std::uint32_t> NamespaceTable::visible_nsids(PcieFunction function) const {
    std::vector<std::uint32_t> out;
    for (const auto& ns : namespaces_)
        if (visible(function, ns.nsid)) out.push_back(ns.nsid);
    return out;
}

NamespaceTable define_namespaces(std::span<const NamespaceSpec> layout) {
    NamespaceTable table;
    int privates = 0;
    int sharables = 0;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& a = layout[i];
        if (a.block_count == 0) throw Error(ErrorCode::InvalidArgument, "empty namespace");
        for (std::size_t j = 0; j < i; ++j) {
            const auto& b = layout[j];
            bool disjoint = a.first_block + a.block_count <= b.first_block || b.first_block + b.block_count <= a.first_block;
            if (!disjoint) throw Error(ErrorCode::OverlappingRanges, fmt::format("namespaces {} and {}", j + 1, i + 1));
        }
        (a.kind == NamespaceKind::Private ? privates : sharables)++;
        table.namespaces_.push_back({static_cast<std::uint32_t>(i + 1), a.kind, a.first_block, a.block_count});
    }
    if (privates != 1 || sharables != 1)
        throw Error(ErrorCode::MissingKind,
                    fmt::format("need exactly one private and one sharable namespace, got {}/{}", privates, sharables));
    return table;
}

// --- media -----------------------------------------------------------------

const PageBytes& MediaStore::read(std::uint64_t block) const {
    static const PageBytes kZero{};
    auto it = blocks_.find(block);
    return it == blocks_.end() ? kZero : it->second;
}

void MediaStore::write(std::uint64_t block, ByteView data, std::size_t offset) {
    if (offset + data.size() > kBlockSize) throw Error(ErrorCode::InvalidArgument, "write past block end");
    auto& dst = blocks_[block];
    std::copy(data.begin(), data.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
}

// --- controller ------------------------------------------------------------

NvmeController::NvmeController(NamespaceTable table, NvmeTiming timing) : table_(std::move(table)), timing_(timing) {}

std::uint16_t NvmeController::create_queue_pair(std::size_t depth) {
    auto id = static_cast<std::uint16_t>(queues_.size() + 1);
    queues_.emplace_back(id, depth);
    return id;
}

QueuePair& NvmeController::queue(std::uint16_t qid) {
    if (qid == 0 || qid > queues_.size()) throw Error(ErrorCode::InvalidArgument, fmt::format("no queue {}", qid));
    return queues_[qid - 1];
}

const QueuePair& NvmeController::queue(std::uint16_t qid) const {
    if (qid == 0 || qid > queues_.size()) throw Error(ErrorCode::InvalidArgument, fmt::format("no queue {}", qid));
    return queues_[qid - 1];
}

CommandTicket NvmeController::submit(std::uint16_t qid, const NvmeCommand& cmd, PcieFunction function) {
    validate(cmd);
    auto& qp = queue(qid);
    if (is_block_io(cmd.opcode)) {
        if (!table_.visible(function, cmd.nsid))
            throw Error(ErrorCode::NamespaceNotVisible,
                        fmt::format("nsid {} via {} function", cmd.nsid, to_string(function)));
        if (cmd.lba >= table_.get(cmd.nsid).block_count)
            throw Error(ErrorCode::LbaOutOfRange, fmt::format("lba {} in nsid {}", cmd.lba, cmd.nsid));
    } else if (cmd.nsid != 0 && !table_.visible(function, cmd.nsid)) {
        throw Error(ErrorCode::NamespaceNotVisible, fmt::format("nsid {}", cmd.nsid));
    }
    // Doorbell writes are free in simulated time.
    return qp.push(cmd, function);
}

NvmeCommand NvmeController::device_fetch(std::uint16_t qid) {
    auto cmd = queue(qid).fetch();
    now_ += timing_.fetch_ns;
    return cmd;
}

MsiEvent NvmeController::device_complete(std::uint16_t qid, std::uint16_t command_id, std::uint8_t status,
                                         std::uint32_t result) {
    queue(qid).complete(command_id, status, result);
    now_ += timing_.complete_ns;
    MsiEvent ev{qid, command_id, status, result, now_};
    msi_log_.push_back(ev);
    return ev;
}

std::uint8_t NvmeController::execute_block_io(std::uint16_t qid, const NvmeCommand& cmd) {
    if (!is_block_io(cmd.opcode)) throw Error(ErrorCode::InvalidCommand, "not a block I/O command");
    auto& qp = queue(qid);
    auto function = qp.submitter(cmd.command_id);
    const auto& ns = table_.get(cmd.nsid);
    // Re-checked at execution time; the audit must never see a breach even
    // if a command was forged past submit().
    if (!table_.visible(function, cmd.nsid) || cmd.lba >= ns.block_count) return 1;
    auto block = ns.first_block + cmd.lba;
    auto& page = dma_.at(cmd.prp);
    if (cmd.opcode == Opcode::Write) {
        media_.write(block, ByteView(page.data(), cmd.length));
        now_ += timing_.flash_write_ns;
    } else {
        const auto& src = media_.read(block);
        std::copy_n(src.begin(), cmd.length, page.begin());
        now_ += timing_.flash_read_ns;
    }
    access_log_.push_back({function, cmd.nsid, block, cmd.opcode});
    return 0;
}

std::vector<MsiEvent> NvmeController::process(std::uint16_t qid) {
    std::vector<MsiEvent> events;
    auto& qp = queue(qid);
    while (qp.unfetched() > 0) {
        auto cmd = device_fetch(qid);
        auto status = is_block_io(cmd.opcode) ? execute_block_io(qid, cmd) : std::uint8_t{0};
        events.push_back(device_complete(qid, cmd.command_id, status));
    }
    return events;
}

std::size_t audit_isolation(std::span<const AccessRecord> log, const NamespaceTable& table) {
    std::size_t violations = 0;
    for (const auto& rec : log) {
        if (rec.function != PcieFunction::Host) continue;
        for (const auto& ns : table.namespaces())
            if (ns.kind == NamespaceKind::Private && ns.contains_media_block(rec.media_block)) ++violations;
    }
    return violations;
}

// --- BlockPort -------------------------------------------------------------

BlockPort::BlockPort(NvmeController& controller, PcieFunction function)
    : controller_(controller), function_(function), qid_(controller.create_queue_pair()),
      page_(controller.dma().allocate()) {}

std::uint8_t BlockPort::run(NvmeCommand cmd) {
    cmd.command_id = next_cid_++;
    cmd.prp = page_;
    controller_.submit(qid_, cmd, function_);
    ++issued_;
    auto fetched = controller_.device_fetch(qid_);
    auto status = controller_.execute_block_io(qid_, fetched);
    controller_.device_complete(qid_, fetched.command_id, status);
    return status;
}

PageBytes BlockPort::read(std::uint32_t nsid, std::uint64_t lba) {
    NvmeCommand cmd{Opcode::Read, 0, nsid, {}, lba, static_cast<std::uint32_t>(kBlockSize), 0};
    if (run(cmd) != 0) throw Error(ErrorCode::ModuleError, "block read failed");
    return controller_.dma().at(page_);
}

void BlockPort::write(std::uint32_t nsid, std::uint64_t lba, ByteView data) {
    if (data.size() > kBlockSize) throw Error(ErrorCode::InvalidArgument, "block write larger than one block");
    auto& page = controller_.dma().at(page_);
    page.fill(0);
    std::copy(data.begin(), data.end(), page.begin());
    NvmeCommand cmd{Opcode::Write, 0, nsid, {}, lba, static_cast<std::uint32_t>(kBlockSize), 0};
    if (run(cmd) != 0) throw Error(ErrorCode::ModuleError, "block write failed");
}

}  // namespace csd::nvme
