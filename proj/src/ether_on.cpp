#include "csd/ether_on.hpp"

#include <algorithm>
#include <charconv>

#include <fmt/format.h>
#include <zlib.h>

namespace csd::ether {

namespace {

void put_be16(Bytes& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_be32(Bytes& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::uint16_t get_be16(const std::uint8_t* p) { return static_cast<std::uint16_t>((p[0] << 8) | p[1]); }

std::uint32_t get_be32(const std::uint8_t* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::uint32_t crc(ByteView data) {
    auto c = ::crc32(0L, Z_NULL, 0);
    return static_cast<std::uint32_t>(::crc32(c, data.data(), static_cast<uInt>(data.size())));
}

Bytes header_and_payload(const EthernetFrame& f) {
    Bytes out;
    out.reserve(f.encoded_size());
    out.insert(out.end(), f.dst.octets.begin(), f.dst.octets.end());
    out.insert(out.end(), f.src.octets.begin(), f.src.octets.end());
    put_be16(out, f.ethertype);
    out.insert(out.end(), f.payload.begin(), f.payload.end());
    return out;
}

std::uint16_t ipv4_checksum(ByteView header) {
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i + 1 < header.size(); i += 2) sum += get_be16(&header[i]);
    while (sum >> 16) sum = (sum & 0xFFFF) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

}  // namespace

std::string MacAddress::to_string() const {
    return fmt::format("{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", octets[0], octets[1], octets[2], octets[3],
                       octets[4], octets[5]);
}

MacAddress mac_for_node(std::uint32_t node_id) {
    return {{0x02, 0x43, 0x53, 0x44, static_cast<std::uint8_t>(node_id >> 8), static_cast<std::uint8_t>(node_id)}};
}

EthernetFrame EthernetFrame::make(MacAddress dst, MacAddress src, std::uint16_t ethertype, Bytes payload) {
    EthernetFrame f{dst, src, ethertype, std::move(payload), 0};
    f.fcs = frame_check_sequence(f);
    return f;
}

std::uint32_t frame_check_sequence(const EthernetFrame& frame) { return crc(header_and_payload(frame)); }

Bytes serialize(const EthernetFrame& frame) {
    if (frame.payload.size() > kMaxPayload)
        throw Error(ErrorCode::FrameTooLarge, fmt::format("{} byte payload", frame.payload.size()));
    auto out = header_and_payload(frame);
    auto fcs = crc(out);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(fcs >> (8 * i)));
    return out;
}

EthernetFrame parse(ByteView wire) {
    if (wire.size() < kMinEncoded || wire.size() > kMaxEncoded)
        throw Error(ErrorCode::MalformedFrame, fmt::format("{} byte frame", wire.size()));
    EthernetFrame f;
    std::copy_n(wire.begin(), 6, f.dst.octets.begin());
    std::copy_n(wire.begin() + 6, 6, f.src.octets.begin());
    f.ethertype = get_be16(&wire[12]);
    auto body_end = wire.size() - kFcsSize;
    f.payload.assign(wire.begin() + kHeaderSize, wire.begin() + static_cast<std::ptrdiff_t>(body_end));
    f.fcs = 0;
    for (int i = 0; i < 4; ++i) f.fcs |= std::uint32_t{wire[body_end + i]} << (8 * i);
    if (crc(wire.first(body_end)) != f.fcs) throw Error(ErrorCode::BadChecksum, "frame check sequence mismatch");
    return f;
}

std::pair<nvme::NvmeCommand, nvme::Page> encode_tx(const EthernetFrame& frame, nvme::PageAddress page) {
    auto wire = serialize(frame);
    nvme::Page out{page, {}};
    std::copy(wire.begin(), wire.end(), out.bytes.begin());
    nvme::NvmeCommand cmd{nvme::Opcode::TransmitFrame, 0, 0, page, 0, static_cast<std::uint32_t>(wire.size()), 0};
    return {cmd, out};
}

EthernetFrame decode(const nvme::NvmeCommand& cmd, const nvme::PageBytes& page) {
    if (cmd.opcode != nvme::Opcode::TransmitFrame && cmd.opcode != nvme::Opcode::ReceiveFrame)
        throw Error(ErrorCode::WrongOpcode, fmt::format("opcode {:#04x}", static_cast<int>(cmd.opcode)));
    if (cmd.length < kMinEncoded || cmd.length > kMaxEncoded)
        throw Error(ErrorCode::MalformedFrame, fmt::format("length {}", cmd.length));
    return parse(ByteView(page.data(), cmd.length));
}

EthernetFrame decode(const nvme::NvmeCommand& cmd, const nvme::Page& page) { return decode(cmd, page.bytes); }

// --- UpcallPool ------------------------------------------------------------

UpcallPool UpcallPool::arm(nvme::NvmeController& controller, std::uint16_t qid, std::size_t n,
                           std::size_t pending_bound) {
    auto& qp = controller.queue(qid);
    if (qp.free_entries() < n)
        throw Error(ErrorCode::QueueFull, fmt::format("{} upcalls, {} free entries", n, qp.free_entries()));
    UpcallPool pool(controller, qid, pending_bound);
    for (std::size_t i = 0; i < n; ++i) {
        pool.slots_.push_back({0, controller.dma().allocate(), SlotState::Armed});
        pool.rearm(i);
    }
    return pool;
}

std::uint16_t UpcallPool::fresh_cid() {
    auto& qp = controller_->queue(qid_);
    while (qp.is_outstanding(next_cid_)) ++next_cid_;
    return next_cid_++;
}

void UpcallPool::rearm(std::size_t slot) {
    auto& s = slots_[slot];
    s.command_id = fresh_cid();
    nvme::NvmeCommand cmd{nvme::Opcode::ReceiveFrame, s.command_id, 0, s.page, 0,
                          static_cast<std::uint32_t>(nvme::kPageSize), kReceptionCode};
    controller_->submit(qid_, cmd, nvme::PcieFunction::Host);
    // The device holds receive commands as soon as they appear.
    auto held = controller_->device_fetch(qid_);
    if (held.command_id != s.command_id) throw Error(ErrorCode::InvalidCommand, "receive SQ carries foreign commands");
    s.state = SlotState::Armed;
    armed_order_.push_back(slot);
    if (!pending_.empty()) {
        auto wire = std::move(pending_.front());
        pending_.pop_front();
        armed_order_.pop_front();
        fill(slot, wire);
    }
}

nvme::MsiEvent UpcallPool::fill(std::size_t slot, const Bytes& wire) {
    auto& s = slots_[slot];
    auto& page = controller_->dma().at(s.page);
    std::copy(wire.begin(), wire.end(), page.begin());
    s.state = SlotState::Delivering;
    completed_.push_back({slot, static_cast<std::uint32_t>(wire.size())});
    ++delivered_;
    return controller_->device_complete(qid_, s.command_id, 0, static_cast<std::uint32_t>(wire.size()));
}

DeliveryResult UpcallPool::deliver(const EthernetFrame& frame) {
    auto wire = serialize(frame);
    if (armed_order_.empty() || !pending_.empty()) {
        if (pending_.size() >= pending_bound_)
            throw Error(ErrorCode::PendingOverflow, fmt::format("{} frames waiting", pending_.size()));
        pending_.push_back(std::move(wire));
        return {Delivery::Pending, std::nullopt};
    }
    auto slot = armed_order_.front();
    armed_order_.pop_front();
    return {Delivery::Delivered, fill(slot, wire)};
}

std::vector<EthernetFrame> UpcallPool::service() {
    std::vector<EthernetFrame> out;
    auto ready = completed_.size();
    for (std::size_t i = 0; i < ready; ++i) {
        auto done = completed_.front();
        completed_.pop_front();
        const auto& s = slots_[done.slot];
        nvme::NvmeCommand cmd{nvme::Opcode::ReceiveFrame, s.command_id, 0, s.page, 0, done.length, kReceptionCode};
        out.push_back(decode(cmd, controller_->dma().at(s.page)));
        rearm(done.slot);
    }
    return out;
}

std::vector<EthernetFrame> UpcallPool::drain() {
    std::vector<EthernetFrame> out;
    while (!completed_.empty()) {
        auto got = service();
        out.insert(out.end(), got.begin(), got.end());
    }
    return out;
}

std::size_t UpcallPool::armed() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(slots_.begin(), slots_.end(), [](const UpcallSlot& s) { return s.state == SlotState::Armed; }));
}

// --- EtherOnLink -----------------------------------------------------------

EtherOnLink::EtherOnLink(nvme::NvmeController& controller, DriverConfig config)
    : controller_(controller),
      tx_qid_(config.shared_tx_queue ? *config.shared_tx_queue : controller.create_queue_pair(config.queue_depth)),
      rx_qid_(controller.create_queue_pair(config.queue_depth)),
      upcalls_(UpcallPool::arm(controller, rx_qid_, config.upcall_slots, config.pending_bound)) {}

nvme::CommandTicket EtherOnLink::transmit(const EthernetFrame& frame) {
    auto& qp = controller_.queue(tx_qid_);
    while (qp.is_outstanding(next_cid_)) ++next_cid_;
    auto page = controller_.dma().allocate();
    auto [cmd, filled] = encode_tx(frame, page);
    cmd.command_id = next_cid_++;
    controller_.dma().at(page) = filled.bytes;
    auto ticket = controller_.submit(tx_qid_, cmd, nvme::PcieFunction::Host);
    tx_pages_[cmd.command_id] = page;
    ++transmitted_;
    return ticket;
}

std::vector<EthernetFrame> EtherOnLink::device_poll() {
    std::vector<EthernetFrame> out;
    auto& qp = controller_.queue(tx_qid_);
    while (qp.unfetched() > 0) {
        auto cmd = controller_.device_fetch(tx_qid_);
        if (cmd.opcode == nvme::Opcode::TransmitFrame) {
            out.push_back(decode(cmd, controller_.dma().at(cmd.prp)));
            controller_.device_complete(tx_qid_, cmd.command_id, 0);
            if (auto it = tx_pages_.find(cmd.command_id); it != tx_pages_.end()) {
                controller_.dma().release(it->second);
                tx_pages_.erase(it);
            }
        } else if (nvme::is_block_io(cmd.opcode)) {
            auto status = controller_.execute_block_io(tx_qid_, cmd);
            controller_.device_complete(tx_qid_, cmd.command_id, status);
        } else {
            controller_.device_complete(tx_qid_, cmd.command_id, 1);
        }
    }
    return out;
}

// --- addressing ------------------------------------------------------------

Ipv4Address Ipv4Address::parse(std::string_view text) {
    std::uint32_t value = 0;
    const char* p = text.data();
    const char* end = text.data() + text.size();
    for (int i = 0; i < 4; ++i) {
        unsigned octet = 0;
        auto [next, ec] = std::from_chars(p, end, octet);
        if (ec != std::errc{} || octet > 255) throw Error(ErrorCode::InvalidArgument, fmt::format("bad IPv4 '{}'", text));
        value = (value << 8) | octet;
        p = next;
        if (i < 3) {
            if (p == end || *p != '.') throw Error(ErrorCode::InvalidArgument, fmt::format("bad IPv4 '{}'", text));
            ++p;
        }
    }
    if (p != end) throw Error(ErrorCode::InvalidArgument, fmt::format("bad IPv4 '{}'", text));
    return {value};
}

std::string Ipv4Address::to_string() const {
    return fmt::format("{}.{}.{}.{}", value >> 24, (value >> 16) & 0xFF, (value >> 8) & 0xFF, value & 0xFF);
}

Subnet Subnet::parse(std::string_view cidr) {
    auto slash = cidr.find('/');
    if (slash == std::string_view::npos) throw Error(ErrorCode::InvalidArgument, fmt::format("bad subnet '{}'", cidr));
    int prefix = 0;
    auto tail = cidr.substr(slash + 1);
    auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), prefix);
    if (ec != std::errc{} || ptr != tail.data() + tail.size() || prefix < 0 || prefix > 32)
        throw Error(ErrorCode::InvalidArgument, fmt::format("bad prefix in '{}'", cidr));
    auto net = Ipv4Address::parse(cidr.substr(0, slash));
    std::uint32_t mask = prefix == 0 ? 0 : ~std::uint32_t{0} << (32 - prefix);
    return {{net.value & mask}, prefix};
}

std::uint64_t Subnet::usable_hosts() const noexcept {
    std::uint64_t total = std::uint64_t{1} << (32 - prefix);
    return total > 2 ? total - 2 : 0;
}

std::vector<Endpoint> assign_ips(std::size_t storage_nodes, const Subnet& subnet) {
    if (storage_nodes == 0) throw Error(ErrorCode::InvalidArgument, "pool needs at least one storage node");
    if (storage_nodes + 1 > subnet.usable_hosts())
        throw Error(ErrorCode::SubnetExhausted, fmt::format("{} nodes plus host in a /{} ({} usable)", storage_nodes,
                                                            subnet.prefix, subnet.usable_hosts()));
    std::vector<Endpoint> out;
    out.reserve(storage_nodes + 1);
    for (std::uint32_t id = 0; id <= storage_nodes; ++id)
        out.push_back({id, {subnet.network.value + 1 + id}, mac_for_node(id), id == 0 ? NodeRole::Host : NodeRole::Storage});
    return out;
}

ArpTable::ArpTable(const std::vector<Endpoint>& endpoints) {
    for (const auto& ep : endpoints) entries_.emplace(ep.ip, ep.mac);
}

std::optional<MacAddress> ArpTable::resolve(Ipv4Address ip) const {
    auto it = entries_.find(ip);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

// --- IPv4 / TCP ------------------------------------------------------------

Bytes encode_ipv4_tcp(const TcpSegment& seg) {
    if (seg.data.size() > kTcpMss) throw Error(ErrorCode::FrameTooLarge, fmt::format("{} byte segment", seg.data.size()));
    Bytes out;
    auto total = static_cast<std::uint16_t>(40 + seg.data.size());
    out.push_back(0x45);
    out.push_back(0);
    put_be16(out, total);
    put_be16(out, 0);
    put_be16(out, 0x4000);
    out.push_back(64);
    out.push_back(6);
    put_be16(out, 0);
    put_be32(out, seg.src_ip.value);
    put_be32(out, seg.dst_ip.value);
    auto sum = ipv4_checksum(ByteView(out.data(), 20));
    out[10] = static_cast<std::uint8_t>(sum >> 8);
    out[11] = static_cast<std::uint8_t>(sum);

    put_be16(out, seg.src_port);
    put_be16(out, seg.dst_port);
    put_be32(out, seg.seq);
    put_be32(out, seg.ack);
    out.push_back(5 << 4);
    out.push_back(seg.flags);
    put_be16(out, 0xFFFF);
    put_be16(out, 0);
    put_be16(out, 0);
    out.insert(out.end(), seg.data.begin(), seg.data.end());
    return out;
}

TcpSegment decode_ipv4_tcp(ByteView packet) {
    if (packet.size() < 40 || packet[0] != 0x45 || packet[9] != 6)
        throw Error(ErrorCode::MalformedFrame, "not an option-free IPv4/TCP packet");
    auto total = get_be16(&packet[2]);
    if (total < 40 || total > packet.size()) throw Error(ErrorCode::MalformedFrame, "bad IPv4 total length");
    if (ipv4_checksum(packet.first(20)) != 0) throw Error(ErrorCode::BadChecksum, "IPv4 header checksum");
    TcpSegment seg;
    seg.src_ip = {get_be32(&packet[12])};
    seg.dst_ip = {get_be32(&packet[16])};
    const auto* t = &packet[20];
    seg.src_port = get_be16(t);
    seg.dst_port = get_be16(t + 2);
    seg.seq = get_be32(t + 4);
    seg.ack = get_be32(t + 8);
    if ((t[12] >> 4) != 5) throw Error(ErrorCode::MalformedFrame, "TCP options unsupported");
    seg.flags = t[13];
    seg.data.assign(packet.begin() + 40, packet.begin() + total);
    return seg;
}

std::vector<TcpSegment> segment_stream(const TcpSegment& header, ByteView stream, std::size_t mss) {
    if (mss == 0 || mss > kTcpMss) throw Error(ErrorCode::InvalidArgument, "bad MSS");
    std::vector<TcpSegment> out;
    std::size_t offset = 0;
    do {
        auto n = std::min(mss, stream.size() - offset);
        auto seg = header;
        seg.seq = header.seq + static_cast<std::uint32_t>(offset);
        seg.data.assign(stream.begin() + static_cast<std::ptrdiff_t>(offset),
                        stream.begin() + static_cast<std::ptrdiff_t>(offset + n));
        out.push_back(std::move(seg));
        offset += n;
    } while (offset < stream.size());
    return out;
}

}  // namespace csd::ether
