#pragma once

// Ethernet tunneled through vendor NVMe commands: frame codec, the
// pre-armed receive pool and pool-wide address assignment.

#include <array>
#include <compare>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csd/common.hpp"
#include "csd/nvme.hpp"

namespace csd::ether {

inline constexpr std::size_t kHeaderSize = 14;
inline constexpr std::size_t kFcsSize = 4;
inline constexpr std::size_t kMaxPayload = 1500;
inline constexpr std::size_t kMinEncoded = kHeaderSize + kFcsSize;
inline constexpr std::size_t kMaxEncoded = kHeaderSize + kMaxPayload + kFcsSize;  // 1518
inline constexpr std::uint32_t kReceptionCode = 0x52584652;                     // "RFXR" little-endian
inline constexpr std::size_t kDefaultUpcallSlots = 4;

inline constexpr std::uint16_t kEtherTypeIpv4 = 0x0800;
inline constexpr std::uint16_t kEtherTypeSync = 0x88B5;

struct MacAddress {
    std::array<std::uint8_t, 6> octets{};

    std::string to_string() const;
    auto operator<=>(const MacAddress&) const = default;
};

/// Locally administered address 02:43:53:44:hi:lo for a pool node.
MacAddress mac_for_node(std::uint32_t node_id);

struct EthernetFrame {
    MacAddress dst;
    MacAddress src;
    std::uint16_t ethertype = kEtherTypeIpv4;
    Bytes payload;
    std::uint32_t fcs = 0;

    /// Builds a frame with a valid FCS.
    static EthernetFrame make(MacAddress dst, MacAddress src, std::uint16_t ethertype, Bytes payload);

    std::size_t encoded_size() const noexcept { return kHeaderSize + payload.size() + kFcsSize; }
    bool operator==(const EthernetFrame&) const = default;
};

/// CRC-32 (IEEE 802.3) over header and payload.
std::uint32_t frame_check_sequence(const EthernetFrame& frame);

/// Wire bytes: dst(6) src(6) ethertype(2, BE) payload fcs(4, LE).
Bytes serialize(const EthernetFrame& frame);
/// Parses wire bytes and verifies the FCS.
EthernetFrame parse(ByteView wire);

/// Transmit command plus the page holding the serialized frame. The FCS is
/// recomputed, so a stale `frame.fcs` is ignored.
std::pair<nvme::NvmeCommand, nvme::Page> encode_tx(const EthernetFrame& frame, nvme::PageAddress page = {});

/// Accepts transmit and completed receive commands. `length` bytes of the
/// page are parsed.
EthernetFrame decode(const nvme::NvmeCommand& cmd, const nvme::Page& page);
EthernetFrame decode(const nvme::NvmeCommand& cmd, const nvme::PageBytes& page);

enum class SlotState { Armed, Delivering };

struct UpcallSlot {
    std::uint16_t command_id = 0;
    nvme::PageAddress page;
    SlotState state = SlotState::Armed;
};

enum class Delivery { Delivered, Pending };

struct DeliveryResult {
    Delivery outcome = Delivery::Pending;
    std::optional<nvme::MsiEvent> msi;
};

/// Receive commands held by the device on one SQ. Delivery consumes the
/// oldest armed slot; with none armed the frame waits in a bounded
/// device-side buffer until the host re-arms.
class UpcallPool {
public:
    /// Submits `n` receive commands on `qid` from the host function and lets
    /// the device fetch them. Throws QueueFull when the SQ lacks room.
    static UpcallPool arm(nvme::NvmeController& controller, std::uint16_t qid, std::size_t n,
                          std::size_t pending_bound = 256);

    /// Device side. Throws FrameTooLarge, or PendingOverflow when the buffer
    /// is at its bound.
    DeliveryResult deliver(const EthernetFrame& frame);

    /// Host MSI handler: decodes every delivered slot in completion order,
    /// re-arms each one and lets pending frames flow into the fresh slots.
    /// Frames moved in by re-arming are returned by the next call.
    std::vector<EthernetFrame> service();

    /// Services until nothing is delivered or pending.
    std::vector<EthernetFrame> drain();

    std::size_t capacity() const noexcept { return slots_.size(); }
    std::size_t armed() const noexcept;
    std::size_t delivering() const noexcept { return completed_.size(); }
    std::size_t pending() const noexcept { return pending_.size(); }
    std::uint64_t delivered_total() const noexcept { return delivered_; }
    std::uint16_t queue_id() const noexcept { return qid_; }
    const std::vector<UpcallSlot>& slots() const noexcept { return slots_; }

private:
    UpcallPool(nvme::NvmeController& controller, std::uint16_t qid, std::size_t pending_bound)
        : controller_(&controller), qid_(qid), pending_bound_(pending_bound) {}

    void rearm(std::size_t slot);
    nvme::MsiEvent fill(std::size_t slot, const Bytes& wire);
    std::uint16_t fresh_cid();

    nvme::NvmeController* controller_;
    std::uint16_t qid_;
    std::size_t pending_bound_;
    std::vector<UpcallSlot> slots_;
    std::deque<std::size_t> armed_order_;
    struct Completed {
        std::size_t slot;
        std::uint32_t length;
    };
    std::deque<Completed> completed_;
    std::deque<Bytes> pending_;
    std::uint16_t next_cid_ = 0x8000;
    std::uint64_t delivered_ = 0;
};

struct DriverConfig {
    std::size_t upcall_slots = kDefaultUpcallSlots;
    std::size_t pending_bound = 256;
    std::size_t queue_depth = nvme::kDefaultQueueDepth;
    /// Transmit on this existing SQ instead of a dedicated one.
    std::optional<std::uint16_t> shared_tx_queue;
};

/// Host driver plus device endpoint for one storage node. Transmit commands go
/// on their own SQ, receive commands on another.
class EtherOnLink {
public:
    EtherOnLink(nvme::NvmeController& controller, DriverConfig config = {});

    /// Host side: copies the frame into a DMA page and submits 0xE0.
    nvme::CommandTicket transmit(const EthernetFrame& frame);
    /// Device side: fetches transmit commands, decodes and completes them.
    /// Block I/O commands found on a shared SQ are executed in order.
    std::vector<EthernetFrame> device_poll();

    /// Device to host.
    DeliveryResult device_send(const EthernetFrame& frame) { return upcalls_.deliver(frame); }
    std::vector<EthernetFrame> host_service() { return upcalls_.service(); }

    UpcallPool& upcalls() noexcept { return upcalls_; }
    const UpcallPool& upcalls() const noexcept { return upcalls_; }
    std::uint16_t tx_queue() const noexcept { return tx_qid_; }
    std::uint16_t rx_queue() const noexcept { return rx_qid_; }
    std::uint64_t frames_transmitted() const noexcept { return transmitted_; }

private:
    nvme::NvmeController& controller_;
    std::uint16_t tx_qid_;
    std::uint16_t rx_qid_;
    UpcallPool upcalls_;
    std::map<std::uint16_t, nvme::PageAddress> tx_pages_;
    std::uint16_t next_cid_ = 0x4000;
    std::uint64_t transmitted_ = 0;
};

// --- addressing ------------------------------------------------------------

struct Ipv4Address {
    std::uint32_t value = 0;

    static Ipv4Address parse(std::string_view text);
    std::string to_string() const;
    auto operator<=>(const Ipv4Address&) const = default;
};

struct Subnet {
    Ipv4Address network;
    int prefix = 24;

    static Subnet parse(std::string_view cidr);
    /// Addresses excluding the network and broadcast address.
    std::uint64_t usable_hosts() const noexcept;
};

enum class NodeRole { Host, Storage };

struct Endpoint {
    std::uint32_t node_id = 0;
    Ipv4Address ip;
    MacAddress mac;
    NodeRole role = NodeRole::Host;
};

/// Element 0 is the host at the first usable address; storage nodes follow in
/// node order. Throws SubnetExhausted.
std::vector<Endpoint> assign_ips(std::size_t storage_nodes, const Subnet& subnet);

/// Static IP to MAC table for a fully known pool.
class ArpTable {
public:
    explicit ArpTable(const std::vector<Endpoint>& endpoints);
    std::optional<MacAddress> resolve(Ipv4Address ip) const;
    std::size_t size() const noexcept { return entries_.size(); }

private:
    std::map<Ipv4Address, MacAddress> entries_;
};

// --- IPv4 / TCP ------------------------------------------------------------

inline constexpr std::size_t kTcpMss = 1460;

struct TcpSegment {
    Ipv4Address src_ip;
    Ipv4Address dst_ip;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint32_t seq = 0;
    std::uint32_t ack = 0;
    std::uint8_t flags = 0;
    Bytes data;

    bool operator==(const TcpSegment&) const = default;
};

namespace tcp_flag {
inline constexpr std::uint8_t Fin = 0x01;
inline constexpr std::uint8_t Syn = 0x02;
inline constexpr std::uint8_t Rst = 0x04;
inline constexpr std::uint8_t Psh = 0x08;
inline constexpr std::uint8_t Ack = 0x10;
}  // namespace tcp_flag

/// 20-byte IPv4 header plus 20-byte TCP header, no options. The IPv4 header
/// checksum is filled in; the TCP checksum is left zero (the frame FCS
/// covers integrity).
Bytes encode_ipv4_tcp(const TcpSegment& seg);
TcpSegment decode_ipv4_tcp(ByteView packet);

/// Splits a byte stream into MSS-sized segments with advancing sequence
/// numbers.
std::vector<TcpSegment> segment_stream(const TcpSegment& header, ByteView stream, std::size_t mss = kTcpMss);

}  // namespace csd::ether
