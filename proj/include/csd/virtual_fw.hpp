#pragma once

// Firmware execution model: syscall emulation through three handlers,
// privileged/user memory pools, cached path walking, a TCP state machine
// and a round-robin scheduler over the device cores.

#include <cstdint>
#include <deque>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "csd/common.hpp"
#include "csd/ether_on.hpp"
#include "csd/lambda_fs.hpp"

namespace csd::vfw {

// --- syscall catalog -------------------------------------------------------

enum class HandlerKind { Thread, Io, Network };
std::string_view to_string(HandlerKind h) noexcept;

struct SyscallEntry {
    std::string name;
    HandlerKind handler = HandlerKind::Thread;
    std::string category;
    SimTime cost_ns = 0;
    SimTime fullos_ns = 0;
    std::string alias_of;  // collapsed onto this call when non-empty
};

class SyscallTable {
public:
    /// CSV with header `name,handler,category,cost_ns,fullos_ns,alias_of`.
    static SyscallTable parse_csv(std::string_view text);
    /// The catalog shipped in data/syscalls.csv.
    static const SyscallTable& builtin();

    const SyscallEntry* find(std::string_view name) const;
    /// Follows an alias to the call that actually runs.
    const SyscallEntry* canonical(std::string_view name) const;
    bool executable(std::string_view name) const;
    std::size_t count(HandlerKind h) const;
    std::size_t executable_count(HandlerKind h) const;
    const std::vector<SyscallEntry>& entries() const noexcept { return entries_; }

    /// Calls with a handler implementation.
    static const std::vector<std::string>& implemented();

private:
    std::vector<SyscallEntry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

// --- memory pools ----------------------------------------------------------

enum class Mode { Privileged, User };
enum class PoolKind { Fw, Isp };

inline constexpr std::uint64_t kFwPoolBase = 0x8000'0000;
inline constexpr std::uint64_t kIspPoolBase = 0x9000'0000;

/// Page-granular DRAM partitions. The FW pool holds handler state and is
/// reachable only in privileged mode; a user-mode touch faults.
class MemoryPools {
public:
    MemoryPools(std::size_t fw_pages = 256, std::size_t isp_pages = 4096);

    Mode mode() const noexcept { return mode_; }
    void set_mode(Mode m) noexcept { mode_ = m; }

    /// Page-aligned allocation; throws StorageFull when the pool is spent.
    std::uint64_t allocate(PoolKind pool, std::size_t bytes);
    void write(std::uint64_t addr, ByteView data);
    Bytes read(std::uint64_t addr, std::size_t len);
    PoolKind pool_of(std::uint64_t addr) const;

    std::uint64_t faults() const noexcept { return faults_; }
    std::uint64_t user_fw_successes() const noexcept { return user_fw_successes_; }
    std::uint64_t copies() const noexcept { return copies_; }
    std::size_t used_pages(PoolKind pool) const noexcept;

private:
    void check(std::uint64_t addr, std::size_t len);

    std::size_t fw_pages_;
    std::size_t isp_pages_;
    std::size_t fw_next_ = 0;
    std::size_t isp_next_ = 0;
    std::unordered_map<std::uint64_t, std::uint8_t> bytes_;
    Mode mode_ = Mode::User;
    std::uint64_t faults_ = 0;
    std::uint64_t user_fw_successes_ = 0;
    std::uint64_t copies_ = 0;
};

// --- I/O node cache --------------------------------------------------------

struct WalkResult {
    fs::Ino ino = 0;
    std::size_t lookups = 0;  // directory entries searched
    bool cache_hit = false;
};

/// LRU map from absolute path to inode. Only successful walks are cached;
/// unlinks invalidate the path and everything below it.
class IoNodeCache {
public:
    explicit IoNodeCache(std::size_t capacity = 1024) : capacity_(capacity) {}

    std::optional<fs::Ino> get(const std::string& path);
    void put(const std::string& path, fs::Ino ino);
    void invalidate_prefix(const std::string& path);
    void clear();

    std::size_t size() const noexcept { return map_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    std::uint64_t hits() const noexcept { return hits_; }
    std::uint64_t misses() const noexcept { return misses_; }

private:
    using Order = std::list<std::string>;
    std::size_t capacity_;
    Order order_;  // front = most recent
    std::unordered_map<std::string, std::pair<fs::Ino, Order::iterator>> map_;
    std::uint64_t hits_ = 0;
    std::uint64_t misses_ = 0;
};

/// Resolves `path` component by component, starting from the longest
/// cached prefix, and caches every prefix it resolves.
WalkResult path_walk(fs::LambdaFs& fs, IoNodeCache& cache, std::string_view path);

// --- TCP -------------------------------------------------------------------

enum class TcpState {
    Closed,
    Listen,
    SynSent,
    SynRcvd,
    Established,
    FinWait1,
    FinWait2,
    CloseWait,
    LastAck,
    TimeWait,
};

enum class TcpEvent { PassiveOpen, ActiveOpen, Syn, SynAck, Ack, Fin, Timeout, Close };

std::string_view to_string(TcpState s) noexcept;
std::string_view to_string(TcpEvent e) noexcept;
inline constexpr std::size_t kTcpStateCount = 10;
inline constexpr std::size_t kTcpEventCount = 8;

/// Next state; throws IllegalTransition for pairs outside the edge set.
TcpState tcp_step(TcpState state, TcpEvent event);
std::optional<TcpState> tcp_next(TcpState state, TcpEvent event) noexcept;

struct TcpConnection {
    TcpState state = TcpState::Closed;
    std::uint32_t snd_nxt = 0;
    std::uint32_t rcv_nxt = 0;

    /// Applies an event; SYN and FIN consume one sequence number on the
    /// side that sends or receives them.
    void step(TcpEvent event);
};

// --- scheduler -------------------------------------------------------------

enum class ThreadState { Running, Runnable, Exited };

struct ThreadRecord {
    std::uint32_t tid = 0;
    std::string owner;
    std::string entry;
    ThreadState state = ThreadState::Runnable;
    std::uint64_t record_addr = 0;  // in the ISP pool
    SimTime cpu_ns = 0;
};

/// Round-robin over a fixed core count. Threads beyond the cores queue.
class Scheduler {
public:
    explicit Scheduler(std::size_t cores = 6, SimTime quantum_ns = 1'000'000);

    void admit(ThreadRecord& record);
    void exit(std::uint32_t tid);
    /// One quantum: running threads accrue CPU time, then rotate to the back.
    void tick();

    std::vector<std::uint32_t> running() const;
    std::vector<std::uint32_t> queued() const { return {queue_.begin(), queue_.end()}; }
    std::size_t cores() const noexcept { return cores_; }
    SimTime quantum() const noexcept { return quantum_; }
    SimTime now() const noexcept { return now_; }
    const ThreadRecord* thread(std::uint32_t tid) const;

private:
    void fill();

    std::size_t cores_;
    SimTime quantum_;
    SimTime now_ = 0;
    std::vector<std::optional<std::uint32_t>> slots_;
    std::deque<std::uint32_t> queue_;
    std::map<std::uint32_t, ThreadRecord*> threads_;
};

// --- syscall emulation -----------------------------------------------------

/// Storage the I/O handler works against. Paths are absolute.
class FileBackend {
public:
    virtual ~FileBackend() = default;
    virtual bool exists(const std::string& path) = 0;
    virtual bool is_directory(const std::string& path) = 0;
    virtual Bytes read(const std::string& path) = 0;
    virtual void write(const std::string& path, ByteView data) = 0;
    virtual void mkdir(const std::string& path) = 0;
    virtual void symlink(const std::string& target, const std::string& link) = 0;
    virtual void unlink(const std::string& path) = 0;
    /// Directory entries searched to resolve the path; used for costing.
    virtual WalkResult walk(const std::string& path) = 0;
};

/// Backend over the filesystem through the firmware function, walking
/// paths through an I/O node cache.
class LambdaFsBackend : public FileBackend {
public:
    LambdaFsBackend(fs::LambdaFs& fs, IoNodeCache& cache) : fs_(fs), cache_(cache) {}

    bool exists(const std::string& path) override;
    bool is_directory(const std::string& path) override;
    Bytes read(const std::string& path) override;
    void write(const std::string& path, ByteView data) override;
    void mkdir(const std::string& path) override;
    void symlink(const std::string& target, const std::string& link) override;
    void unlink(const std::string& path) override;
    WalkResult walk(const std::string& path) override;

private:
    fs::LambdaFs& fs_;
    IoNodeCache& cache_;
};

struct SyscallInvocation {
    std::string name;
    std::vector<std::int64_t> args;
    std::string path;
    std::string path2;
    Bytes data;
    /// User buffer receiving output. Defaults to a fresh ISP-pool page.
    std::optional<std::uint64_t> buffer;
    std::uint32_t tid = 0;
};

struct SyscallResult {
    std::int64_t value = 0;
    Bytes data;
    SimTime cost_ns = 0;
    HandlerKind handler = HandlerKind::Thread;
    std::string dispatched;  // name after alias collapse
};

enum class ExecutionMode { Emulated, FullOs };

struct CostConfig {
    SimTime context_switch_ns = 5000;
    SimTime walk_lookup_ns = 700;
    SimTime walk_hit_ns = 300;
    ExecutionMode mode = ExecutionMode::Emulated;
};

struct FwStats {
    std::uint64_t syscalls = 0;
    std::map<HandlerKind, std::uint64_t> per_handler;
    std::uint64_t walks = 0;
    std::uint64_t walk_lookups = 0;
    std::uint64_t walk_hits = 0;
    std::uint64_t context_switches = 0;
    std::uint64_t tcp_segments = 0;
    std::uint64_t bytes_read = 0;
    std::uint64_t bytes_written = 0;
    SimTime system_ns = 0;  // syscall plus walk cost
    SimTime walk_ns = 0;
};

// Negative errno values returned in SyscallResult::value.
inline constexpr std::int64_t kENOENT = -2;
inline constexpr std::int64_t kEAGAIN = -11;
inline constexpr std::int64_t kEEXIST = -17;
inline constexpr std::int64_t kEISDIR = -21;
inline constexpr std::int64_t kEINVAL = -22;
inline constexpr std::int64_t kENOTCONN = -107;

inline constexpr std::int64_t kOpenCreate = 0x40;
inline constexpr std::int64_t kOpenTruncate = 0x200;
inline constexpr std::int64_t kSeekSet = 0;
inline constexpr std::int64_t kSeekCur = 1;
inline constexpr std::int64_t kSeekEnd = 2;

using SegmentSink = std::function<void(const ether::TcpSegment&)>;

class VirtualFw {
public:
    VirtualFw(FileBackend& files, CostConfig costs = {}, const SyscallTable& table = SyscallTable::builtin());

    /// Runs one call through its handler. Throws UnimplementedSyscall,
    /// Fault, BadFileDescriptor; filesystem errors surface as negative
    /// errno values.
    SyscallResult emulate(const SyscallInvocation& call);

    /// Creates a container thread and admits it to the scheduler. Throws
    /// NoEntryScript when `entry` is missing or empty.
    ThreadRecord& spawn_container_thread(const std::string& owner, const std::optional<std::string>& entry);

    /// Queues bytes for a later recvfrom on `fd`.
    void deliver_to_socket(int fd, ByteView data);
    void set_segment_sink(SegmentSink sink) { segment_sink_ = std::move(sink); }
    void set_backend(FileBackend& files) { files_ = &files; }
    FileBackend& backend() noexcept { return *files_; }

    MemoryPools& pools() noexcept { return pools_; }
    Scheduler& scheduler() noexcept { return scheduler_; }
    const FwStats& stats() const noexcept { return stats_; }
    const SyscallTable& table() const noexcept { return table_; }
    const CostConfig& costs() const noexcept { return costs_; }
    const TcpConnection* connection(int fd) const;
    const ThreadRecord* thread(std::uint32_t tid) const;
    std::size_t open_files() const noexcept { return files_open_.size(); }

private:
    struct OpenFile {
        std::string path;
        std::uint64_t offset = 0;
    };
    struct Socket {
        TcpConnection tcp;
        std::uint16_t port = 0;
        std::deque<Bytes> inbox;
        std::deque<int> backlog;
        ether::TcpSegment header;
    };

    std::int64_t thread_call(const std::string& name, const SyscallInvocation& call, Bytes& out);
    std::int64_t io_call(const std::string& name, const SyscallInvocation& call, Bytes& out, SimTime& extra);
    std::int64_t network_call(const std::string& name, const SyscallInvocation& call, Bytes& out);
    SimTime charge_walk(const std::string& path);
    int new_fd();
    OpenFile& file(std::int64_t fd);
    Socket& socket(std::int64_t fd);

    FileBackend* files_;
    CostConfig costs_;
    const SyscallTable& table_;
    MemoryPools pools_;
    Scheduler scheduler_;
    std::map<std::uint32_t, std::unique_ptr<ThreadRecord>> threads_;
    std::uint32_t next_tid_ = 1;
    std::map<int, OpenFile> files_open_;
    std::map<int, Socket> sockets_;
    std::map<int, std::vector<int>> epolls_;
    std::map<int, std::deque<Bytes>> pipes_;
    std::map<std::string, std::pair<std::int64_t, std::int64_t>> modes_;  // path -> (mode, owner)
    int next_fd_ = 3;
    std::uint64_t heap_break_ = 0;
    FwStats stats_;
    SegmentSink segment_sink_;
};

}  // namespace csd::vfw
