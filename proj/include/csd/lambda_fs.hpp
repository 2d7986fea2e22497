#pragma once

// In-storage filesystem spanning the private and sharable namespaces, with
// the host/container inode lock protocol and a model of the host VFS cache.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "csd/common.hpp"
#include "csd/ether_on.hpp"
#include "csd/nvme.hpp"

namespace csd::fs {

using Ino = std::uint64_t;
inline constexpr Ino kRootIno = 1;

enum class InodeKind { File, Directory, Symlink };

struct Inode {
    Ino ino = 0;
    std::string name;
    InodeKind kind = InodeKind::File;
    nvme::NamespaceKind ns = nvme::NamespaceKind::Sharable;
    Ino parent = 0;
    std::uint64_t size = 0;
    std::vector<std::uint64_t> blocks;  // namespace-relative LBAs
    std::map<std::string, Ino> children;
    std::string target;  // symlinks only
};

enum class OpenStatus { Granted, Blocked };

struct OpenOutcome {
    OpenStatus status = OpenStatus::Granted;
    /// Handle id; a blocked open keeps its id and becomes live on grant.
    std::uint64_t handle = 0;
};

struct Handle {
    std::uint64_t id = 0;
    Side side = Side::Host;
    Ino file = 0;
    Ino dir = 0;
};

/// Per-inode reference counts. An open takes the file and its immediate
/// parent directory and is granted only when the opposing side holds
/// neither. Blocked opens wait in FIFO order.
class InodeLockTable {
public:
    struct Lock {
        std::uint32_t refcount = 0;
        std::optional<Side> holder;
    };

    OpenOutcome open(Side side, Ino file, Ino dir);
    /// Releases a live handle and returns the waiters granted as a result,
    /// in grant order. Throws DoubleClose for ids that are not live.
    std::vector<Handle> close(std::uint64_t handle);

    /// Withdraws a queued open. Returns false if `handle` is not waiting.
    bool cancel(std::uint64_t handle);

    bool grantable(Side side, Ino file, Ino dir) const;
    std::uint32_t refcount(Ino ino) const;
    std::uint32_t refcount(Ino ino, Side side) const;
    std::optional<Side> holder(Ino ino) const;

    const Handle* live(std::uint64_t handle) const;
    bool waiting(std::uint64_t handle) const;
    std::size_t live_count() const noexcept { return live_.size(); }
    std::size_t waiting_count() const noexcept { return waiters_.size(); }
    const std::map<std::uint64_t, Handle>& live_handles() const noexcept { return live_; }
    const std::map<Ino, Lock>& locks() const noexcept { return locks_; }

    /// Crash: nothing survives.
    void clear();

private:
    void acquire(const Handle& h);
    void release(Ino ino);

    std::map<Ino, Lock> locks_;
    std::map<std::uint64_t, Handle> live_;
    std::deque<Handle> waiters_;
    std::uint64_t next_id_ = 1;
};

/// Host-side inode metadata cache. Entries go stale when the container is
/// granted the inode.
class VfsCache {
public:
    struct Entry {
        std::uint64_t size = 0;
        bool valid = false;
    };

    std::optional<std::uint64_t> lookup(Ino ino) const;
    void fill(Ino ino, std::uint64_t size);
    void invalidate(Ino ino);
    void invalidate_all();
    bool valid(Ino ino) const;
    std::uint64_t invalidations() const noexcept { return invalidations_; }

private:
    std::map<Ino, Entry> entries_;
    std::uint64_t invalidations_ = 0;
};

struct FsStats {
    std::uint64_t walks = 0;
    std::uint64_t components = 0;
    std::uint64_t block_reads = 0;
    std::uint64_t block_writes = 0;
    std::uint64_t sync_frames = 0;
    std::uint64_t sync_round_trips = 0;
};

struct FsConfig {
    std::uint32_t node_id = 1;
};

using SyncSink = std::function<void(const ether::EthernetFrame&)>;
using UnlinkListener = std::function<void(const std::string& path)>;

inline nvme::PcieFunction function_for(Side side) noexcept {
    return side == Side::Host ? nvme::PcieFunction::Host : nvme::PcieFunction::Firmware;
}

/// The filesystem image. Construction formats it: the private namespace
/// gets /images/blobs, /images/manifest and /containers, the sharable
/// namespace an empty root. Throws NamespaceMissing.
class LambdaFs {
public:
    explicit LambdaFs(nvme::NvmeController& controller, FsConfig config = {});
    LambdaFs(const LambdaFs&) = delete;
    LambdaFs& operator=(const LambdaFs&) = delete;

    // --- namespace operations; `function` selects what is visible --------
    Ino walk(nvme::PcieFunction function, std::string_view path);
    bool exists(nvme::PcieFunction function, std::string_view path);
    const Inode& stat(nvme::PcieFunction function, std::string_view path);
    const Inode& inode(Ino ino) const;
    std::string path_of(Ino ino) const;

    Ino mkdir(nvme::PcieFunction function, std::string_view path);
    Ino mkdirs(nvme::PcieFunction function, std::string_view path);
    Ino create(nvme::PcieFunction function, std::string_view path);
    Ino symlink(nvme::PcieFunction function, std::string_view target, std::string_view link);
    void unlink(nvme::PcieFunction function, std::string_view path);
    /// Removes a directory tree.
    void remove_all(nvme::PcieFunction function, std::string_view path);
    std::vector<std::string> list(nvme::PcieFunction function, std::string_view path);

    /// Replaces the content, creating the file if needed.
    void write_file(nvme::PcieFunction function, std::string_view path, ByteView data);
    void append_file(nvme::PcieFunction function, std::string_view path, ByteView data);
    Bytes read_file(nvme::PcieFunction function, std::string_view path);

    // --- lock protocol ---------------------------------------------------
    /// Registers a sharable path for container use. Idempotent; the first
    /// bind sends one sync frame.
    Ino bind(std::string_view host_path);
    bool is_bound(Ino ino) const;
    OpenOutcome open(Side side, std::string_view path);
    std::vector<Handle> close(std::uint64_t handle);
    /// Withdraws a blocked open; no sync frame is sent.
    bool cancel(std::uint64_t handle) { return locks_.cancel(handle); }
    void crash_recover();

    const InodeLockTable& locks() const noexcept { return locks_; }
    VfsCache& vfs() noexcept { return vfs_; }
    const FsStats& stats() const noexcept { return stats_; }
    const std::vector<ether::EthernetFrame>& sync_log() const noexcept { return sync_log_; }
    void set_sync_sink(SyncSink sink) { sync_sink_ = std::move(sink); }
    void add_unlink_listener(UnlinkListener listener) { unlink_listeners_.push_back(std::move(listener)); }

    std::uint32_t nsid(nvme::NamespaceKind kind) const;
    std::size_t free_blocks(nvme::NamespaceKind kind) const;
    std::size_t inode_count() const noexcept { return inodes_.size(); }

private:
    struct Allocator {
        std::uint64_t capacity = 0;
        std::uint64_t next = 0;
        std::set<std::uint64_t> freed;

        std::uint64_t take();
        void give(std::uint64_t lba) { freed.insert(lba); }
        std::size_t available() const { return capacity - next + freed.size(); }
    };

    Ino resolve(nvme::PcieFunction function, std::string_view path, bool follow_last, int depth);
    std::pair<Ino, std::string> parent_and_name(nvme::PcieFunction function, std::string_view path);
    Ino add_inode(Ino parent, const std::string& name, InodeKind kind, nvme::NamespaceKind ns);
    Inode& mutable_inode(Ino ino);
    void check_visible(nvme::PcieFunction function, const Inode& node) const;
    nvme::BlockPort& port(nvme::PcieFunction function);
    void store(nvme::PcieFunction function, Inode& node, ByteView data, std::uint64_t offset);
    void free_blocks_of(Inode& node);
    void send_sync(std::string_view what, Ino ino);
    void after_grant(const Handle& h);
    void drop(Ino ino);

    nvme::NvmeController& controller_;
    FsConfig config_;
    const nvme::Namespace* private_ns_;
    const nvme::Namespace* sharable_ns_;
    nvme::BlockPort fw_port_;
    nvme::BlockPort host_port_;
    std::map<Ino, Inode> inodes_;
    std::map<nvme::NamespaceKind, Allocator> alloc_;
    Ino next_ino_ = kRootIno;
    std::set<Ino> bound_;
    InodeLockTable locks_;
    VfsCache vfs_;
    FsStats stats_;
    std::vector<ether::EthernetFrame> sync_log_;
    SyncSink sync_sink_;
    std::vector<UnlinkListener> unlink_listeners_;
};

// --- trace format ----------------------------------------------------------

enum class TraceOp { Open, Close, Bind, Crash };

struct TraceEvent {
    TraceOp op = TraceOp::Open;
    Side side = Side::Host;
    std::string path;
    std::optional<OpenStatus> expect;

    bool operator==(const TraceEvent&) const = default;
};

/// One event per line: `open|close|bind|crash <side> <path> [grant|block]`.
/// `crash` may omit side and path. Blank lines and `#` comments are skipped.
std::vector<TraceEvent> parse_trace(std::string_view text);
std::string format_event(const TraceEvent& event);

struct TraceRun {
    std::vector<std::string> lines;
    std::size_t mismatches = 0;
};

/// Replays a trace. `close` releases the oldest live handle the side holds
/// on the path. Deferred grants appear as `# granted ...` comment lines.
TraceRun run_trace(LambdaFs& fs, const std::vector<TraceEvent>& events);

}  // namespace csd::fs
