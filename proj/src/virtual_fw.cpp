#include "csd/virtual_fw.hpp"

#include <algorithm>
#include <charconv>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "embedded_data.hpp"

namespace csd::vfw {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

SimTime parse_ns(const std::string& text, int lineno) {
    SimTime v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw Error(ErrorCode::InvalidArgument, fmt::format("syscall table line {}: bad cost '{}'", lineno, text));
    return v;
}

std::vector<std::string> components(std::string_view path) {
    if (path.empty() || path.front() != '/')
        throw Error(ErrorCode::InvalidArgument, fmt::format("path '{}' is not absolute", path));
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < path.size()) {
        while (i < path.size() && path[i] == '/') ++i;
        auto j = std::min(path.find('/', i), path.size());
        if (j > i) out.emplace_back(path.substr(i, j - i));
        i = j;
    }
    return out;
}

std::string join(const std::vector<std::string>& parts, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) out += "/" + parts[i];
    return out.empty() ? "/" : out;
}

std::string parent_path(const std::string& path) {
    auto parts = components(path);
    return join(parts, parts.empty() ? 0 : parts.size() - 1);
}

std::int64_t errno_for(const Error& e) {
    switch (e.code()) {
    case ErrorCode::PathNotFound:
    case ErrorCode::NotADirectory: return kENOENT;
    case ErrorCode::AlreadyExists: return kEEXIST;
    case ErrorCode::IsADirectory: return kEISDIR;
    case ErrorCode::DirectoryNotEmpty: return -39;
    case ErrorCode::InvalidArgument: return kEINVAL;
    case ErrorCode::WouldBlock: return kEAGAIN;
    default: throw e;
    }
}

}  // namespace

std::string_view to_string(HandlerKind h) noexcept {
    switch (h) {
    case HandlerKind::Thread: return "thread";
    case HandlerKind::Io: return "io";
    case HandlerKind::Network: return "network";
    }
    return "?";
}

// --- SyscallTable ----------------------------------------------------------

SyscallTable SyscallTable::parse_csv(std::string_view text) {
    SyscallTable table;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        if (header) {
            if (line != "name,handler,category,cost_ns,fullos_ns,alias_of")
                throw Error(ErrorCode::InvalidArgument, "syscall table header mismatch");
            header = false;
            continue;
        }
        if (cells.size() != 6)
            throw Error(ErrorCode::InvalidArgument, fmt::format("syscall table line {}: expected 6 fields", lineno));
        SyscallEntry e;
        e.name = cells[0];
        if (cells[1] == "thread") e.handler = HandlerKind::Thread;
        else if (cells[1] == "io") e.handler = HandlerKind::Io;
        else if (cells[1] == "network") e.handler = HandlerKind::Network;
        else throw Error(ErrorCode::InvalidArgument, fmt::format("syscall table line {}: handler '{}'", lineno, cells[1]));
        e.category = cells[2];
        e.cost_ns = parse_ns(cells[3], lineno);
        e.fullos_ns = parse_ns(cells[4], lineno);
        e.alias_of = cells[5];
        if (table.index_.contains(e.name))
            throw Error(ErrorCode::InvalidArgument, fmt::format("syscall table line {}: duplicate '{}'", lineno, e.name));
        table.index_.emplace(e.name, table.entries_.size());
        table.entries_.push_back(std::move(e));
    }
    if (header) throw Error(ErrorCode::InvalidArgument, "syscall table is empty");
    for (const auto& e : table.entries_)
        if (!e.alias_of.empty() && !table.index_.contains(e.alias_of))
            throw Error(ErrorCode::InvalidArgument, fmt::format("'{}' aliases unknown '{}'", e.name, e.alias_of));
    return table;
}

const SyscallTable& SyscallTable::builtin() {
    static const SyscallTable table = parse_csv(data::kSyscallsCsv);
    return table;
}

const std::vector<std::string>& SyscallTable::implemented() {
    static const std::vector<std::string> names{
        "fork",         "exit",      "getpid", "brk",    "mmap",   "munmap",  "pipe",    "mq_open", "futex",    "kill",
        "openat",       "close",     "mkdir",  "read",   "write",  "lseek",   "symlink", "unlink",  "chmod",    "chown",
        "epoll_create", "epoll_ctl", "socket", "bind",   "listen", "accept",  "connect", "sendto",  "recvfrom", "shutdown",
    };
    return names;
}

const SyscallEntry* SyscallTable::find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
}

const SyscallEntry* SyscallTable::canonical(std::string_view name) const {
    const auto* e = find(name);
    if (e && !e->alias_of.empty()) e = find(e->alias_of);
    return e;
}

bool SyscallTable::executable(std::string_view name) const {
    const auto* e = canonical(name);
    if (!e) return false;
    const auto& impl = implemented();
    return std::find(impl.begin(), impl.end(), e->name) != impl.end();
}

std::size_t SyscallTable::count(HandlerKind h) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const SyscallEntry& e) { return e.handler == h; }));
}

std::size_t SyscallTable::executable_count(HandlerKind h) const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [&](const SyscallEntry& e) {
        return e.handler == h && e.alias_of.empty() && executable(e.name);
    }));
}

// --- MemoryPools -----------------------------------------------------------

MemoryPools::MemoryPools(std::size_t fw_pages, std::size_t isp_pages) : fw_pages_(fw_pages), isp_pages_(isp_pages) {}

PoolKind MemoryPools::pool_of(std::uint64_t addr) const {
    if (addr >= kFwPoolBase && addr < kFwPoolBase + fw_pages_ * nvme::kPageSize) return PoolKind::Fw;
    if (addr >= kIspPoolBase && addr < kIspPoolBase + isp_pages_ * nvme::kPageSize) return PoolKind::Isp;
    throw Error(ErrorCode::Fault, fmt::format("address {:#x} is outside both pools", addr));
}

std::size_t MemoryPools::used_pages(PoolKind pool) const noexcept { return pool == PoolKind::Fw ? fw_next_ : isp_next_; }

std::uint64_t MemoryPools::allocate(PoolKind pool, std::size_t bytes) {
    auto pages = std::max<std::size_t>(1, (bytes + nvme::kPageSize - 1) / nvme::kPageSize);
    auto& next = pool == PoolKind::Fw ? fw_next_ : isp_next_;
    auto limit = pool == PoolKind::Fw ? fw_pages_ : isp_pages_;
    if (pool == PoolKind::Fw && mode_ == Mode::User) {
        ++faults_;
        throw Error(ErrorCode::Fault, "user mode cannot allocate FW pool pages");
    }
    if (next + pages > limit) throw Error(ErrorCode::StorageFull, fmt::format("{} pool exhausted", pool == PoolKind::Fw ? "FW" : "ISP"));
    auto base = (pool == PoolKind::Fw ? kFwPoolBase : kIspPoolBase) + next * nvme::kPageSize;
    next += pages;
    return base;
}

void MemoryPools::check(std::uint64_t addr, std::size_t len) {
    PoolKind pool;
    try {
        pool = pool_of(addr);
        if (len > 0 && pool_of(addr + len - 1) != pool) throw Error(ErrorCode::Fault, "access crosses pools");
    } catch (const Error&) {
        ++faults_;
        throw;
    }
    if (pool == PoolKind::Fw && mode_ == Mode::User) {
        ++faults_;
        throw Error(ErrorCode::Fault, fmt::format("user-mode access to FW pool at {:#x}", addr));
    }
}

void MemoryPools::write(std::uint64_t addr, ByteView data) {
    check(addr, data.size());
    for (std::size_t i = 0; i < data.size(); ++i) bytes_[addr + i] = data[i];
}

Bytes MemoryPools::read(std::uint64_t addr, std::size_t len) {
    check(addr, len);
    Bytes out(len);
    for (std::size_t i = 0; i < len; ++i) {
        auto it = bytes_.find(addr + i);
        out[i] = it == bytes_.end() ? 0 : it->second;
    }
    return out;
}

// --- IoNodeCache -----------------------------------------------------------

std::optional<fs::Ino> IoNodeCache::get(const std::string& path) {
    auto it = map_.find(path);
    if (it == map_.end()) {
        ++misses_;
        return std::nullopt;
    }
    order_.splice(order_.begin(), order_, it->second.second);
    ++hits_;
    return it->second.first;
}

void IoNodeCache::put(const std::string& path, fs::Ino ino) {
    if (capacity_ == 0) return;
    auto it = map_.find(path);
    if (it != map_.end()) {
        it->second.first = ino;
        order_.splice(order_.begin(), order_, it->second.second);
        return;
    }
    order_.push_front(path);
    map_.emplace(path, std::make_pair(ino, order_.begin()));
    if (map_.size() > capacity_) {
        map_.erase(order_.back());
        order_.pop_back();
    }
}

void IoNodeCache::invalidate_prefix(const std::string& path) {
    if (path == "/") {
        clear();
        return;
    }
    for (auto it = order_.begin(); it != order_.end();) {
        bool below = it->size() > path.size() && it->compare(0, path.size(), path) == 0 && (*it)[path.size()] == '/';
        if (*it == path || below) {
            map_.erase(*it);
            it = order_.erase(it);
        } else {
            ++it;
        }
    }
}

void IoNodeCache::clear() {
    map_.clear();
    order_.clear();
}

WalkResult path_walk(fs::LambdaFs& fs, IoNodeCache& cache, std::string_view path) {
    auto parts = components(path);
    WalkResult result{fs::kRootIno, 0, false};
    if (parts.empty()) return result;
    bool plain = std::none_of(parts.begin(), parts.end(), [](const std::string& p) { return p == "." || p == ".."; });
    if (!plain) {
        result.ino = fs.walk(nvme::PcieFunction::Firmware, path);
        result.lookups = parts.size();
        return result;
    }
    std::size_t start = 0;
    fs::Ino cur = fs::kRootIno;
    for (std::size_t k = parts.size(); k > 0; --k) {
        if (auto hit = cache.get(join(parts, k))) {
            cur = *hit;
            start = k;
            result.cache_hit = true;
            break;
        }
    }
    for (std::size_t i = start; i < parts.size(); ++i) {
        const auto& dir = fs.inode(cur);
        if (dir.kind != fs::InodeKind::Directory) throw Error(ErrorCode::NotADirectory, std::string(path));
        auto it = dir.children.find(parts[i]);
        ++result.lookups;
        if (it == dir.children.end()) throw Error(ErrorCode::PathNotFound, std::string(path));
        if (fs.inode(it->second).kind == fs::InodeKind::Symlink) {
            result.ino = fs.walk(nvme::PcieFunction::Firmware, path);
            return result;
        }
        cur = it->second;
        cache.put(join(parts, i + 1), cur);
    }
    result.ino = cur;
    return result;
}

// --- TCP -------------------------------------------------------------------

std::string_view to_string(TcpState s) noexcept {
    static constexpr std::string_view kNames[] = {"CLOSED",      "LISTEN",     "SYN_SENT",   "SYN_RCVD", "ESTABLISHED",
                                                  "FIN_WAIT_1", "FIN_WAIT_2", "CLOSE_WAIT", "LAST_ACK", "TIME_WAIT"};
    return kNames[static_cast<int>(s)];
}

std::string_view to_string(TcpEvent e) noexcept {
    static constexpr std::string_view kNames[] = {"passive_open", "active_open", "syn",     "syn_ack",
                                                  "ack",          "fin",         "timeout", "close"};
    return kNames[static_cast<int>(e)];
}

std::optional<TcpState> tcp_next(TcpState s, TcpEvent e) noexcept {
    using S = TcpState;
    using E = TcpEvent;
    switch (s) {
    case S::Closed:
        if (e == E::PassiveOpen) return S::Listen;
        if (e == E::ActiveOpen) return S::SynSent;
        break;
    case S::Listen:
        if (e == E::Syn) return S::SynRcvd;
        if (e == E::Close) return S::Closed;
        break;
    case S::SynSent:
        if (e == E::SynAck) return S::Established;
        if (e == E::Syn) return S::SynRcvd;
        if (e == E::Close || e == E::Timeout) return S::Closed;
        break;
    case S::SynRcvd:
        if (e == E::Ack) return S::Established;
        if (e == E::Close) return S::FinWait1;
        if (e == E::Timeout) return S::Closed;
        break;
    case S::Established:
        if (e == E::Close) return S::FinWait1;
        if (e == E::Fin) return S::CloseWait;
        break;
    case S::FinWait1:
        if (e == E::Ack) return S::FinWait2;
        if (e == E::Fin) return S::TimeWait;
        break;
    case S::FinWait2:
        if (e == E::Fin) return S::TimeWait;
        break;
    case S::CloseWait:
        if (e == E::Close) return S::LastAck;
        break;
    case S::LastAck:
        if (e == E::Ack) return S::Closed;
        break;
    case S::TimeWait:
        if (e == E::Timeout) return S::Closed;
        break;
    }
    return std::nullopt;
}

TcpState tcp_step(TcpState state, TcpEvent event) {
    auto next = tcp_next(state, event);
    if (!next)
        throw Error(ErrorCode::IllegalTransition, fmt::format("{} on {}", to_string(event), to_string(state)));
    return *next;
}

void TcpConnection::step(TcpEvent event) {
    auto before = state;
    state = tcp_step(state, event);
    switch (event) {
    case TcpEvent::ActiveOpen: ++snd_nxt; break;
    case TcpEvent::Syn:
    case TcpEvent::SynAck:
    case TcpEvent::Fin: ++rcv_nxt; break;
    case TcpEvent::Close:
        if (before != TcpState::Listen && before != TcpState::SynSent) ++snd_nxt;
        break;
    default: break;
    }
}

// --- Scheduler -------------------------------------------------------------

Scheduler::Scheduler(std::size_t cores, SimTime quantum_ns) : cores_(cores), quantum_(quantum_ns), slots_(cores) {
    if (cores == 0) throw Error(ErrorCode::InvalidArgument, "scheduler needs at least one core");
}

void Scheduler::admit(ThreadRecord& record) {
    threads_[record.tid] = &record;
    record.state = ThreadState::Runnable;
    queue_.push_back(record.tid);
    fill();
}

void Scheduler::fill() {
    for (auto& slot : slots_) {
        if (slot || queue_.empty()) continue;
        slot = queue_.front();
        queue_.pop_front();
        threads_.at(*slot)->state = ThreadState::Running;
    }
}

void Scheduler::exit(std::uint32_t tid) {
    auto it = threads_.find(tid);
    if (it == threads_.end()) throw Error(ErrorCode::InvalidArgument, fmt::format("no thread {}", tid));
    it->second->state = ThreadState::Exited;
    for (auto& slot : slots_)
        if (slot == tid) slot.reset();
    queue_.erase(std::remove(queue_.begin(), queue_.end(), tid), queue_.end());
    threads_.erase(it);
    fill();
}

void Scheduler::tick() {
    now_ += quantum_;
    for (auto& slot : slots_) {
        if (!slot) continue;
        auto* t = threads_.at(*slot);
        t->cpu_ns += quantum_;
        t->state = ThreadState::Runnable;
        queue_.push_back(*slot);
        slot.reset();
    }
    fill();
}

std::vector<std::uint32_t> Scheduler::running() const {
    std::vector<std::uint32_t> out;
    for (const auto& slot : slots_)
        if (slot) out.push_back(*slot);
    return out;
}

const ThreadRecord* Scheduler::thread(std::uint32_t tid) const {
    auto it = threads_.find(tid);
    return it == threads_.end() ? nullptr : it->second;
}

// --- LambdaFsBackend -------------------------------------------------------

namespace {
constexpr auto kFw = nvme::PcieFunction::Firmware;
}

bool LambdaFsBackend::exists(const std::string& path) { return fs_.exists(kFw, path); }

bool LambdaFsBackend::is_directory(const std::string& path) {
    return fs_.exists(kFw, path) && fs_.stat(kFw, path).kind == fs::InodeKind::Directory;
}

Bytes LambdaFsBackend::read(const std::string& path) { return fs_.read_file(kFw, path); }
void LambdaFsBackend::write(const std::string& path, ByteView data) { fs_.write_file(kFw, path, data); }
void LambdaFsBackend::mkdir(const std::string& path) { fs_.mkdir(kFw, path); }
void LambdaFsBackend::symlink(const std::string& target, const std::string& link) { fs_.symlink(kFw, target, link); }

void LambdaFsBackend::unlink(const std::string& path) {
    fs_.unlink(kFw, path);
    cache_.invalidate_prefix(path);
}

WalkResult LambdaFsBackend::walk(const std::string& path) { return path_walk(fs_, cache_, path); }

// --- VirtualFw -------------------------------------------------------------

VirtualFw::VirtualFw(FileBackend& files, CostConfig costs, const SyscallTable& table)
    : files_(&files), costs_(costs), table_(table) {
    pools_.set_mode(Mode::Privileged);
    heap_break_ = pools_.allocate(PoolKind::Isp, 64 * nvme::kPageSize);
    pools_.allocate(PoolKind::Fw, 16 * nvme::kPageSize);  // handler tables
    pools_.set_mode(Mode::User);
}

const TcpConnection* VirtualFw::connection(int fd) const {
    auto it = sockets_.find(fd);
    return it == sockets_.end() ? nullptr : &it->second.tcp;
}

const ThreadRecord* VirtualFw::thread(std::uint32_t tid) const {
    auto it = threads_.find(tid);
    return it == threads_.end() ? nullptr : it->second.get();
}

int VirtualFw::new_fd() { return next_fd_++; }

VirtualFw::OpenFile& VirtualFw::file(std::int64_t fd) {
    auto it = files_open_.find(static_cast<int>(fd));
    if (it == files_open_.end()) throw Error(ErrorCode::BadFileDescriptor, fmt::format("fd {}", fd));
    return it->second;
}

VirtualFw::Socket& VirtualFw::socket(std::int64_t fd) {
    auto it = sockets_.find(static_cast<int>(fd));
    if (it == sockets_.end()) throw Error(ErrorCode::BadFileDescriptor, fmt::format("socket fd {}", fd));
    return it->second;
}

SimTime VirtualFw::charge_walk(const std::string& path) {
    auto w = files_->walk(path);
    ++stats_.walks;
    stats_.walk_lookups += w.lookups;
    if (w.cache_hit) ++stats_.walk_hits;
    auto cost = w.lookups * costs_.walk_lookup_ns + (w.cache_hit ? costs_.walk_hit_ns : 0);
    stats_.walk_ns += cost;
    return cost;
}

ThreadRecord& VirtualFw::spawn_container_thread(const std::string& owner, const std::optional<std::string>& entry) {
    if (!entry || entry->empty()) throw Error(ErrorCode::NoEntryScript, fmt::format("container {}", owner));
    auto record = std::make_unique<ThreadRecord>();
    record->tid = next_tid_++;
    record->owner = owner;
    record->entry = *entry;
    auto saved = pools_.mode();
    pools_.set_mode(Mode::Privileged);
    record->record_addr = pools_.allocate(PoolKind::Isp, 256);
    pools_.write(record->record_addr, to_bytes(fmt::format("{} {}", owner, *entry)));
    pools_.set_mode(saved);
    auto& ref = *record;
    threads_.emplace(ref.tid, std::move(record));
    scheduler_.admit(ref);
    return ref;
}

void VirtualFw::deliver_to_socket(int fd, ByteView data) { socket(fd).inbox.emplace_back(data.begin(), data.end()); }

SyscallResult VirtualFw::emulate(const SyscallInvocation& call) {
    const auto* called = table_.find(call.name);
    if (!called || !table_.executable(call.name))
        throw Error(ErrorCode::UnimplementedSyscall, call.name);
    const auto* entry = table_.canonical(call.name);

    // The user buffer must be writable from user mode before any effect.
    if (call.buffer) pools_.write(*call.buffer, {});

    SyscallResult result;
    result.handler = entry->handler;
    result.dispatched = entry->name;
    SimTime extra = 0;

    pools_.set_mode(Mode::Privileged);
    try {
        switch (entry->handler) {
        case HandlerKind::Thread: result.value = thread_call(entry->name, call, result.data); break;
        case HandlerKind::Io: result.value = io_call(entry->name, call, result.data, extra); break;
        case HandlerKind::Network: result.value = network_call(entry->name, call, result.data); break;
        }
    } catch (...) {
        pools_.set_mode(Mode::User);
        throw;
    }
    pools_.set_mode(Mode::User);
    if (call.buffer && !result.data.empty()) pools_.write(*call.buffer, result.data);

    if (costs_.mode == ExecutionMode::Emulated) {
        result.cost_ns = called->cost_ns + extra;
    } else {
        result.cost_ns = called->fullos_ns + costs_.context_switch_ns + extra;
        ++stats_.context_switches;
    }
    ++stats_.syscalls;
    ++stats_.per_handler[entry->handler];
    stats_.system_ns += result.cost_ns;
    return result;
}

std::int64_t VirtualFw::thread_call(const std::string& name, const SyscallInvocation& call, Bytes& out) {
    auto arg = [&](std::size_t i, std::int64_t fallback = 0) { return i < call.args.size() ? call.args[i] : fallback; };
    if (name == "fork") {
        const auto* parent = thread(call.tid);
        auto& child = spawn_container_thread(parent ? parent->owner : "firmware", parent ? parent->entry : "fork");
        return child.tid;
    }
    if (name == "exit" || name == "kill") {
        auto tid = static_cast<std::uint32_t>(name == "exit" ? call.tid : arg(0));
        if (!threads_.contains(tid) || threads_.at(tid)->state == ThreadState::Exited) return kEINVAL;
        scheduler_.exit(tid);
        return 0;
    }
    if (name == "getpid") return call.tid ? call.tid : 1;
    if (name == "brk") {
        if (arg(0) > 0) heap_break_ = static_cast<std::uint64_t>(arg(0));
        return static_cast<std::int64_t>(heap_break_);
    }
    if (name == "mmap") {
        if (arg(1) <= 0) return kEINVAL;
        return static_cast<std::int64_t>(pools_.allocate(PoolKind::Isp, static_cast<std::size_t>(arg(1))));
    }
    if (name == "munmap" || name == "futex") return 0;
    if (name == "pipe") {
        int rd = new_fd();
        int wr = new_fd();
        pipes_[rd];
        pipes_[wr];
        for (int fd : {rd, wr})
            for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(fd >> (8 * i)));
        return 0;
    }
    if (name == "mq_open") {
        int fd = new_fd();
        pipes_[fd];
        return fd;
    }
    throw Error(ErrorCode::UnimplementedSyscall, name);
}

std::int64_t VirtualFw::io_call(const std::string& name, const SyscallInvocation& call, Bytes& out, SimTime& extra) {
    auto arg = [&](std::size_t i, std::int64_t fallback = 0) { return i < call.args.size() ? call.args[i] : fallback; };
    try {
        if (name == "openat") {
            if (!files_->exists(call.path)) {
                if (!(arg(0) & kOpenCreate)) return kENOENT;
                files_->write(call.path, {});
            } else if (arg(0) & kOpenTruncate) {
                if (files_->is_directory(call.path)) return kEISDIR;
                files_->write(call.path, {});
            }
            extra += charge_walk(call.path);
            int fd = new_fd();
            files_open_[fd] = {call.path, 0};
            return fd;
        }
        if (name == "close") {
            auto fd = static_cast<int>(arg(0, -1));
            if (files_open_.erase(fd) + sockets_.erase(fd) + epolls_.erase(fd) + pipes_.erase(fd) == 0)
                throw Error(ErrorCode::BadFileDescriptor, fmt::format("fd {}", fd));
            return 0;
        }
        if (name == "read") {
            auto& f = file(arg(0, -1));
            auto content = files_->read(f.path);
            auto start = std::min<std::uint64_t>(f.offset, content.size());
            auto n = std::min<std::uint64_t>(static_cast<std::uint64_t>(std::max<std::int64_t>(arg(1), 0)),
                                             content.size() - start);
            out.assign(content.begin() + static_cast<std::ptrdiff_t>(start),
                       content.begin() + static_cast<std::ptrdiff_t>(start + n));
            f.offset = start + n;
            stats_.bytes_read += n;
            return static_cast<std::int64_t>(n);
        }
        if (name == "write") {
            auto& f = file(arg(0, -1));
            auto content = files_->read(f.path);
            if (content.size() < f.offset + call.data.size()) content.resize(f.offset + call.data.size());
            std::copy(call.data.begin(), call.data.end(), content.begin() + static_cast<std::ptrdiff_t>(f.offset));
            files_->write(f.path, content);
            f.offset += call.data.size();
            stats_.bytes_written += call.data.size();
            return static_cast<std::int64_t>(call.data.size());
        }
        if (name == "lseek") {
            auto& f = file(arg(0, -1));
            std::int64_t base = 0;
            if (arg(2) == kSeekCur) base = static_cast<std::int64_t>(f.offset);
            else if (arg(2) == kSeekEnd) base = static_cast<std::int64_t>(files_->read(f.path).size());
            else if (arg(2) != kSeekSet) return kEINVAL;
            if (base + arg(1) < 0) return kEINVAL;
            f.offset = static_cast<std::uint64_t>(base + arg(1));
            return base + arg(1);
        }
        if (name == "mkdir") {
            if (files_->exists(call.path)) return kEEXIST;
            extra += charge_walk(parent_path(call.path));
            files_->mkdir(call.path);
            return 0;
        }
        if (name == "symlink") {
            if (files_->exists(call.path2)) return kEEXIST;
            extra += charge_walk(parent_path(call.path2));
            files_->symlink(call.path, call.path2);
            return 0;
        }
        if (name == "unlink") {
            if (!files_->exists(call.path)) return kENOENT;
            if (files_->is_directory(call.path)) return kEISDIR;
            extra += charge_walk(call.path);
            files_->unlink(call.path);
            return 0;
        }
        if (name == "chmod" || name == "chown") {
            if (!files_->exists(call.path)) return kENOENT;
            extra += charge_walk(call.path);
            auto& m = modes_[call.path];
            (name == "chmod" ? m.first : m.second) = arg(0);
            return 0;
        }
    } catch (const Error& e) {
        return errno_for(e);
    }
    throw Error(ErrorCode::UnimplementedSyscall, name);
}

std::int64_t VirtualFw::network_call(const std::string& name, const SyscallInvocation& call, Bytes& out) {
    auto arg = [&](std::size_t i, std::int64_t fallback = 0) { return i < call.args.size() ? call.args[i] : fallback; };
    if (name == "epoll_create") {
        int fd = new_fd();
        epolls_[fd];
        return fd;
    }
    if (name == "epoll_ctl") {
        auto it = epolls_.find(static_cast<int>(arg(0, -1)));
        if (it == epolls_.end()) throw Error(ErrorCode::BadFileDescriptor, fmt::format("epoll fd {}", arg(0, -1)));
        it->second.push_back(static_cast<int>(arg(2, -1)));
        return 0;
    }
    if (name == "socket") {
        int fd = new_fd();
        auto& s = sockets_[fd];
        s.header.src_ip = ether::Ipv4Address::parse("10.0.0.2");
        s.header.dst_ip = ether::Ipv4Address::parse("10.0.0.1");
        s.header.src_port = static_cast<std::uint16_t>(40000 + fd);
        return fd;
    }
    auto& s = socket(arg(0, -1));
    try {
        if (name == "bind") {
            s.port = static_cast<std::uint16_t>(arg(1));
            s.header.src_port = s.port;
            return 0;
        }
        if (name == "listen") {
            s.tcp.step(TcpEvent::PassiveOpen);
            return 0;
        }
        if (name == "accept") {
            if (s.tcp.state != TcpState::Listen) return kEINVAL;
            if (s.inbox.empty()) return kEAGAIN;
            int fd = new_fd();
            auto& child = sockets_[fd];
            auto& parent = sockets_.at(static_cast<int>(arg(0)));
            child.header = parent.header;
            child.tcp.step(TcpEvent::PassiveOpen);
            child.tcp.step(TcpEvent::Syn);
            child.tcp.step(TcpEvent::Ack);
            child.inbox.push_back(std::move(parent.inbox.front()));
            parent.inbox.pop_front();
            return fd;
        }
        if (name == "connect") {
            s.header.dst_port = static_cast<std::uint16_t>(arg(1));
            s.tcp.step(TcpEvent::ActiveOpen);
            s.tcp.step(TcpEvent::SynAck);  // the peer answers at once
            return 0;
        }
        if (name == "sendto") {
            if (s.tcp.state != TcpState::Established && s.tcp.state != TcpState::CloseWait) return kENOTCONN;
            auto header = s.header;
            header.seq = s.tcp.snd_nxt;
            header.ack = s.tcp.rcv_nxt;
            header.flags = ether::tcp_flag::Ack | ether::tcp_flag::Psh;
            auto segments = ether::segment_stream(header, call.data);
            for (const auto& seg : segments)
                if (segment_sink_) segment_sink_(seg);
            stats_.tcp_segments += segments.size();
            s.tcp.snd_nxt += static_cast<std::uint32_t>(call.data.size());
            return static_cast<std::int64_t>(call.data.size());
        }
        if (name == "recvfrom") {
            if (s.inbox.empty()) return kEAGAIN;
            auto& front = s.inbox.front();
            auto n = std::min<std::size_t>(front.size(), static_cast<std::size_t>(std::max<std::int64_t>(arg(1), 0)));
            out.assign(front.begin(), front.begin() + static_cast<std::ptrdiff_t>(n));
            front.erase(front.begin(), front.begin() + static_cast<std::ptrdiff_t>(n));
            if (front.empty()) s.inbox.pop_front();
            s.tcp.rcv_nxt += static_cast<std::uint32_t>(n);
            return static_cast<std::int64_t>(n);
        }
        if (name == "shutdown") {
            s.tcp.step(TcpEvent::Close);
            return 0;
        }
    } catch (const Error& e) {
        if (e.code() == ErrorCode::IllegalTransition) return kEINVAL;
        throw;
    }
    throw Error(ErrorCode::UnimplementedSyscall, name);
}

}  // namespace csd::vfw
