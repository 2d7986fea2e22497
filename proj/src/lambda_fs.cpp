#include "csd/lambda_fs.hpp"

#include <algorithm>
#include <sstream>

#include <fmt/format.h>

namespace csd::fs {

namespace {

constexpr int kMaxSymlinkDepth = 8;

std::vector<std::string> split_path(std::string_view path) {
    if (path.empty() || path.front() != '/')
        throw Error(ErrorCode::InvalidArgument, fmt::format("path '{}' is not absolute", path));
    std::vector<std::string> parts;
    std::size_t i = 0;
    while (i < path.size()) {
        while (i < path.size() && path[i] == '/') ++i;
        auto j = path.find('/', i);
        if (j == std::string_view::npos) j = path.size();
        if (j > i) parts.emplace_back(path.substr(i, j - i));
        i = j;
    }
    return parts;
}

std::uint64_t blocks_for(std::uint64_t bytes) { return (bytes + nvme::kBlockSize - 1) / nvme::kBlockSize; }

}  // namespace

// --- InodeLockTable --------------------------------------------------------

bool InodeLockTable::grantable(Side side, Ino file, Ino dir) const {
    for (Ino ino : {file, dir}) {
        auto it = locks_.find(ino);
        if (it != locks_.end() && it->second.refcount > 0 && it->second.holder != side) return false;
    }
    return true;
}

void InodeLockTable::acquire(const Handle& h) {
    for (Ino ino : {h.file, h.dir}) {
        auto& lock = locks_[ino];
        ++lock.refcount;
        lock.holder = h.side;
    }
    live_.emplace(h.id, h);
}

void InodeLockTable::release(Ino ino) {
    auto it = locks_.find(ino);
    if (it == locks_.end() || it->second.refcount == 0)
        throw Error(ErrorCode::DoubleClose, fmt::format("inode {} not held", ino));
    if (--it->second.refcount == 0) locks_.erase(it);
}

OpenOutcome InodeLockTable::open(Side side, Ino file, Ino dir) {
    Handle h{next_id_++, side, file, dir};
    if (grantable(side, file, dir)) {
        acquire(h);
        return {OpenStatus::Granted, h.id};
    }
    waiters_.push_back(h);
    return {OpenStatus::Blocked, h.id};
}

std::vector<Handle> InodeLockTable::close(std::uint64_t handle) {
    auto it = live_.find(handle);
    if (it == live_.end()) throw Error(ErrorCode::DoubleClose, fmt::format("handle {} is not open", handle));
    auto h = it->second;
    live_.erase(it);
    release(h.file);
    release(h.dir);
    std::vector<Handle> granted;
    for (auto w = waiters_.begin(); w != waiters_.end();) {
        if (grantable(w->side, w->file, w->dir)) {
            acquire(*w);
            granted.push_back(*w);
            w = waiters_.erase(w);
        } else {
            ++w;
        }
    }
    return granted;
}

std::uint32_t InodeLockTable::refcount(Ino ino) const {
    auto it = locks_.find(ino);
    return it == locks_.end() ? 0 : it->second.refcount;
}

std::uint32_t InodeLockTable::refcount(Ino ino, Side side) const {
    auto it = locks_.find(ino);
    return it == locks_.end() || it->second.holder != side ? 0 : it->second.refcount;
}

std::optional<Side> InodeLockTable::holder(Ino ino) const {
    auto it = locks_.find(ino);
    return it == locks_.end() ? std::nullopt : it->second.holder;
}

const Handle* InodeLockTable::live(std::uint64_t handle) const {
    auto it = live_.find(handle);
    return it == live_.end() ? nullptr : &it->second;
}

bool InodeLockTable::cancel(std::uint64_t handle) {
    auto it = std::find_if(waiters_.begin(), waiters_.end(), [&](const Handle& h) { return h.id == handle; });
    if (it == waiters_.end()) return false;
    waiters_.erase(it);
    return true;
}

bool InodeLockTable::waiting(std::uint64_t handle) const {
    return std::any_of(waiters_.begin(), waiters_.end(), [&](const Handle& h) { return h.id == handle; });
}

void InodeLockTable::clear() {
    locks_.clear();
    live_.clear();
    waiters_.clear();
}

// --- VfsCache --------------------------------------------------------------

std::optional<std::uint64_t> VfsCache::lookup(Ino ino) const {
    auto it = entries_.find(ino);
    if (it == entries_.end() || !it->second.valid) return std::nullopt;
    return it->second.size;
}

void VfsCache::fill(Ino ino, std::uint64_t size) { entries_[ino] = {size, true}; }

void VfsCache::invalidate(Ino ino) {
    auto it = entries_.find(ino);
    if (it != entries_.end() && it->second.valid) {
        it->second.valid = false;
        ++invalidations_;
    }
}

void VfsCache::invalidate_all() {
    for (auto& [ino, e] : entries_) invalidate(ino);
}

bool VfsCache::valid(Ino ino) const { return lookup(ino).has_value(); }

// --- LambdaFs --------------------------------------------------------------

std::uint64_t LambdaFs::Allocator::take() {
    if (!freed.empty()) {
        auto lba = *freed.begin();
        freed.erase(freed.begin());
        return lba;
    }
    if (next >= capacity) throw Error(ErrorCode::StorageFull, "namespace has no free blocks");
    return next++;
}

namespace {

const nvme::Namespace& require(const nvme::Namespace* ns, std::string_view what) {
    if (!ns) throw Error(ErrorCode::NamespaceMissing, fmt::format("no {} namespace", what));
    return *ns;
}

}  // namespace

LambdaFs::LambdaFs(nvme::NvmeController& controller, FsConfig config)
    : controller_(controller),
      config_(config),
      private_ns_(&require(controller.namespaces().find(nvme::NamespaceKind::Private), "private")),
      sharable_ns_(&require(controller.namespaces().find(nvme::NamespaceKind::Sharable), "sharable")),
      fw_port_(controller, nvme::PcieFunction::Firmware),
      host_port_(controller, nvme::PcieFunction::Host) {
    alloc_[nvme::NamespaceKind::Private].capacity = private_ns_->block_count;
    alloc_[nvme::NamespaceKind::Sharable].capacity = sharable_ns_->block_count;
    Inode root;
    root.ino = next_ino_++;
    root.kind = InodeKind::Directory;
    root.parent = root.ino;
    inodes_.emplace(root.ino, root);
    auto images = add_inode(kRootIno, "images", InodeKind::Directory, nvme::NamespaceKind::Private);
    add_inode(images, "blobs", InodeKind::Directory, nvme::NamespaceKind::Private);
    add_inode(images, "manifest", InodeKind::Directory, nvme::NamespaceKind::Private);
    add_inode(kRootIno, "containers", InodeKind::Directory, nvme::NamespaceKind::Private);
}

std::uint32_t LambdaFs::nsid(nvme::NamespaceKind kind) const {
    return kind == nvme::NamespaceKind::Private ? private_ns_->nsid : sharable_ns_->nsid;
}

std::size_t LambdaFs::free_blocks(nvme::NamespaceKind kind) const { return alloc_.at(kind).available(); }

const Inode& LambdaFs::inode(Ino ino) const {
    auto it = inodes_.find(ino);
    if (it == inodes_.end()) throw Error(ErrorCode::PathNotFound, fmt::format("inode {}", ino));
    return it->second;
}

Inode& LambdaFs::mutable_inode(Ino ino) { return const_cast<Inode&>(std::as_const(*this).inode(ino)); }

std::string LambdaFs::path_of(Ino ino) const {
    if (ino == kRootIno) return "/";
    std::vector<const std::string*> names;
    for (Ino cur = ino; cur != kRootIno; cur = inode(cur).parent) names.push_back(&inode(cur).name);
    std::string out;
    for (auto it = names.rbegin(); it != names.rend(); ++it) out += "/" + **it;
    return out;
}

void LambdaFs::check_visible(nvme::PcieFunction function, const Inode& node) const {
    if (function == nvme::PcieFunction::Host && node.ns == nvme::NamespaceKind::Private)
        throw Error(ErrorCode::NamespaceNotVisible, fmt::format("'{}' is on the private namespace", path_of(node.ino)));
}

Ino LambdaFs::resolve(nvme::PcieFunction function, std::string_view path, bool follow_last, int depth) {
    if (depth > kMaxSymlinkDepth) throw Error(ErrorCode::PathNotFound, fmt::format("too many links at '{}'", path));
    auto parts = split_path(path);
    Ino cur = kRootIno;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& part = parts[i];
        const auto& dir = inode(cur);
        if (part == ".") continue;
        if (part == "..") {
            cur = dir.parent;
            continue;
        }
        if (dir.kind != InodeKind::Directory)
            throw Error(ErrorCode::NotADirectory, fmt::format("'{}' in '{}'", dir.name, path));
        auto it = dir.children.find(part);
        if (it == dir.children.end()) throw Error(ErrorCode::PathNotFound, std::string(path));
        const auto& child = inode(it->second);
        check_visible(function, child);
        ++stats_.components;
        bool last = i + 1 == parts.size();
        if (child.kind == InodeKind::Symlink && (!last || follow_last)) {
            auto target = child.target.front() == '/' ? child.target : path_of(cur) + "/" + child.target;
            cur = resolve(function, target, true, depth + 1);
        } else {
            cur = child.ino;
        }
    }
    return cur;
}

Ino LambdaFs::walk(nvme::PcieFunction function, std::string_view path) {
    ++stats_.walks;
    return resolve(function, path, true, 0);
}

bool LambdaFs::exists(nvme::PcieFunction function, std::string_view path) {
    try {
        resolve(function, path, false, 0);
        return true;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::PathNotFound || e.code() == ErrorCode::NotADirectory) return false;
        throw;
    }
}

const Inode& LambdaFs::stat(nvme::PcieFunction function, std::string_view path) { return inode(walk(function, path)); }

std::pair<Ino, std::string> LambdaFs::parent_and_name(nvme::PcieFunction function, std::string_view path) {
    auto parts = split_path(path);
    if (parts.empty() || parts.back() == "." || parts.back() == "..")
        throw Error(ErrorCode::InvalidArgument, fmt::format("'{}' names no entry", path));
    auto name = parts.back();
    auto cut = path.rfind(name);
    auto parent_path = path.substr(0, cut);
    ++stats_.walks;
    auto parent = resolve(function, parent_path.empty() ? "/" : parent_path, true, 0);
    const auto& dir = inode(parent);
    if (dir.kind != InodeKind::Directory) throw Error(ErrorCode::NotADirectory, std::string(parent_path));
    check_visible(function, dir);
    return {parent, name};
}

Ino LambdaFs::add_inode(Ino parent, const std::string& name, InodeKind kind, nvme::NamespaceKind ns) {
    auto& dir = mutable_inode(parent);
    if (dir.children.contains(name)) throw Error(ErrorCode::AlreadyExists, path_of(parent) + "/" + name);
    Inode node;
    node.ino = next_ino_++;
    node.name = name;
    node.kind = kind;
    node.ns = ns;
    node.parent = parent;
    dir.children.emplace(name, node.ino);
    auto ino = node.ino;
    inodes_.emplace(ino, std::move(node));
    return ino;
}

Ino LambdaFs::mkdir(nvme::PcieFunction function, std::string_view path) {
    auto [parent, name] = parent_and_name(function, path);
    return add_inode(parent, name, InodeKind::Directory, inode(parent).ns);
}

Ino LambdaFs::mkdirs(nvme::PcieFunction function, std::string_view path) {
    std::string prefix;
    Ino cur = kRootIno;
    for (const auto& part : split_path(path)) {
        prefix += "/" + part;
        if (exists(function, prefix)) {
            cur = walk(function, prefix);
            if (inode(cur).kind != InodeKind::Directory) throw Error(ErrorCode::NotADirectory, prefix);
        } else {
            cur = mkdir(function, prefix);
        }
    }
    return cur;
}

Ino LambdaFs::create(nvme::PcieFunction function, std::string_view path) {
    auto [parent, name] = parent_and_name(function, path);
    return add_inode(parent, name, InodeKind::File, inode(parent).ns);
}

Ino LambdaFs::symlink(nvme::PcieFunction function, std::string_view target, std::string_view link) {
    if (target.empty()) throw Error(ErrorCode::InvalidArgument, "empty symlink target");
    auto [parent, name] = parent_and_name(function, link);
    auto ino = add_inode(parent, name, InodeKind::Symlink, inode(parent).ns);
    auto& node = mutable_inode(ino);
    node.target = std::string(target);
    node.size = target.size();
    return ino;
}

void LambdaFs::drop(Ino ino) {
    auto& node = mutable_inode(ino);
    auto path = path_of(ino);
    free_blocks_of(node);
    mutable_inode(node.parent).children.erase(node.name);
    bound_.erase(ino);
    vfs_.invalidate(ino);
    inodes_.erase(ino);
    for (const auto& listener : unlink_listeners_) listener(path);
}

void LambdaFs::unlink(nvme::PcieFunction function, std::string_view path) {
    ++stats_.walks;
    auto ino = resolve(function, path, false, 0);
    if (ino == kRootIno) throw Error(ErrorCode::InvalidArgument, "cannot unlink the root");
    const auto& node = inode(ino);
    if (node.kind == InodeKind::Directory && !node.children.empty())
        throw Error(ErrorCode::DirectoryNotEmpty, std::string(path));
    drop(ino);
}

void LambdaFs::remove_all(nvme::PcieFunction function, std::string_view path) {
    ++stats_.walks;
    auto top = resolve(function, path, false, 0);
    if (top == kRootIno) throw Error(ErrorCode::InvalidArgument, "cannot remove the root");
    std::vector<Ino> order{top};
    for (std::size_t i = 0; i < order.size(); ++i)
        for (const auto& [name, child] : inode(order[i]).children) order.push_back(child);
    for (auto it = order.rbegin(); it != order.rend(); ++it) drop(*it);
}

std::vector<std::string> LambdaFs::list(nvme::PcieFunction function, std::string_view path) {
    const auto& dir = inode(walk(function, path));
    if (dir.kind != InodeKind::Directory) throw Error(ErrorCode::NotADirectory, std::string(path));
    std::vector<std::string> out;
    for (const auto& [name, child] : dir.children) {
        if (function == nvme::PcieFunction::Host && inode(child).ns == nvme::NamespaceKind::Private) continue;
        out.push_back(name);
    }
    return out;
}

nvme::BlockPort& LambdaFs::port(nvme::PcieFunction function) {
    return function == nvme::PcieFunction::Host ? host_port_ : fw_port_;
}

void LambdaFs::free_blocks_of(Inode& node) {
    auto& alloc = alloc_.at(node.ns);
    for (auto lba : node.blocks) alloc.give(lba);
    node.blocks.clear();
    node.size = 0;
}

void LambdaFs::store(nvme::PcieFunction function, Inode& node, ByteView data, std::uint64_t offset) {
    auto new_size = std::max(node.size, offset + data.size());
    auto needed = blocks_for(new_size);
    auto& alloc = alloc_.at(node.ns);
    if (needed > node.blocks.size() && needed - node.blocks.size() > alloc.available())
        throw Error(ErrorCode::StorageFull, fmt::format("{} blocks wanted, {} free", needed - node.blocks.size(),
                                                        alloc.available()));
    while (node.blocks.size() < needed) node.blocks.push_back(alloc.take());
    auto ns = nsid(node.ns);
    auto& io = port(function);
    std::uint64_t pos = offset;
    std::size_t consumed = 0;
    while (consumed < data.size()) {
        auto index = pos / nvme::kBlockSize;
        auto within = pos % nvme::kBlockSize;
        auto n = std::min<std::uint64_t>(nvme::kBlockSize - within, data.size() - consumed);
        nvme::PageBytes block{};
        if ((within != 0 || n < nvme::kBlockSize) && index * nvme::kBlockSize < node.size) {
            block = io.read(ns, node.blocks[index]);
            ++stats_.block_reads;
        }
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(consumed), n, block.begin() + within);
        io.write(ns, node.blocks[index], block);
        ++stats_.block_writes;
        pos += n;
        consumed += n;
    }
    node.size = new_size;
    if (function == nvme::PcieFunction::Host) vfs_.fill(node.ino, node.size);
}

void LambdaFs::write_file(nvme::PcieFunction function, std::string_view path, ByteView data) {
    Ino ino = exists(function, path) ? walk(function, path) : create(function, path);
    auto& node = mutable_inode(ino);
    if (node.kind == InodeKind::Directory) throw Error(ErrorCode::IsADirectory, std::string(path));
    if (blocks_for(data.size()) > node.blocks.size() + alloc_.at(node.ns).available())
        throw Error(ErrorCode::StorageFull, std::string(path));
    free_blocks_of(node);
    store(function, node, data, 0);
    if (data.empty() && function == nvme::PcieFunction::Host) vfs_.fill(ino, 0);
}

void LambdaFs::append_file(nvme::PcieFunction function, std::string_view path, ByteView data) {
    Ino ino = exists(function, path) ? walk(function, path) : create(function, path);
    auto& node = mutable_inode(ino);
    if (node.kind == InodeKind::Directory) throw Error(ErrorCode::IsADirectory, std::string(path));
    store(function, node, data, node.size);
}

Bytes LambdaFs::read_file(nvme::PcieFunction function, std::string_view path) {
    const auto& node = inode(walk(function, path));
    if (node.kind == InodeKind::Directory) throw Error(ErrorCode::IsADirectory, std::string(path));
    auto size = node.size;
    if (function == nvme::PcieFunction::Host) {
        if (auto cached = vfs_.lookup(node.ino)) {
            size = *cached;
        } else {
            vfs_.fill(node.ino, node.size);
        }
    }
    size = std::min<std::uint64_t>(size, node.blocks.size() * nvme::kBlockSize);
    Bytes out;
    out.reserve(size);
    auto ns = nsid(node.ns);
    auto& io = port(function);
    for (std::size_t i = 0; out.size() < size; ++i) {
        auto block = io.read(ns, node.blocks[i]);
        ++stats_.block_reads;
        auto n = std::min<std::uint64_t>(nvme::kBlockSize, size - out.size());
        out.insert(out.end(), block.begin(), block.begin() + static_cast<std::ptrdiff_t>(n));
    }
    return out;
}

// --- lock protocol ---------------------------------------------------------

void LambdaFs::send_sync(std::string_view what, Ino ino) {
    auto payload = to_bytes(fmt::format("{} {} {}", what, ino, path_of(ino)));
    if (payload.size() > ether::kMaxPayload) payload.resize(ether::kMaxPayload);
    auto frame = ether::EthernetFrame::make(ether::mac_for_node(0), ether::mac_for_node(config_.node_id),
                                            ether::kEtherTypeSync, std::move(payload));
    ++stats_.sync_frames;
    if (sync_sink_) sync_sink_(frame);
    // The grant waits for the host to acknowledge the update.
    ++stats_.sync_round_trips;
    sync_log_.push_back(std::move(frame));
}

bool LambdaFs::is_bound(Ino ino) const {
    for (Ino cur = ino;; cur = inode(cur).parent) {
        if (bound_.contains(cur)) return true;
        if (cur == kRootIno) return false;
    }
}

Ino LambdaFs::bind(std::string_view host_path) {
    ++stats_.walks;
    auto ino = resolve(nvme::PcieFunction::Firmware, host_path, true, 0);
    if (inode(ino).ns == nvme::NamespaceKind::Private)
        throw Error(ErrorCode::PrivatePathBind, std::string(host_path));
    if (bound_.insert(ino).second) send_sync("bind", ino);
    return ino;
}

void LambdaFs::after_grant(const Handle& h) {
    if (h.side == Side::Container) {
        vfs_.invalidate(h.file);
        vfs_.invalidate(h.dir);
    }
    if (is_bound(h.file)) send_sync("open", h.file);
}

OpenOutcome LambdaFs::open(Side side, std::string_view path) {
    auto ino = walk(function_for(side), path);
    auto out = locks_.open(side, ino, inode(ino).parent);
    if (out.status == OpenStatus::Granted) after_grant(*locks_.live(out.handle));
    return out;
}

std::vector<Handle> LambdaFs::close(std::uint64_t handle) {
    const auto* live = locks_.live(handle);
    if (!live) throw Error(ErrorCode::DoubleClose, fmt::format("handle {} is not open", handle));
    auto file = live->file;
    auto granted = locks_.close(handle);
    if (inodes_.contains(file) && is_bound(file)) send_sync("close", file);
    for (const auto& g : granted) after_grant(g);
    return granted;
}

void LambdaFs::crash_recover() {
    locks_.clear();
    vfs_.invalidate_all();
}

// --- traces ----------------------------------------------------------------

std::vector<TraceEvent> parse_trace(std::string_view text) {
    std::vector<TraceEvent> out;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream words(line);
        std::vector<std::string> tok;
        for (std::string w; words >> w;) tok.push_back(w);
        if (tok.empty()) continue;
        auto bad = [&](std::string_view why) {
            return Error(ErrorCode::InvalidArgument, fmt::format("trace line {}: {}", lineno, why));
        };
        TraceEvent e;
        if (tok[0] == "open") e.op = TraceOp::Open;
        else if (tok[0] == "close") e.op = TraceOp::Close;
        else if (tok[0] == "bind") e.op = TraceOp::Bind;
        else if (tok[0] == "crash") e.op = TraceOp::Crash;
        else throw bad(fmt::format("unknown op '{}'", tok[0]));
        if (e.op == TraceOp::Crash && tok.size() == 1) {
            out.push_back(e);
            continue;
        }
        if (tok.size() < 3) throw bad("expected <op> <side> <path>");
        if (tok[1] == "host") e.side = Side::Host;
        else if (tok[1] == "container") e.side = Side::Container;
        else throw bad(fmt::format("unknown side '{}'", tok[1]));
        e.path = tok[2];
        if (e.path.front() != '/') throw bad("path must be absolute");
        if (tok.size() == 4) {
            if (e.op != TraceOp::Open) throw bad("only open takes an outcome");
            if (tok[3] == "grant") e.expect = OpenStatus::Granted;
            else if (tok[3] == "block") e.expect = OpenStatus::Blocked;
            else throw bad(fmt::format("unknown outcome '{}'", tok[3]));
        } else if (tok.size() > 4) {
            throw bad("trailing tokens");
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::string format_event(const TraceEvent& e) {
    static constexpr std::string_view kOps[] = {"open", "close", "bind", "crash"};
    auto op = kOps[static_cast<int>(e.op)];
    if (e.op == TraceOp::Crash && e.path.empty()) return std::string(op);
    auto line = fmt::format("{} {} {}", op, to_string(e.side), e.path);
    if (e.expect) line += *e.expect == OpenStatus::Granted ? " grant" : " block";
    return line;
}

TraceRun run_trace(LambdaFs& fs, const std::vector<TraceEvent>& events) {
    struct Opened {
        std::uint64_t id;
        Side side;
        std::string path;
    };
    std::vector<Opened> opened;
    TraceRun run;
    for (const auto& e : events) {
        switch (e.op) {
        case TraceOp::Bind:
            fs.bind(e.path);
            run.lines.push_back(format_event(e));
            break;
        case TraceOp::Open: {
            auto out = fs.open(e.side, e.path);
            opened.push_back({out.handle, e.side, e.path});
            auto actual = e;
            actual.expect = out.status;
            auto line = format_event(actual);
            if (e.expect && *e.expect != out.status) {
                ++run.mismatches;
                line += fmt::format("  # expected {}", *e.expect == OpenStatus::Granted ? "grant" : "block");
            }
            run.lines.push_back(line);
            break;
        }
        case TraceOp::Close: {
            auto it = std::find_if(opened.begin(), opened.end(), [&](const Opened& o) {
                return o.side == e.side && o.path == e.path && fs.locks().live(o.id);
            });
            if (it == opened.end())
                throw Error(ErrorCode::DoubleClose, fmt::format("{} holds nothing on {}", to_string(e.side), e.path));
            auto granted = fs.close(it->id);
            opened.erase(it);
            run.lines.push_back(format_event(e));
            for (const auto& g : granted) {
                auto w = std::find_if(opened.begin(), opened.end(), [&](const Opened& o) { return o.id == g.id; });
                run.lines.push_back(fmt::format("# granted {} {}", to_string(g.side), w->path));
            }
            break;
        }
        case TraceOp::Crash:
            fs.crash_recover();
            opened.clear();
            run.lines.push_back(format_event(e));
            break;
        }
    }
    return run;
}

}  // namespace csd::fs
