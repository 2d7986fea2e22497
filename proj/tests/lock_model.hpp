#pragma once

// Exhaustive checker for the inode lock protocol. Every sequence of
// open/close events from two sides over two files in one directory is
// replayed against InodeLockTable and compared with a handle-count oracle
// that knows nothing about the table's internals.

#include <algorithm>
#include <array>
#include <deque>
#include <string>
#include <vector>

#include "csd/lambda_fs.hpp"

namespace lock_model {

using csd::Side;
using csd::fs::Ino;

inline constexpr Ino kDir = 2;
inline constexpr std::array<Ino, 2> kFiles{3, 4};

struct OracleHandle {
    std::uint64_t id;
    Side side;
    Ino file;
};

struct Oracle {
    std::vector<OracleHandle> live;
    std::deque<OracleHandle> waiting;

    int count(Ino ino, Side side) const {
        int n = 0;
        for (const auto& h : live)
            if (h.side == side && (h.file == ino || kDir == ino)) ++n;
        return n;
    }
    bool may_open(Side side, Ino file) const {
        auto other = csd::opposite(side);
        return count(file, other) == 0 && count(kDir, other) == 0;
    }
    bool blocked(Side side) const {
        return std::any_of(waiting.begin(), waiting.end(), [&](const OracleHandle& h) { return h.side == side; });
    }
    std::vector<std::uint64_t> admit_waiters() {
        std::vector<std::uint64_t> granted;
        for (auto it = waiting.begin(); it != waiting.end();) {
            if (may_open(it->side, it->file)) {
                live.push_back(*it);
                granted.push_back(it->id);
                it = waiting.erase(it);
            } else {
                ++it;
            }
        }
        return granted;
    }
};

struct Event {
    bool open;
    Side side;
    int file;
};

struct Report {
    std::uint64_t traces = 0;
    std::uint64_t events = 0;
    std::uint64_t grants = 0;
    std::uint64_t blocks = 0;
    std::uint64_t exclusion_violations = 0;
    std::uint64_t grant_rule_violations = 0;
    std::uint64_t crash_violations = 0;
    std::string first_failure;

    bool ok() const { return exclusion_violations == 0 && grant_rule_violations == 0 && crash_violations == 0; }
};

inline std::string describe(const std::vector<Event>& trace) {
    std::string out;
    for (const auto& e : trace) {
        out += e.open ? "open " : "close ";
        out += std::string(csd::to_string(e.side)) + " /d/" + (e.file == 0 ? "a" : "b") + "; ";
    }
    return out;
}

class Checker {
public:
    explicit Checker(int max_length) : max_length_(max_length) {}

    Report run() {
        csd::fs::InodeLockTable table;
        Oracle oracle;
        std::vector<Event> trace;
        visit(table, oracle, trace);
        return report_;
    }

private:
    void fail(std::uint64_t& counter, const std::vector<Event>& trace, const std::string& what) {
        ++counter;
        if (report_.first_failure.empty()) report_.first_failure = what + " after: " + describe(trace);
    }

    void check_state(const csd::fs::InodeLockTable& table, const Oracle& oracle, const std::vector<Event>& trace) {
        // (a) no inode has live handles from both sides.
        for (Ino ino : {kDir, kFiles[0], kFiles[1]}) {
            if (oracle.count(ino, Side::Host) > 0 && oracle.count(ino, Side::Container) > 0)
                fail(report_.exclusion_violations, trace, "oracle cross-side handles");
            bool host = false, container = false;
            for (const auto& [id, h] : table.live_handles()) {
                if (h.file != ino && h.dir != ino) continue;
                (h.side == Side::Host ? host : container) = true;
            }
            if (host && container) fail(report_.exclusion_violations, trace, "table cross-side handles");
            for (Side s : {Side::Host, Side::Container})
                if (static_cast<int>(table.refcount(ino, s)) != oracle.count(ino, s))
                    fail(report_.grant_rule_violations, trace, "refcount differs from live handle count");
        }
        // (c) a crash here leaves nothing behind.
        auto crashed = table;
        crashed.clear();
        for (Ino ino : {kDir, kFiles[0], kFiles[1]})
            if (crashed.refcount(ino) != 0 || crashed.holder(ino)) fail(report_.crash_violations, trace, "lock survived crash");
        if (crashed.live_count() != 0 || crashed.waiting_count() != 0)
            fail(report_.crash_violations, trace, "handle survived crash");
    }

    void visit(const csd::fs::InodeLockTable& table, const Oracle& oracle, std::vector<Event>& trace) {
        check_state(table, oracle, trace);
        ++report_.traces;
        if (static_cast<int>(trace.size()) == max_length_) return;
        for (Side side : {Side::Host, Side::Container}) {
            if (oracle.blocked(side)) continue;
            for (int f = 0; f < 2; ++f) {
                for (bool open : {true, false}) {
                    auto next_table = table;
                    auto next_oracle = oracle;
                    trace.push_back({open, side, f});
                    ++report_.events;
                    if (open) {
                        bool expect = next_oracle.may_open(side, kFiles[f]);
                        bool rule = next_table.refcount(kFiles[f], csd::opposite(side)) == 0 &&
                                    next_table.refcount(kDir, csd::opposite(side)) == 0;
                        auto out = next_table.open(side, kFiles[f], kDir);
                        bool granted = out.status == csd::fs::OpenStatus::Granted;
                        if (granted != expect || granted != rule)
                            fail(report_.grant_rule_violations, trace, "grant decision");
                        OracleHandle h{out.handle, side, kFiles[f]};
                        if (granted) {
                            next_oracle.live.push_back(h);
                            ++report_.grants;
                        } else {
                            next_oracle.waiting.push_back(h);
                            ++report_.blocks;
                        }
                    } else {
                        auto it = std::find_if(next_oracle.live.begin(), next_oracle.live.end(), [&](const OracleHandle& h) {
                            return h.side == side && h.file == kFiles[f];
                        });
                        if (it == next_oracle.live.end()) {
                            trace.pop_back();
                            --report_.events;
                            continue;
                        }
                        auto id = it->id;
                        next_oracle.live.erase(it);
                        auto expected = next_oracle.admit_waiters();
                        std::vector<std::uint64_t> got;
                        for (const auto& g : next_table.close(id)) got.push_back(g.id);
                        if (got != expected) fail(report_.grant_rule_violations, trace, "deferred grants");
                        report_.grants += got.size();
                    }
                    visit(next_table, next_oracle, trace);
                    trace.pop_back();
                }
            }
        }
    }

    int max_length_;
    Report report_;
};

}  // namespace lock_model
