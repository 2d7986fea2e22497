#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <vector>

#include "csd/common.hpp"

namespace csd {

/// Single-threaded discrete-event loop. Events at equal timestamps run in
/// scheduling order, which keeps every run deterministic.
class EventLoop {
public:
    using Action = std::function<void()>;

    void schedule_at(SimTime at, Action action) {
        queue_.push(Entry{at < now_ ? now_ : at, seq_++, std::move(action)});
    }
    void schedule_in(SimTime delay, Action action) { schedule_at(now_ + delay, std::move(action)); }

    /// Runs one event. Returns false when the queue is empty.
    bool step() {
        if (queue_.empty()) return false;
        auto entry = queue_.top();
        queue_.pop();
        now_ = entry.at;
        entry.action();
        ++executed_;
        return true;
    }

    void run() {
        while (step()) {}
    }

    void run_until(SimTime limit) {
        while (!queue_.empty() && queue_.top().at <= limit) step();
        if (now_ < limit) now_ = limit;
    }

    SimTime now() const noexcept { return now_; }
    bool idle() const noexcept { return queue_.empty(); }
    std::uint64_t executed() const noexcept { return executed_; }

private:
    struct Entry {
        SimTime at;
        std::uint64_t seq;
        Action action;
    };
    struct Later {
        bool operator()(const Entry& a, const Entry& b) const {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };

    std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
    SimTime now_ = 0;
    std::uint64_t seq_ = 0;
    std::uint64_t executed_ = 0;
};

}  // namespace csd
