#pragma once

// Analytical model of distributed LLM decoding over a pool of nodes: KV-cache
// sizing, per-token FLOPs, compute and memory time under a parallelism plan,
// exhaustive plan search and sequence/batch sweeps for the four deployment
// configurations.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "csd/common.hpp"

namespace csd::llm {

struct Architecture {
    std::string name;
    double parameter_count = 0;
    std::uint64_t layer_count = 0;
    std::uint64_t hidden_dim = 0;
    std::uint64_t head_count = 0;
    std::uint64_t head_dim = 0;
    std::uint64_t kv_head_count = 0;
    std::uint64_t ffn_dim = 0;
    std::uint64_t ffn_matrices = 2;  // 3 for gated units
    std::uint64_t bytes_per_value = 2;

    /// Attention projections plus FFN weights of one layer.
    double layer_parameters() const noexcept;
    /// layer_count * layer_parameters() / parameter_count.
    double formula_ratio() const noexcept;
    /// Throws InvalidArgument for zero dimensions or a formula more than 10%
    /// away from the stated parameter count.
    void validate() const;
};

/// `{"architectures": [...]}` with the keys documented in
/// data/llm_architectures.json. Unknown keys are rejected.
std::vector<Architecture> parse_architectures(const nlohmann::json& j);
const std::vector<Architecture>& shipped_architectures();
/// Throws InvalidArgument.
const Architecture& find_architecture(std::string_view name);

enum class ConfigKind { HNoCache, HCache, DNoCache, DCache };
inline constexpr std::array<ConfigKind, 4> kAllConfigs{ConfigKind::HNoCache, ConfigKind::HCache, ConfigKind::DNoCache,
                                                       ConfigKind::DCache};
std::string_view to_string(ConfigKind k) noexcept;
/// Throws InvalidArgument.
ConfigKind parse_config(std::string_view text);
constexpr bool is_host(ConfigKind k) noexcept { return k == ConfigKind::HNoCache || k == ConfigKind::HCache; }
constexpr bool is_cached(ConfigKind k) noexcept { return k == ConfigKind::HCache || k == ConfigKind::DCache; }

/// Calibrated rates, shipped in data/llm_costs.json.
struct CostModel {
    int cores = 8;
    double flops_per_cycle = 32;
    double host_clock_ghz = 3.8;
    double device_clock_ghz = 2.2;
    /// Tokens in flight at which compute runs at half its peak rate.
    double half_efficiency_tokens = 0.75;
    double dram_s_per_byte = 0;
    double flash_s_per_byte = 0;
    /// Host access to a KV cache that spills through swap.
    double swap_s_per_byte = 0;
    double hop_latency_s = 0;
    double link_bytes_per_s = 0;
    double host_dram_bytes = 64e9;
    double node_storage_bytes = 400e9;

    nlohmann::json to_json() const;
    /// Every key required, no others, non-negative finite values except an
    /// infinite link bandwidth. Throws InvalidArgument.
    static CostModel from_json(const nlohmann::json& j);
    static const CostModel& defaults();
};

struct Deployment {
    ConfigKind kind = ConfigKind::HNoCache;
    int node_count = 1;
    CostModel costs;

    /// Throws InvalidArgument for fewer than one node.
    void validate() const;
    /// Peak FLOP/s of one node.
    double node_flops() const noexcept;
    /// Seconds per byte of KV cache or activation traffic.
    double access_cost() const noexcept;
    /// Per-node bytes available for the KV cache; 0 for uncached configs.
    double cache_capacity_bytes() const noexcept;
};

struct ParallelismPlan {
    int data = 1;
    int tensor = 1;
    int pipeline = 1;
    /// Sequences decoded together by one data-parallel replica.
    std::uint64_t batch = 1;
    std::uint64_t seq = 1;
};

enum class PlanCategory { TensorDominant, PipelineDominant, Balanced };
PlanCategory category(const ParallelismPlan& p) noexcept;
std::string_view to_string(PlanCategory c) noexcept;
/// "d=1 t=32 p=1".
std::string describe(const ParallelismPlan& p);

struct InferenceTime {
    double compute_s = 0;
    /// KV or activation traffic plus inter-node communication.
    double memory_s = 0;
    /// Pipeline micro-batches the step was split into.
    std::uint64_t micro_batches = 1;
    double total() const noexcept { return compute_s + memory_s; }
};

/// 2 * layers * hidden * seq * batch * bytes_per_value.
/// Throws InvalidArgument for zero seq or batch.
std::uint64_t kv_cache_bytes(const Architecture& a, std::uint64_t seq, std::uint64_t batch);

/// FLOPs of one decoding step at context `seq` for one sequence, all layers.
/// With a cache only the newest token is projected and attends to `seq`
/// keys; without one every position is recomputed under causal attention.
double flops_per_token(const Architecture& a, std::uint64_t seq, bool cached);
/// Attention-score and value-mixing part of flops_per_token.
double attention_flops(const Architecture& a, std::uint64_t seq, bool cached);
/// FFN FLOPs over FFN plus attention FLOPs of one step.
double ffn_share(const Architecture& a, std::uint64_t seq, bool cached);

/// Time for one decoding step with the tokens in flight split into
/// `micro_batches` equal pipeline micro-batches, each running at the
/// efficiency of its own size. The pipeline takes pipeline + micro_batches - 1
/// stage slots. Throws IndivisiblePlan when the tensor degree does not divide
/// the heads, the pipeline degree does not divide the layers or the degrees
/// do not multiply to the node count; CacheOverflow when the per-node share
/// of the KV cache exceeds the capacity of a cached config; InvalidArgument
/// for zero degrees, seq or batch, or a micro-batch count outside
/// [1, tokens in flight].
InferenceTime inference_time(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan,
                             std::uint64_t micro_batches);
/// As above with the micro-batch count that minimizes the total.
InferenceTime inference_time(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan);
/// Rows in flight per layer: the batch with a cache, batch * seq without.
std::uint64_t tokens_in_flight(const ParallelismPlan& plan, bool cached) noexcept;

/// Divisible factorizations of `node_count`, ordered by pipeline, tensor,
/// then data degree. Batch and seq are left at 1.
std::vector<ParallelismPlan> enumerate_plans(const Architecture& a, int node_count);

struct PlanResult {
    ParallelismPlan plan;
    InferenceTime time;
};

/// Minimal total over enumerate_plans; the first plan in that order wins a
/// tie. Throws NoFeasiblePlan when every plan overflows the cache.
PlanResult search_plan(const Architecture& a, const Deployment& dep, std::uint64_t seq, std::uint64_t batch);

struct SweepRequest {
    Architecture arch;
    std::vector<ConfigKind> configs;
    std::vector<std::uint64_t> seqs;
    std::vector<std::uint64_t> batches;
    int node_count = 32;
    CostModel costs = CostModel::defaults();
};

struct SweepPoint {
    std::uint64_t seq = 0;
    std::uint64_t batch = 0;
    /// Parallel to SweepRequest::configs.
    std::vector<PlanResult> results;
    std::vector<bool> feasible;
    /// H-Cache over D-Cache total, NaN when either is absent or infeasible.
    double speedup = 0;
};

struct SweepReport {
    std::string arch;
    std::vector<ConfigKind> configs;
    std::vector<SweepPoint> points;

    /// Seq of the first point whose speedup exceeds 1.
    std::optional<std::uint64_t> crossover_seq() const;
    /// Largest finite speedup, NaN when there is none.
    double max_speedup() const;
};

/// Every seq crossed with every batch, seq-major. Throws InvalidArgument for
/// empty ranges or configs and for a bad node count.
SweepReport sweep(const SweepRequest& request);
/// `seq,batch,<config>_s,<config>_plan...,speedup`.
std::string sweep_csv(const SweepReport& report);

/// Smallest seq in [lo, hi] with D-Cache faster than H-Cache, found by
/// bisection; assumes the speedup grows with seq. Throws InvalidArgument
/// when the speedup at `hi` does not exceed 1.
std::uint64_t crossover_sequence(const Architecture& a, const CostModel& costs, int node_count,
                                 std::uint64_t batch = 1, std::uint64_t lo = 16, std::uint64_t hi = 65536);

/// Limit of the D-Cache over H-Cache speedup as seq grows, where attention
/// compute and KV traffic dominate every other term.
double saturation_limit(const Architecture& a, const CostModel& costs, std::uint64_t batch = 1);

/// Swap cost per byte that makes the speedup at `seq` equal `target`, by
/// bisection between the flash cost and 1000 times it.
double calibrate_swap_cost(const Architecture& a, const CostModel& costs, int node_count, std::uint64_t seq,
                           double target);

/// Geometric mean over architectures of D-NoCache over H-NoCache, both run
/// at the host's optimal plan.
double nocache_device_ratio(const std::vector<Architecture>& archs, const CostModel& costs, int node_count,
                            std::uint64_t seq);

struct AggregateResidual {
    std::string name;  // "H-NoCache/H-Cache"
    double target = 0;
    double achieved = 0;
    double relative_error = 0;  // achieved / target - 1
};

/// Geometric-mean ratios of optimal totals over architectures for the four
/// published aggregate comparisons.
std::vector<AggregateResidual> aggregate_residuals(const std::vector<Architecture>& archs, const CostModel& costs,
                                                   int node_count, std::uint64_t seq);

}  // namespace csd::llm
