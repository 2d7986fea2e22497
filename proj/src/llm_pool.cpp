#include "csd/llm_pool.hpp"

#include <cmath>
#include <limits>
#include <set>

#include <fmt/format.h>

#include "embedded_data.hpp"

namespace csd::llm {

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t get_count(const nlohmann::json& obj, const char* key, const std::string& owner) {
    if (!obj.contains(key)) throw Error(ErrorCode::InvalidArgument, fmt::format("{}: missing '{}'", owner, key));
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw Error(ErrorCode::InvalidArgument, fmt::format("{}: '{}' must be a non-negative integer", owner, key));
    return v.get<std::uint64_t>();
}

double get_rate(const nlohmann::json& obj, const char* key, const std::string& owner, bool allow_inf = false) {
    if (!obj.contains(key)) throw Error(ErrorCode::InvalidArgument, fmt::format("{}: missing '{}'", owner, key));
    const auto& v = obj.at(key);
    double x = 0;
    if (v.is_number())
        x = v.get<double>();
    else if (allow_inf && v.is_string() && v.get<std::string>() == "inf")
        x = std::numeric_limits<double>::infinity();
    else
        throw Error(ErrorCode::InvalidArgument, fmt::format("{}: '{}' must be a number", owner, key));
    if (std::isnan(x) || x < 0 || (!allow_inf && std::isinf(x)))
        throw Error(ErrorCode::InvalidArgument, fmt::format("{}: '{}' must be finite and non-negative", owner, key));
    return x;
}

void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known, const std::string& owner) {
    if (!obj.is_object()) throw Error(ErrorCode::InvalidArgument, owner + ": expected a JSON object");
    for (const auto& [k, v] : obj.items())
        if (!known.contains(k)) throw Error(ErrorCode::InvalidArgument, fmt::format("{}: unknown key '{}'", owner, k));
}

double query_width(const Architecture& a) { return double(a.head_count) * double(a.head_dim); }
double kv_width(const Architecture& a) { return double(a.kv_head_count) * double(a.head_dim); }

// Attention FLOPs of one layer for one sequence: 4 * keys * head_dim per head
// and query, summed over the queries evaluated in this step.
double layer_attention(const Architecture& a, double n, bool cached) {
    return cached ? 4.0 * n * query_width(a) : 2.0 * n * (n + 1.0) * query_width(a);
}

struct LayerStep {
    double tokens;  // rows in flight through the matrix products
    double flops;
    double bytes;   // KV reads when cached, activations otherwise
};

LayerStep layer_step(const Architecture& a, double n, double batch, bool cached) {
    const double per_token = 2.0 * a.layer_parameters();
    const double width = double(a.hidden_dim) * double(a.bytes_per_value);
    if (cached) return {batch, batch * (per_token + layer_attention(a, n, true)), batch * 2.0 * width * n};
    return {batch * n, batch * (n * per_token + layer_attention(a, n, false)), batch * width * n};
}

void require_positive(std::uint64_t seq, std::uint64_t batch) {
    if (seq == 0) throw Error(ErrorCode::InvalidArgument, "sequence length must be at least 1");
    if (batch == 0) throw Error(ErrorCode::InvalidArgument, "batch must be at least 1");
}

int ceil_log2(int x) {
    int bits = 0;
    while ((1 << bits) < x) ++bits;
    return bits;
}

double geometric_mean(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += std::log(x);
    return std::exp(s / double(xs.size()));
}

double optimal_total(const Architecture& a, ConfigKind k, const CostModel& c, int nodes, std::uint64_t seq,
                     std::uint64_t batch) {
    return search_plan(a, Deployment{k, nodes, c}, seq, batch).time.total();
}

double cache_speedup(const Architecture& a, const CostModel& c, int nodes, std::uint64_t seq, std::uint64_t batch) {
    return optimal_total(a, ConfigKind::HCache, c, nodes, seq, batch) /
           optimal_total(a, ConfigKind::DCache, c, nodes, seq, batch);
}

}  // namespace

// --- architectures ---------------------------------------------------------

double Architecture::layer_parameters() const noexcept {
    const double d = double(hidden_dim);
    return 2.0 * d * query_width(*this) + 2.0 * d * kv_width(*this) + double(ffn_matrices) * d * double(ffn_dim);
}

double Architecture::formula_ratio() const noexcept {
    return double(layer_count) * layer_parameters() / parameter_count;
}

void Architecture::validate() const {
    if (layer_count == 0 || hidden_dim == 0 || head_count == 0 || head_dim == 0 || kv_head_count == 0 ||
        ffn_dim == 0 || ffn_matrices == 0 || bytes_per_value == 0 || !(parameter_count > 0))
        throw Error(ErrorCode::InvalidArgument, fmt::format("architecture '{}': dimensions must be positive", name));
    if (head_count % kv_head_count != 0)
        throw Error(ErrorCode::InvalidArgument, fmt::format("architecture '{}': heads not a multiple of KV heads", name));
    if (std::abs(formula_ratio() - 1.0) > 0.10)
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("architecture '{}': per-layer formula gives {:.3g} parameters, stated {:.3g}", name,
                                double(layer_count) * layer_parameters(), parameter_count));
}

std::vector<Architecture> parse_architectures(const nlohmann::json& j) {
    reject_unknown(j, {"schema", "architectures"}, "architecture file");
    if (!j.contains("architectures") || !j.at("architectures").is_array())
        throw Error(ErrorCode::InvalidArgument, "architecture file: 'architectures' must be an array");
    std::vector<Architecture> out;
    std::set<std::string> names;
    for (const auto& e : j.at("architectures")) {
        reject_unknown(e,
                       {"name", "parameter_count", "layers", "hidden_dim", "heads", "head_dim", "kv_heads", "ffn_dim",
                        "ffn_matrices", "bytes_per_value", "source"},
                       "architecture");
        if (!e.contains("name") || !e.at("name").is_string())
            throw Error(ErrorCode::InvalidArgument, "architecture: 'name' must be a string");
        Architecture a;
        a.name = e.at("name").get<std::string>();
        a.parameter_count = get_rate(e, "parameter_count", a.name);
        a.layer_count = get_count(e, "layers", a.name);
        a.hidden_dim = get_count(e, "hidden_dim", a.name);
        a.head_count = get_count(e, "heads", a.name);
        a.head_dim = get_count(e, "head_dim", a.name);
        a.kv_head_count = get_count(e, "kv_heads", a.name);
        a.ffn_dim = get_count(e, "ffn_dim", a.name);
        a.ffn_matrices = get_count(e, "ffn_matrices", a.name);
        a.bytes_per_value = get_count(e, "bytes_per_value", a.name);
        a.validate();
        if (!names.insert(a.name).second)
            throw Error(ErrorCode::InvalidArgument, fmt::format("architecture '{}' listed twice", a.name));
        out.push_back(std::move(a));
    }
    return out;
}

const std::vector<Architecture>& shipped_architectures() {
    static const auto archs = parse_architectures(nlohmann::json::parse(data::kLlmArchitecturesJson));
    return archs;
}

const Architecture& find_architecture(std::string_view name) {
    for (const auto& a : shipped_architectures())
        if (a.name == name) return a;
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown architecture '{}'", name));
}

// --- configurations --------------------------------------------------------

std::string_view to_string(ConfigKind k) noexcept {
    switch (k) {
    case ConfigKind::HNoCache: return "H-NoCache";
    case ConfigKind::HCache: return "H-Cache";
    case ConfigKind::DNoCache: return "D-NoCache";
    case ConfigKind::DCache: return "D-Cache";
    }
    return "?";
}

ConfigKind parse_config(std::string_view text) {
    for (auto k : kAllConfigs)
        if (to_string(k) == text) return k;
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown deployment config '{}'", text));
}

nlohmann::json CostModel::to_json() const {
    nlohmann::json j;
    j["cores"] = cores;
    j["flops_per_cycle"] = flops_per_cycle;
    j["host_clock_ghz"] = host_clock_ghz;
    j["device_clock_ghz"] = device_clock_ghz;
    j["half_efficiency_tokens"] = half_efficiency_tokens;
    j["dram_s_per_byte"] = dram_s_per_byte;
    j["flash_s_per_byte"] = flash_s_per_byte;
    j["swap_s_per_byte"] = swap_s_per_byte;
    j["hop_latency_s"] = hop_latency_s;
    if (std::isinf(link_bytes_per_s))
        j["link_bytes_per_s"] = "inf";
    else
        j["link_bytes_per_s"] = link_bytes_per_s;
    j["host_dram_bytes"] = host_dram_bytes;
    j["node_storage_bytes"] = node_storage_bytes;
    return j;
}

CostModel CostModel::from_json(const nlohmann::json& j) {
    const std::string owner = "LLM cost model";
    reject_unknown(j,
                   {"cores", "flops_per_cycle", "host_clock_ghz", "device_clock_ghz", "half_efficiency_tokens",
                    "dram_s_per_byte", "flash_s_per_byte", "swap_s_per_byte", "hop_latency_s", "link_bytes_per_s",
                    "host_dram_bytes", "node_storage_bytes"},
                   owner);
    CostModel c;
    auto cores = get_count(j, "cores", owner);
    if (cores == 0 || cores > 1'000'000) throw Error(ErrorCode::InvalidArgument, owner + ": 'cores' out of range");
    c.cores = int(cores);
    c.flops_per_cycle = get_rate(j, "flops_per_cycle", owner);
    c.host_clock_ghz = get_rate(j, "host_clock_ghz", owner);
    c.device_clock_ghz = get_rate(j, "device_clock_ghz", owner);
    c.half_efficiency_tokens = get_rate(j, "half_efficiency_tokens", owner);
    c.dram_s_per_byte = get_rate(j, "dram_s_per_byte", owner);
    c.flash_s_per_byte = get_rate(j, "flash_s_per_byte", owner);
    c.swap_s_per_byte = get_rate(j, "swap_s_per_byte", owner);
    c.hop_latency_s = get_rate(j, "hop_latency_s", owner);
    c.link_bytes_per_s = get_rate(j, "link_bytes_per_s", owner, true);
    c.host_dram_bytes = get_rate(j, "host_dram_bytes", owner);
    c.node_storage_bytes = get_rate(j, "node_storage_bytes", owner);
    if (c.flops_per_cycle == 0 || c.host_clock_ghz == 0 || c.device_clock_ghz == 0 || c.link_bytes_per_s == 0)
        throw Error(ErrorCode::InvalidArgument, owner + ": throughputs must be positive");
    return c;
}

const CostModel& CostModel::defaults() {
    static const CostModel c = from_json(nlohmann::json::parse(data::kLlmCostsJson));
    return c;
}

void Deployment::validate() const {
    if (node_count < 1)
        throw Error(ErrorCode::InvalidArgument, fmt::format("node count must be at least 1, got {}", node_count));
}

double Deployment::node_flops() const noexcept {
    const double ghz = is_host(kind) ? costs.host_clock_ghz : costs.device_clock_ghz;
    return ghz * 1e9 * costs.cores * costs.flops_per_cycle;
}

double Deployment::access_cost() const noexcept {
    switch (kind) {
    case ConfigKind::HNoCache: return costs.dram_s_per_byte;
    case ConfigKind::HCache: return costs.swap_s_per_byte;
    case ConfigKind::DNoCache:
    case ConfigKind::DCache: return costs.flash_s_per_byte;
    }
    return 0;
}

double Deployment::cache_capacity_bytes() const noexcept {
    switch (kind) {
    case ConfigKind::HCache: return costs.host_dram_bytes + costs.node_storage_bytes;
    case ConfigKind::DCache: return costs.node_storage_bytes;
    default: return 0;
    }
}

// --- plans -----------------------------------------------------------------

PlanCategory category(const ParallelismPlan& p) noexcept {
    if (p.tensor > p.pipeline) return PlanCategory::TensorDominant;
    if (p.pipeline > p.tensor) return PlanCategory::PipelineDominant;
    return PlanCategory::Balanced;
}

std::string_view to_string(PlanCategory c) noexcept {
    switch (c) {
    case PlanCategory::TensorDominant: return "tensor";
    case PlanCategory::PipelineDominant: return "pipeline";
    case PlanCategory::Balanced: return "balanced";
    }
    return "?";
}

std::string describe(const ParallelismPlan& p) {
    return fmt::format("d={} t={} p={}", p.data, p.tensor, p.pipeline);
}

// --- sizing and FLOPs ------------------------------------------------------

std::uint64_t kv_cache_bytes(const Architecture& a, std::uint64_t seq, std::uint64_t batch) {
    require_positive(seq, batch);
    return 2 * a.layer_count * a.hidden_dim * seq * batch * a.bytes_per_value;
}

double flops_per_token(const Architecture& a, std::uint64_t seq, bool cached) {
    require_positive(seq, 1);
    return double(a.layer_count) * layer_step(a, double(seq), 1.0, cached).flops;
}

double attention_flops(const Architecture& a, std::uint64_t seq, bool cached) {
    require_positive(seq, 1);
    return double(a.layer_count) * layer_attention(a, double(seq), cached);
}

double ffn_share(const Architecture& a, std::uint64_t seq, bool cached) {
    require_positive(seq, 1);
    const double rows = cached ? 1.0 : double(seq);
    const double ffn = rows * 2.0 * double(a.ffn_matrices) * double(a.hidden_dim) * double(a.ffn_dim);
    return ffn / (ffn + layer_attention(a, double(seq), cached));
}

// --- timing ----------------------------------------------------------------

std::uint64_t tokens_in_flight(const ParallelismPlan& plan, bool cached) noexcept {
    return cached ? plan.batch : plan.batch * plan.seq;
}

namespace {

void check_plan(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan) {
    dep.validate();
    require_positive(plan.seq, plan.batch);
    if (plan.data < 1 || plan.tensor < 1 || plan.pipeline < 1)
        throw Error(ErrorCode::InvalidArgument, "parallelism degrees must be at least 1");
    if (std::int64_t(plan.data) * plan.tensor * plan.pipeline != dep.node_count)
        throw Error(ErrorCode::IndivisiblePlan,
                    fmt::format("plan {} does not cover {} nodes", describe(plan), dep.node_count));
    if (a.head_count % std::uint64_t(plan.tensor) != 0)
        throw Error(ErrorCode::IndivisiblePlan,
                    fmt::format("tensor degree {} does not divide {} heads", plan.tensor, a.head_count));
    if (a.layer_count % std::uint64_t(plan.pipeline) != 0)
        throw Error(ErrorCode::IndivisiblePlan,
                    fmt::format("pipeline degree {} does not divide {} layers", plan.pipeline, a.layer_count));
    if (is_cached(dep.kind)) {
        double share = double(kv_cache_bytes(a, plan.seq, plan.batch)) / (double(plan.tensor) * plan.pipeline);
        if (share > dep.cache_capacity_bytes())
            throw Error(ErrorCode::CacheOverflow,
                        fmt::format("{} KV cache needs {:.4g} B per node, capacity {:.4g} B", to_string(dep.kind),
                                    share, dep.cache_capacity_bytes()));
    }
}

InferenceTime step_time(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan, std::uint64_t m) {
    const auto& c = dep.costs;
    const double L = double(a.layer_count);
    const double t = plan.tensor;
    const double p = plan.pipeline;
    const double mb = double(m);
    const auto step = layer_step(a, double(plan.seq), double(plan.batch), is_cached(dep.kind));
    const double rows = step.tokens / mb;
    const double efficiency = rows / (rows + c.half_efficiency_tokens);
    const double activation_bytes = rows * double(a.hidden_dim) * double(a.bytes_per_value);

    // Per micro-batch, all layers.
    const double compute = L * (step.flops / mb) / dep.node_flops() / efficiency / t;
    const double memory = L * (step.bytes / mb) * dep.access_cost() / t;
    double all_reduce = 0;
    if (plan.tensor > 1)
        all_reduce = L * 2.0 *
                     (2.0 * (t - 1.0) / t * activation_bytes / c.link_bytes_per_s +
                      ceil_log2(plan.tensor) * c.hop_latency_s);
    const double slots = (p + mb - 1.0) / p;
    const double stage_hops = (p - 1.0) * (c.hop_latency_s + activation_bytes / c.link_bytes_per_s);
    return {compute * slots, (memory + all_reduce) * slots + stage_hops, m};
}

}  // namespace

InferenceTime inference_time(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan,
                             std::uint64_t micro_batches) {
    check_plan(a, dep, plan);
    const auto rows = tokens_in_flight(plan, is_cached(dep.kind));
    if (micro_batches < 1 || micro_batches > rows)
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("micro-batch count {} outside [1, {}]", micro_batches, rows));
    return step_time(a, dep, plan, micro_batches);
}

InferenceTime inference_time(const Architecture& a, const Deployment& dep, const ParallelismPlan& plan) {
    check_plan(a, dep, plan);
    // The total is convex in the micro-batch count, so ternary search finds
    // the integer minimum.
    std::uint64_t lo = 1, hi = tokens_in_flight(plan, is_cached(dep.kind));
    auto total = [&](std::uint64_t m) { return step_time(a, dep, plan, m).total(); };
    while (hi - lo > 2) {
        auto m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
        if (total(m1) <= total(m2))
            hi = m2;
        else
            lo = m1;
    }
    auto best = step_time(a, dep, plan, lo);
    for (auto m = lo + 1; m <= hi; ++m) {
        auto r = step_time(a, dep, plan, m);
        if (r.total() < best.total()) best = r;
    }
    return best;
}

std::vector<ParallelismPlan> enumerate_plans(const Architecture& a, int node_count) {
    if (node_count < 1)
        throw Error(ErrorCode::InvalidArgument, fmt::format("node count must be at least 1, got {}", node_count));
    std::vector<ParallelismPlan> out;
    for (int p = 1; p <= node_count; ++p) {
        if (node_count % p != 0 || a.layer_count % std::uint64_t(p) != 0) continue;
        for (int t = 1; t <= node_count / p; ++t) {
            if ((node_count / p) % t != 0 || a.head_count % std::uint64_t(t) != 0) continue;
            out.push_back(ParallelismPlan{node_count / (p * t), t, p, 1, 1});
        }
    }
    return out;
}

PlanResult search_plan(const Architecture& a, const Deployment& dep, std::uint64_t seq, std::uint64_t batch) {
    dep.validate();
    require_positive(seq, batch);
    std::optional<PlanResult> best;
    for (auto plan : enumerate_plans(a, dep.node_count)) {
        plan.seq = seq;
        plan.batch = batch;
        try {
            auto time = inference_time(a, dep, plan);
            if (!best || time.total() < best->time.total()) best = PlanResult{plan, time};
        } catch (const Error& e) {
            if (e.code() != ErrorCode::CacheOverflow) throw;
        }
    }
    if (!best)
        throw Error(ErrorCode::NoFeasiblePlan,
                    fmt::format("{} on {} nodes: no plan fits seq {} batch {}", a.name, dep.node_count, seq, batch));
    return *best;
}

// --- sweeps ----------------------------------------------------------------

std::optional<std::uint64_t> SweepReport::crossover_seq() const {
    for (const auto& pt : points)
        if (pt.speedup > 1.0) return pt.seq;
    return std::nullopt;
}

double SweepReport::max_speedup() const {
    double best = kNaN;
    for (const auto& pt : points)
        if (std::isfinite(pt.speedup) && !(pt.speedup <= best)) best = pt.speedup;
    return best;
}

SweepReport sweep(const SweepRequest& request) {
    if (request.seqs.empty() || request.batches.empty() || request.configs.empty())
        throw Error(ErrorCode::InvalidArgument, "sweep needs at least one seq, batch and config");
    Deployment{ConfigKind::HNoCache, request.node_count, request.costs}.validate();
    std::optional<std::size_t> host_cache, device_cache;
    for (std::size_t i = 0; i < request.configs.size(); ++i) {
        if (request.configs[i] == ConfigKind::HCache) host_cache = i;
        if (request.configs[i] == ConfigKind::DCache) device_cache = i;
    }
    SweepReport report{request.arch.name, request.configs, {}};
    for (auto seq : request.seqs)
        for (auto batch : request.batches) {
            SweepPoint pt{seq, batch, {}, {}, kNaN};
            for (auto k : request.configs) {
                try {
                    pt.results.push_back(search_plan(request.arch, Deployment{k, request.node_count, request.costs},
                                                     seq, batch));
                    pt.feasible.push_back(true);
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::NoFeasiblePlan) throw;
                    pt.results.push_back(PlanResult{ParallelismPlan{0, 0, 0, batch, seq}, {kNaN, kNaN}});
                    pt.feasible.push_back(false);
                }
            }
            if (host_cache && device_cache && pt.feasible[*host_cache] && pt.feasible[*device_cache])
                pt.speedup = pt.results[*host_cache].time.total() / pt.results[*device_cache].time.total();
            report.points.push_back(std::move(pt));
        }
    return report;
}

std::string sweep_csv(const SweepReport& report) {
    std::string out = "seq,batch";
    for (auto k : report.configs) out += fmt::format(",{0}_s,{0}_plan", to_string(k));
    out += ",speedup\n";
    for (const auto& pt : report.points) {
        out += fmt::format("{},{}", pt.seq, pt.batch);
        for (std::size_t i = 0; i < pt.results.size(); ++i) {
            if (pt.feasible[i])
                out += fmt::format(",{:.17g},{}", pt.results[i].time.total(), describe(pt.results[i].plan));
            else
                out += ",,infeasible";
        }
        out += std::isfinite(pt.speedup) ? fmt::format(",{:.17g}\n", pt.speedup) : std::string(",\n");
    }
    return out;
}

// --- calibration and summaries ----------------------------------------------

std::uint64_t crossover_sequence(const Architecture& a, const CostModel& costs, int node_count, std::uint64_t batch,
                                 std::uint64_t lo, std::uint64_t hi) {
    if (lo == 0 || lo > hi) throw Error(ErrorCode::InvalidArgument, "crossover search needs 1 <= lo <= hi");
    if (cache_speedup(a, costs, node_count, hi, batch) <= 1.0)
        throw Error(ErrorCode::InvalidArgument,
                    fmt::format("{}: device is not faster than host at seq {}", a.name, hi));
    if (cache_speedup(a, costs, node_count, lo, batch) > 1.0) return lo;
    while (hi - lo > 1) {
        auto mid = lo + (hi - lo) / 2;
        if (cache_speedup(a, costs, node_count, mid, batch) > 1.0)
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

double saturation_limit(const Architecture& a, const CostModel& costs, std::uint64_t batch) {
    require_positive(1, batch);
    const double efficiency = double(batch) / (double(batch) + costs.half_efficiency_tokens);
    const double attention = 4.0 * query_width(a) / efficiency;
    const double kv_bytes = 2.0 * double(a.hidden_dim) * double(a.bytes_per_value);
    const Deployment host{ConfigKind::HCache, 1, costs}, device{ConfigKind::DCache, 1, costs};
    return (attention / host.node_flops() + kv_bytes * host.access_cost()) /
           (attention / device.node_flops() + kv_bytes * device.access_cost());
}

double calibrate_swap_cost(const Architecture& a, const CostModel& costs, int node_count, std::uint64_t seq,
                           double target) {
    CostModel c = costs;
    double lo = costs.flash_s_per_byte, hi = 1000.0 * costs.flash_s_per_byte;
    for (int i = 0; i < 200 && lo < hi; ++i) {
        c.swap_s_per_byte = 0.5 * (lo + hi);
        if (cache_speedup(a, c, node_count, seq, 1) < target)
            lo = c.swap_s_per_byte;
        else
            hi = c.swap_s_per_byte;
    }
    return 0.5 * (lo + hi);
}

double nocache_device_ratio(const std::vector<Architecture>& archs, const CostModel& costs, int node_count,
                            std::uint64_t seq) {
    if (archs.empty()) throw Error(ErrorCode::InvalidArgument, "no architectures");
    std::vector<double> ratios;
    for (const auto& a : archs) {
        auto host = search_plan(a, Deployment{ConfigKind::HNoCache, node_count, costs}, seq, 1);
        auto device = inference_time(a, Deployment{ConfigKind::DNoCache, node_count, costs}, host.plan);
        ratios.push_back(device.total() / host.time.total());
    }
    return geometric_mean(ratios);
}

std::vector<AggregateResidual> aggregate_residuals(const std::vector<Architecture>& archs, const CostModel& costs,
                                                   int node_count, std::uint64_t seq) {
    if (archs.empty()) throw Error(ErrorCode::InvalidArgument, "no architectures");
    struct Pair {
        ConfigKind num, den;
        double target;
    };
    const Pair pairs[] = {{ConfigKind::HNoCache, ConfigKind::HCache, 421},
                          {ConfigKind::DNoCache, ConfigKind::DCache, 4600},
                          {ConfigKind::HCache, ConfigKind::DCache, 7.9},
                          {ConfigKind::HNoCache, ConfigKind::DCache, 3200}};
    std::vector<AggregateResidual> out;
    for (const auto& pr : pairs) {
        std::vector<double> ratios;
        for (const auto& a : archs)
            ratios.push_back(optimal_total(a, pr.num, costs, node_count, seq, 1) /
                             optimal_total(a, pr.den, costs, node_count, seq, 1));
        double g = geometric_mean(ratios);
        out.push_back({fmt::format("{}/{}", to_string(pr.num), to_string(pr.den)), pr.target, g, g / pr.target - 1.0});
    }
    return out;
}

}  // namespace csd::llm
