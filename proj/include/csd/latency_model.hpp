#pragma once

// Analytical end-to-end latency breakdown: workload counts times calibrated
// unit costs, per processing model, plus the fit that calibrates those costs
// against published ratios and a replay mode that runs small workloads
// through the simulator for a cross-check.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "csd/common.hpp"

namespace csd::latency {

enum class Component { Network, KernelCtx, LbaSet, Storage, System, Compute };
inline constexpr std::size_t kComponentCount = 6;
/// "Network", "Kernel-ctx", "LBA-set", "Storage", "System", "Compute".
std::string_view to_string(Component c) noexcept;

enum class ModelKind { Host, PIspR, PIspV, DNaive, DFullOs, DVirtFw };
inline constexpr std::array<ModelKind, 6> kAllModels{ModelKind::Host,   ModelKind::PIspR,   ModelKind::PIspV,
                                                     ModelKind::DNaive, ModelKind::DFullOs, ModelKind::DVirtFw};
/// "Host", "P.ISP-R", "P.ISP-V", "D-Naive", "D-FullOS", "D-VirtFW".
std::string_view to_string(ModelKind m) noexcept;
/// Throws InvalidArgument.
ModelKind parse_model(std::string_view text);

// --- workloads -------------------------------------------------------------

inline constexpr double kMinSectorBytes = 512;

struct WorkloadDescriptor {
    std::string program;
    std::string name;
    double io_bytes = 0;
    double io_count = 0;
    double syscall_count = 0;
    double path_walk_count = 0;
    double files_opened = 0;
    double tcp_packets = 0;
    double exec_time_s = 0;

    /// Throws InvalidArgument for negative or non-finite counts, or fewer
    /// bytes than one sector per request.
    void validate() const;
};

/// "1.3GB", "317K", "5.4M", "8s", "260". Decimal multipliers.
double parse_quantity(std::string_view text);

/// Header `program,workload,io_size,io_count,syscalls,path_walks,
/// files_opened,tcp_packets,exec_time`. Throws InvalidArgument.
std::vector<WorkloadDescriptor> parse_workloads_csv(std::string_view text);
/// The 13 measured workloads shipped in data/workloads.csv.
const std::vector<WorkloadDescriptor>& table_workloads();

// --- costs -----------------------------------------------------------------

/// Named unit costs. Times are nanoseconds, the rest are dimensionless.
class CostTable {
public:
    CostTable() = default;
    explicit CostTable(std::map<std::string, double> values);

    /// Throws MissingCalibration.
    double at(const std::string& name) const;
    bool has(const std::string& name) const { return values_.contains(name); }
    void set(const std::string& name, double value);
    void erase(const std::string& name) { values_.erase(name); }
    const std::map<std::string, double>& values() const noexcept { return values_; }

    nlohmann::json to_json() const;
    /// Only known parameter names with finite non-negative numbers.
    /// Throws InvalidArgument.
    static CostTable from_json(const nlohmann::json& j);
    /// The documented starting point in data/cost_defaults.json.
    static const CostTable& defaults();

private:
    std::map<std::string, double> values_;
};

/// Every name a cost table may hold.
const std::vector<std::string>& parameter_names();
/// Names `evaluate` reads for a model.
std::vector<std::string> required_parameters(ModelKind m);

struct ProcessingModel {
    ModelKind kind = ModelKind::Host;
    /// Per-model values that take precedence over the cost table.
    std::map<std::string, double> overrides;

    bool active(Component c) const noexcept;
    double param(const std::string& name, const CostTable& table) const;
};

struct Breakdown {
    std::array<double, kComponentCount> ns{};

    double operator[](Component c) const noexcept { return ns[static_cast<std::size_t>(c)]; }
    double& operator[](Component c) noexcept { return ns[static_cast<std::size_t>(c)]; }
    double total() const noexcept;
};

/// Throws MissingCalibration when the table lacks a parameter the model
/// uses, InvalidArgument for an invalid workload.
Breakdown evaluate(const WorkloadDescriptor& w, const ProcessingModel& model, const CostTable& table);

/// Geometric-mean latency ratios over a workload set.
struct RatioMatrix {
    std::vector<ModelKind> models;
    std::vector<std::vector<double>> ratio;  // ratio[i][j]: model i over model j
    std::map<ModelKind, double> versus_virtfw;

    /// Throws InvalidArgument for a model outside the matrix.
    double operator()(ModelKind a, ModelKind b) const;
    double normalized(ModelKind m) const;
};

/// Throws InvalidArgument for fewer than two models or no workloads.
RatioMatrix compare(const std::vector<WorkloadDescriptor>& workloads, const std::vector<ModelKind>& models,
                    const CostTable& table);

struct BreakdownRow {
    std::string workload;
    ModelKind model = ModelKind::Host;
    Breakdown breakdown;
};

/// `workload,model,<six components>,total`, nanoseconds rounded to integers.
std::string breakdown_csv(const std::vector<BreakdownRow>& rows);
std::vector<BreakdownRow> parse_breakdown_csv(std::string_view text);

// --- calibration -----------------------------------------------------------

enum class TargetMetric {
    StorageShare,      // Storage over total for model a
    StorageRatio,      // Storage of a over Storage of b
    CommunicateShare,  // Kernel-ctx plus LBA-set over total for model a
    TotalRatio,        // mean total of a over mean total of b
    LatencyRatio,      // geometric mean of per-workload totals a over b
};

struct CalibrationTarget {
    std::string name;
    TargetMetric metric = TargetMetric::LatencyRatio;
    ModelKind a = ModelKind::Host;
    ModelKind b = ModelKind::Host;
    double value = 1.0;
    /// Acceptable relative deviation of the achieved value.
    double tolerance = 0.1;
};

/// The eleven published fractions and ratios.
const std::vector<CalibrationTarget>& published_targets();

/// Shares and mean ratios average per-workload values normalized by the
/// Host total, so long workloads do not dominate.
double measure(const CalibrationTarget& t, const std::vector<WorkloadDescriptor>& workloads, const CostTable& table);

struct TargetResidual {
    std::string name;
    double target = 0;
    double achieved = 0;
    double relative_error = 0;  // achieved / target - 1
    double tolerance = 0;
    bool within = false;
};

struct FitReport {
    std::vector<TargetResidual> residuals;
    std::vector<std::string> free_parameters;
    std::map<std::string, double> initial;
    std::map<std::string, double> fitted;
    bool underdetermined = false;
    int iterations = 0;
    double cost = 0;  // half the sum of squared residuals, anchor included
    std::string status;

    double max_abs_residual() const;
    std::string to_text() const;
    nlohmann::json to_json() const;
};

const std::vector<std::string>& default_free_parameters();

struct CalibrationOptions {
    std::vector<std::string> free_parameters = default_free_parameters();
    /// Weight of the pull toward the starting values, in log space.
    double anchor_weight = 0.05;
    bool allow_underdetermined = true;
};

struct Calibration {
    CostTable table;
    FitReport report;
};

/// Least squares on log-parameters of the relative target errors plus an
/// anchor toward the starting table. Throws MissingCalibration for unknown
/// free parameters, Underdetermined when there are fewer targets than free
/// parameters and that is not allowed.
Calibration calibrate(const std::vector<CalibrationTarget>& targets, const std::vector<WorkloadDescriptor>& workloads,
                      const CostTable& start, const CalibrationOptions& options = {});

struct SensitivityEntry {
    std::string parameter;
    double factor = 1;
    double max_abs_residual = 0;
    std::string worst_target;
    bool blow_up = false;
};

/// Scales each pinned parameter alone by `factor` and re-measures every
/// target without refitting. A run is flagged when its worst residual
/// passes `blow_up_threshold`.
std::vector<SensitivityEntry> sensitivity_sweep(const std::vector<CalibrationTarget>& targets,
                                                const std::vector<WorkloadDescriptor>& workloads,
                                                const CostTable& fitted, double factor = 10.0,
                                                double blow_up_threshold = 0.25);

// --- replay ----------------------------------------------------------------

inline constexpr std::size_t kReplayEventLimit = 20'000;
inline constexpr SimTime kReplayQuantumNs = 10'000;

struct ReplayResult {
    Breakdown replayed;
    Breakdown analytical;
    /// Block commands, syscalls, frames and scheduler ticks executed.
    std::size_t events = 0;

    /// |replayed / analytical - 1| per component; 0 when both are zero,
    /// infinity when only the analytical side is zero.
    double relative_error(Component c) const;
    double max_relative_error() const;
};

/// Runs the workload's events through the NVMe controller, the firmware
/// syscall emulator, the Ether-oN link and the scheduler with unit costs
/// taken from the table. Path walks cycle over `files_opened` files, two
/// syscalls each (open and close); the remaining syscalls are trivial.
/// Throws InvalidArgument for non-integral counts, fewer than two syscalls
/// per walk, or more than kReplayEventLimit events.
ReplayResult replay(const WorkloadDescriptor& w, const ProcessingModel& model, const CostTable& table);

/// Small workloads (under 1000 events) where every file is walked twice.
std::vector<WorkloadDescriptor> synthetic_workloads(std::size_t count, std::uint64_t seed);

}  // namespace csd::latency
