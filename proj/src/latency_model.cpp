#include "csd/latency_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Core>
#include <fmt/format.h>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "csd/ether_on.hpp"
#include "csd/lambda_fs.hpp"
#include "csd/nvme.hpp"
#include "csd/virtual_fw.hpp"
#include "embedded_data.hpp"

namespace csd::latency {

namespace {

std::vector<std::string> split_line(std::string_view line) {
    std::vector<std::string> cells;
    std::size_t i = 0;
    while (true) {
        auto j = line.find(',', i);
        cells.emplace_back(line.substr(i, j == std::string_view::npos ? std::string_view::npos : j - i));
        if (j == std::string_view::npos) break;
        i = j + 1;
    }
    return cells;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        auto j = text.find('\n', i);
        if (j == std::string_view::npos) j = text.size();
        auto line = text.substr(i, j - i);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) out.push_back(line);
        i = j + 1;
    }
    return out;
}

double parse_number(std::string_view text, const char* what) {
    double v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty())
        throw Error(ErrorCode::InvalidArgument, fmt::format("bad {} '{}'", what, text));
    return v;
}

bool device_side(ModelKind m) { return m != ModelKind::Host; }
bool isp(ModelKind m) { return m == ModelKind::PIspR || m == ModelKind::PIspV; }

}  // namespace

std::string_view to_string(Component c) noexcept {
    switch (c) {
    case Component::Network: return "Network";
    case Component::KernelCtx: return "Kernel-ctx";
    case Component::LbaSet: return "LBA-set";
    case Component::Storage: return "Storage";
    case Component::System: return "System";
    case Component::Compute: return "Compute";
    }
    return "?";
}

std::string_view to_string(ModelKind m) noexcept {
    switch (m) {
    case ModelKind::Host: return "Host";
    case ModelKind::PIspR: return "P.ISP-R";
    case ModelKind::PIspV: return "P.ISP-V";
    case ModelKind::DNaive: return "D-Naive";
    case ModelKind::DFullOs: return "D-FullOS";
    case ModelKind::DVirtFw: return "D-VirtFW";
    }
    return "?";
}

ModelKind parse_model(std::string_view text) {
    for (auto m : kAllModels)
        if (to_string(m) == text) return m;
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown processing model '{}'", text));
}

// --- workloads -------------------------------------------------------------

void WorkloadDescriptor::validate() const {
    for (double v : {io_bytes, io_count, syscall_count, path_walk_count, files_opened, tcp_packets, exec_time_s})
        if (!std::isfinite(v) || v < 0)
            throw Error(ErrorCode::InvalidArgument, fmt::format("workload '{}': counts must be finite and non-negative", name));
    if (io_bytes < io_count * kMinSectorBytes)
        throw Error(ErrorCode::InvalidArgument, fmt::format("workload '{}': fewer bytes than one sector per request", name));
}

double parse_quantity(std::string_view text) {
    if (text.empty()) throw Error(ErrorCode::InvalidArgument, "empty quantity");
    double scale = 1;
    if (text.ends_with("GB")) {
        scale = 1e9;
        text.remove_suffix(2);
    } else if (text.ends_with("MB")) {
        scale = 1e6;
        text.remove_suffix(2);
    } else if (text.ends_with("KB")) {
        scale = 1e3;
        text.remove_suffix(2);
    } else if (text.ends_with("K")) {
        scale = 1e3;
        text.remove_suffix(1);
    } else if (text.ends_with("M")) {
        scale = 1e6;
        text.remove_suffix(1);
    } else if (text.ends_with("G")) {
        scale = 1e9;
        text.remove_suffix(1);
    } else if (text.ends_with("s")) {
        text.remove_suffix(1);
    }
    auto v = parse_number(text, "quantity");
    if (v < 0) throw Error(ErrorCode::InvalidArgument, fmt::format("negative quantity '{}'", text));
    // Parse the mantissa as written so 1.3GB is the double nearest 1.3e9.
    return scale == 1 ? v : parse_number(fmt::format("{}e{}", text, static_cast<int>(std::log10(scale))), "quantity");
}

std::vector<WorkloadDescriptor> parse_workloads_csv(std::string_view text) {
    auto lines = lines_of(text);
    if (lines.empty() || lines[0] != "program,workload,io_size,io_count,syscalls,path_walks,files_opened,tcp_packets,exec_time")
        throw Error(ErrorCode::InvalidArgument, "workload table: unexpected header");
    std::vector<WorkloadDescriptor> out;
    for (std::size_t n = 1; n < lines.size(); ++n) {
        auto cells = split_line(lines[n]);
        if (cells.size() != 9)
            throw Error(ErrorCode::InvalidArgument, fmt::format("workload table line {}: expected 9 fields", n + 1));
        WorkloadDescriptor w;
        w.program = cells[0];
        w.name = cells[1];
        w.io_bytes = parse_quantity(cells[2]);
        w.io_count = parse_quantity(cells[3]);
        w.syscall_count = parse_quantity(cells[4]);
        w.path_walk_count = parse_quantity(cells[5]);
        w.files_opened = parse_quantity(cells[6]);
        w.tcp_packets = parse_quantity(cells[7]);
        w.exec_time_s = parse_quantity(cells[8]);
        w.validate();
        out.push_back(std::move(w));
    }
    return out;
}

const std::vector<WorkloadDescriptor>& table_workloads() {
    static const auto table = parse_workloads_csv(data::kWorkloadsCsv);
    return table;
}

// --- costs -----------------------------------------------------------------

const std::vector<std::string>& parameter_names() {
    static const std::vector<std::string> names{
        "io_request_ns",      "io_byte_ns",      "net_packet_ns",       "host_syscall_ns",
        "path_walk_ns",       "compute_share",   "internal_storage_ratio", "device_clock_ratio",
        "ctx_switch_ns",      "rpc_factor",      "lba_handshake_ns",    "emulated_syscall_ns",
        "cached_walk_factor", "fullos_syscall_ns", "os_surcharge",      "copy_byte_ns"};
    return names;
}

std::vector<std::string> required_parameters(ModelKind m) {
    std::vector<std::string> r{"io_request_ns", "io_byte_ns", "net_packet_ns", "path_walk_ns", "compute_share"};
    if (m == ModelKind::Host) {
        r.push_back("host_syscall_ns");
        return r;
    }
    r.insert(r.end(), {"internal_storage_ratio", "device_clock_ratio"});
    switch (m) {
    case ModelKind::PIspR: r.insert(r.end(), {"ctx_switch_ns", "rpc_factor", "lba_handshake_ns"}); break;
    case ModelKind::PIspV: r.insert(r.end(), {"ctx_switch_ns", "lba_handshake_ns"}); break;
    case ModelKind::DVirtFw: r.insert(r.end(), {"emulated_syscall_ns", "cached_walk_factor"}); break;
    case ModelKind::DFullOs: r.insert(r.end(), {"fullos_syscall_ns", "os_surcharge"}); break;
    case ModelKind::DNaive: r.insert(r.end(), {"fullos_syscall_ns", "os_surcharge", "copy_byte_ns"}); break;
    case ModelKind::Host: break;
    }
    return r;
}

CostTable::CostTable(std::map<std::string, double> values) : values_(std::move(values)) {}

double CostTable::at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw Error(ErrorCode::MissingCalibration, fmt::format("cost table has no '{}'", name));
    return it->second;
}

void CostTable::set(const std::string& name, double value) {
    if (std::find(parameter_names().begin(), parameter_names().end(), name) == parameter_names().end())
        throw Error(ErrorCode::InvalidArgument, fmt::format("unknown cost parameter '{}'", name));
    if (!std::isfinite(value) || value < 0)
        throw Error(ErrorCode::InvalidArgument, fmt::format("cost parameter '{}' must be finite and non-negative", name));
    values_[name] = value;
}

nlohmann::json CostTable::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
}

CostTable CostTable::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "cost table must be a JSON object");
    CostTable t;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number()) throw Error(ErrorCode::InvalidArgument, fmt::format("cost parameter '{}' must be a number", k));
        t.set(k, v.get<double>());
    }
    return t;
}

const CostTable& CostTable::defaults() {
    static const CostTable t = from_json(nlohmann::json::parse(data::kCostDefaultsJson));
    return t;
}

bool ProcessingModel::active(Component c) const noexcept {
    switch (c) {
    case Component::KernelCtx:
    case Component::LbaSet: return isp(kind);
    default: return true;
    }
}

double ProcessingModel::param(const std::string& name, const CostTable& table) const {
    auto it = overrides.find(name);
    return it != overrides.end() ? it->second : table.at(name);
}

double Breakdown::total() const noexcept {
    double s = 0;
    for (double v : ns) s += v;
    return s;
}

Breakdown evaluate(const WorkloadDescriptor& w, const ProcessingModel& model, const CostTable& table) {
    w.validate();
    auto p = [&](const char* name) { return model.param(name, table); };
    for (const auto& name : required_parameters(model.kind)) (void)model.param(name, table);

    Breakdown b;
    const double compute_ns = w.exec_time_s * 1e9 * p("compute_share");
    const double host_storage = w.io_count * p("io_request_ns") + w.io_bytes * p("io_byte_ns");
    const double walks = w.path_walk_count * p("path_walk_ns");
    b[Component::Network] = w.tcp_packets * p("net_packet_ns");

    if (model.kind == ModelKind::Host) {
        b[Component::Storage] = host_storage;
        b[Component::System] = w.syscall_count * p("host_syscall_ns") + walks;
        b[Component::Compute] = compute_ns;
        return b;
    }

    b[Component::Storage] = host_storage * p("internal_storage_ratio");
    b[Component::Compute] = compute_ns * p("device_clock_ratio");
    switch (model.kind) {
    case ModelKind::PIspR:
    case ModelKind::PIspV: {
        double crossing = p("ctx_switch_ns") * (model.kind == ModelKind::PIspR ? p("rpc_factor") : 1.0);
        b[Component::KernelCtx] = w.syscall_count * crossing;
        b[Component::LbaSet] = w.files_opened * p("lba_handshake_ns");
        b[Component::System] = walks;
        break;
    }
    case ModelKind::DVirtFw:
        b[Component::System] = w.syscall_count * p("emulated_syscall_ns") + walks * p("cached_walk_factor");
        break;
    case ModelKind::DFullOs:
    case ModelKind::DNaive:
        b[Component::System] = w.syscall_count * p("fullos_syscall_ns") * p("os_surcharge") + walks;
        if (model.kind == ModelKind::DNaive) b[Component::Storage] += w.io_bytes * p("copy_byte_ns");
        break;
    case ModelKind::Host: break;
    }
    return b;
}

double RatioMatrix::operator()(ModelKind a, ModelKind b) const {
    auto pos = [&](ModelKind m) {
        auto it = std::find(models.begin(), models.end(), m);
        if (it == models.end()) throw Error(ErrorCode::InvalidArgument, fmt::format("{} not compared", to_string(m)));
        return static_cast<std::size_t>(it - models.begin());
    };
    return ratio[pos(a)][pos(b)];
}

double RatioMatrix::normalized(ModelKind m) const {
    auto it = versus_virtfw.find(m);
    if (it == versus_virtfw.end()) throw Error(ErrorCode::InvalidArgument, fmt::format("{} not compared", to_string(m)));
    return it->second;
}

namespace {

double geo_ratio(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::log(a[i] / b[i]);
    return std::exp(s / static_cast<double>(a.size()));
}

}  // namespace

RatioMatrix compare(const std::vector<WorkloadDescriptor>& workloads, const std::vector<ModelKind>& models,
                    const CostTable& table) {
    if (models.size() < 2) throw Error(ErrorCode::InvalidArgument, "compare needs at least two models");
    if (workloads.empty()) throw Error(ErrorCode::InvalidArgument, "compare needs at least one workload");
    auto totals = [&](ModelKind m) {
        std::vector<double> t;
        for (const auto& w : workloads) t.push_back(evaluate(w, ProcessingModel{m, {}}, table).total());
        return t;
    };
    RatioMatrix r;
    r.models = models;
    std::vector<std::vector<double>> per_model;
    for (auto m : models) per_model.push_back(totals(m));
    auto baseline = totals(ModelKind::DVirtFw);
    r.ratio.assign(models.size(), std::vector<double>(models.size(), 1.0));
    for (std::size_t i = 0; i < models.size(); ++i) {
        for (std::size_t j = 0; j < models.size(); ++j)
            if (i != j) r.ratio[i][j] = geo_ratio(per_model[i], per_model[j]);
        r.versus_virtfw[models[i]] = models[i] == ModelKind::DVirtFw ? 1.0 : geo_ratio(per_model[i], baseline);
    }
    return r;
}

std::string breakdown_csv(const std::vector<BreakdownRow>& rows) {
    std::string out = "workload,model";
    for (std::size_t c = 0; c < kComponentCount; ++c) out += fmt::format(",{}", to_string(static_cast<Component>(c)));
    out += ",total\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{}", r.workload, to_string(r.model));
        for (double v : r.breakdown.ns) out += fmt::format(",{:.0f}", v);
        out += fmt::format(",{:.0f}\n", r.breakdown.total());
    }
    return out;
}

std::vector<BreakdownRow> parse_breakdown_csv(std::string_view text) {
    auto lines = lines_of(text);
    if (lines.empty() || lines[0] != breakdown_csv({}).substr(0, breakdown_csv({}).size() - 1))
        throw Error(ErrorCode::InvalidArgument, "breakdown CSV: unexpected header");
    std::vector<BreakdownRow> out;
    for (std::size_t n = 1; n < lines.size(); ++n) {
        auto cells = split_line(lines[n]);
        if (cells.size() != kComponentCount + 3)
            throw Error(ErrorCode::InvalidArgument, fmt::format("breakdown CSV line {}: wrong field count", n + 1));
        BreakdownRow r;
        r.workload = cells[0];
        r.model = parse_model(cells[1]);
        for (std::size_t c = 0; c < kComponentCount; ++c) r.breakdown.ns[c] = parse_number(cells[c + 2], "component time");
        out.push_back(std::move(r));
    }
    return out;
}

// --- calibration -----------------------------------------------------------

const std::vector<CalibrationTarget>& published_targets() {
    using M = ModelKind;
    using T = TargetMetric;
    static const std::vector<CalibrationTarget> targets{
        {"host_storage_share", T::StorageShare, M::Host, M::Host, 0.38, 0.10},
        {"isp_storage_ratio", T::StorageRatio, M::PIspR, M::Host, 0.5, 0.10},
        {"isp_communicate_share", T::CommunicateShare, M::PIspR, M::PIspR, 0.43, 0.10},
        {"isp_total_ratio", T::TotalRatio, M::PIspR, M::Host, 1.4, 0.10},
        {"ispv_vs_ispr", T::LatencyRatio, M::PIspV, M::PIspR, 1.0 - 0.137, 0.10},
        {"fullos_vs_ispv", T::LatencyRatio, M::DFullOs, M::PIspV, 1.093, 0.10},
        {"naive_vs_fullos", T::LatencyRatio, M::DNaive, M::DFullOs, 1.128, 0.10},
        {"ispr_vs_virtfw", T::LatencyRatio, M::PIspR, M::DVirtFw, 1.6, 0.15},
        {"ispv_vs_virtfw", T::LatencyRatio, M::PIspV, M::DVirtFw, 1.6, 0.15},
        {"naive_vs_virtfw", T::LatencyRatio, M::DNaive, M::DVirtFw, 1.8, 0.15},
        {"fullos_vs_virtfw", T::LatencyRatio, M::DFullOs, M::DVirtFw, 1.6, 0.15},
    };
    return targets;
}

namespace {

struct Evaluated {
    std::map<ModelKind, std::vector<Breakdown>> per_model;
    std::vector<double> host_totals;
};

Evaluated evaluate_all(const std::vector<WorkloadDescriptor>& workloads, const CostTable& table,
                       const std::vector<CalibrationTarget>& targets) {
    std::set<ModelKind> needed{ModelKind::Host};
    for (const auto& t : targets) needed.insert({t.a, t.b});
    Evaluated e;
    for (auto m : needed)
        for (const auto& w : workloads) e.per_model[m].push_back(evaluate(w, ProcessingModel{m, {}}, table));
    for (const auto& b : e.per_model[ModelKind::Host]) e.host_totals.push_back(b.total());
    return e;
}

double mean_normalized(const Evaluated& e, ModelKind m, std::initializer_list<Component> parts) {
    const auto& bs = e.per_model.at(m);
    double s = 0;
    for (std::size_t i = 0; i < bs.size(); ++i) {
        double v = 0;
        if (parts.size() == 0)
            v = bs[i].total();
        else
            for (auto c : parts) v += bs[i][c];
        s += v / e.host_totals[i];
    }
    return s / static_cast<double>(bs.size());
}

double measure_on(const CalibrationTarget& t, const Evaluated& e) {
    switch (t.metric) {
    case TargetMetric::StorageShare: return mean_normalized(e, t.a, {Component::Storage}) / mean_normalized(e, t.a, {});
    case TargetMetric::StorageRatio:
        return mean_normalized(e, t.a, {Component::Storage}) / mean_normalized(e, t.b, {Component::Storage});
    case TargetMetric::CommunicateShare:
        return mean_normalized(e, t.a, {Component::KernelCtx, Component::LbaSet}) / mean_normalized(e, t.a, {});
    case TargetMetric::TotalRatio: return mean_normalized(e, t.a, {}) / mean_normalized(e, t.b, {});
    case TargetMetric::LatencyRatio: {
        std::vector<double> a, b;
        for (const auto& x : e.per_model.at(t.a)) a.push_back(x.total());
        for (const auto& x : e.per_model.at(t.b)) b.push_back(x.total());
        return geo_ratio(a, b);
    }
    }
    return 0;
}

std::vector<TargetResidual> residuals_for(const std::vector<CalibrationTarget>& targets,
                                          const std::vector<WorkloadDescriptor>& workloads, const CostTable& table) {
    auto e = evaluate_all(workloads, table, targets);
    std::vector<TargetResidual> out;
    for (const auto& t : targets) {
        TargetResidual r;
        r.name = t.name;
        r.target = t.value;
        r.achieved = measure_on(t, e);
        r.relative_error = r.achieved / t.value - 1.0;
        r.tolerance = t.tolerance;
        r.within = std::abs(r.relative_error) <= t.tolerance;
        out.push_back(r);
    }
    return out;
}

struct FitFunctor {
    using Scalar = double;
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

    const std::vector<CalibrationTarget>& targets;
    const std::vector<WorkloadDescriptor>& workloads;
    const CostTable& start;
    const std::vector<std::string>& free;
    Eigen::VectorXd anchor;
    double anchor_weight;

    int inputs() const { return static_cast<int>(free.size()); }
    int values() const { return static_cast<int>(targets.size() + free.size()); }

    CostTable table_for(const Eigen::VectorXd& x) const {
        CostTable t = start;
        for (std::size_t i = 0; i < free.size(); ++i) t.set(free[i], std::exp(x[static_cast<Eigen::Index>(i)]));
        return t;
    }

    int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
        auto res = residuals_for(targets, workloads, table_for(x));
        for (std::size_t i = 0; i < res.size(); ++i) f[static_cast<Eigen::Index>(i)] = res[i].relative_error;
        for (std::size_t i = 0; i < free.size(); ++i) {
            auto k = static_cast<Eigen::Index>(i);
            f[static_cast<Eigen::Index>(res.size() + i)] = anchor_weight * (x[k] - anchor[k]);
        }
        return 0;
    }
};

}  // namespace

double measure(const CalibrationTarget& t, const std::vector<WorkloadDescriptor>& workloads, const CostTable& table) {
    return measure_on(t, evaluate_all(workloads, table, {t}));
}

const std::vector<std::string>& default_free_parameters() {
    static const std::vector<std::string> names{"io_byte_ns",   "compute_share", "internal_storage_ratio",
                                                "ctx_switch_ns", "rpc_factor",   "lba_handshake_ns",
                                                "os_surcharge", "copy_byte_ns",  "device_clock_ratio",
                                                "host_syscall_ns"};
    return names;
}

double FitReport::max_abs_residual() const {
    double m = 0;
    for (const auto& r : residuals) m = std::max(m, std::abs(r.relative_error));
    return m;
}

std::string FitReport::to_text() const {
    std::string out = fmt::format("calibration: {} targets, {} free parameters, {} iterations, status {}\n",
                                  residuals.size(), free_parameters.size(), iterations, status);
    if (underdetermined)
        out += "warning: underdetermined (fewer targets than free parameters); anchored to starting values\n";
    out += fmt::format("{:<24}{:>12}{:>12}{:>10}{:>8}  {}\n", "target", "published", "achieved", "error", "tol", "ok");
    for (const auto& r : residuals)
        out += fmt::format("{:<24}{:>12.4f}{:>12.4f}{:>+9.2f}%{:>7.0f}%  {}\n", r.name, r.target, r.achieved,
                           100 * r.relative_error, 100 * r.tolerance, r.within ? "yes" : "NO");
    out += fmt::format("{:<24}{:>14}{:>14}\n", "parameter", "start", "fitted");
    for (const auto& name : free_parameters)
        out += fmt::format("{:<24}{:>14.6g}{:>14.6g}\n", name, initial.at(name), fitted.at(name));
    return out;
}

nlohmann::json FitReport::to_json() const {
    nlohmann::json j;
    j["status"] = status;
    j["iterations"] = iterations;
    j["cost"] = cost;
    j["underdetermined"] = underdetermined;
    j["free_parameters"] = free_parameters;
    j["initial"] = initial;
    j["fitted"] = fitted;
    j["residuals"] = nlohmann::json::array();
    for (const auto& r : residuals)
        j["residuals"].push_back({{"name", r.name},
                                  {"target", r.target},
                                  {"achieved", r.achieved},
                                  {"relative_error", r.relative_error},
                                  {"tolerance", r.tolerance},
                                  {"within", r.within}});
    return j;
}

Calibration calibrate(const std::vector<CalibrationTarget>& targets, const std::vector<WorkloadDescriptor>& workloads,
                      const CostTable& start, const CalibrationOptions& options) {
    const auto& free = options.free_parameters;
    for (const auto& name : free) (void)start.at(name);
    Calibration c;
    c.report.free_parameters = free;
    c.report.underdetermined = targets.size() < free.size();
    if (c.report.underdetermined && !options.allow_underdetermined)
        throw Error(ErrorCode::Underdetermined,
                    fmt::format("{} targets for {} free parameters", targets.size(), free.size()));
    for (const auto& name : free) c.report.initial[name] = start.at(name);

    c.table = start;
    if (!free.empty()) {
        Eigen::VectorXd x(static_cast<Eigen::Index>(free.size()));
        for (std::size_t i = 0; i < free.size(); ++i) {
            auto v = start.at(free[i]);
            if (v <= 0) throw Error(ErrorCode::InvalidArgument, fmt::format("free parameter '{}' must start positive", free[i]));
            x[static_cast<Eigen::Index>(i)] = std::log(v);
        }
        FitFunctor f{targets, workloads, start, free, x, options.anchor_weight};
        Eigen::NumericalDiff<FitFunctor> numeric(f);
        Eigen::LevenbergMarquardt<Eigen::NumericalDiff<FitFunctor>> lm(numeric);
        lm.parameters.maxfev = 4000;
        auto status = lm.minimize(x);
        c.report.iterations = static_cast<int>(lm.iter);
        c.report.status = fmt::format("{}", static_cast<int>(status));
        c.table = f.table_for(x);
        Eigen::VectorXd fv(f.values());
        f(x, fv);
        c.report.cost = 0.5 * fv.squaredNorm();
    } else {
        c.report.status = "pass-through";
    }
    for (const auto& name : free) c.report.fitted[name] = c.table.at(name);
    c.report.residuals = residuals_for(targets, workloads, c.table);
    if (free.empty()) {
        for (const auto& r : c.report.residuals) c.report.cost += 0.5 * r.relative_error * r.relative_error;
    }
    return c;
}

std::vector<SensitivityEntry> sensitivity_sweep(const std::vector<CalibrationTarget>& targets,
                                                const std::vector<WorkloadDescriptor>& workloads,
                                                const CostTable& fitted, double factor, double blow_up_threshold) {
    const auto& free = default_free_parameters();
    std::vector<SensitivityEntry> out;
    for (const auto& [name, value] : fitted.values()) {
        if (std::find(free.begin(), free.end(), name) != free.end()) continue;
        CostTable t = fitted;
        t.set(name, value * factor);
        SensitivityEntry e;
        e.parameter = name;
        e.factor = factor;
        for (const auto& r : residuals_for(targets, workloads, t)) {
            if (std::abs(r.relative_error) > e.max_abs_residual) {
                e.max_abs_residual = std::abs(r.relative_error);
                e.worst_target = r.name;
            }
        }
        e.blow_up = e.max_abs_residual > blow_up_threshold;
        out.push_back(e);
    }
    return out;
}

// --- replay ----------------------------------------------------------------

double ReplayResult::relative_error(Component c) const {
    double a = analytical[c], r = replayed[c];
    if (a == 0) return r == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(r / a - 1.0);
}

double ReplayResult::max_relative_error() const {
    double m = 0;
    for (std::size_t c = 0; c < kComponentCount; ++c) m = std::max(m, relative_error(static_cast<Component>(c)));
    return m;
}

namespace {

constexpr std::uint64_t kReplayBlocks = 4096;
constexpr std::size_t kReplayWalkDepth = 2;

std::uint64_t whole(double v, const char* what) {
    if (v != std::floor(v) || v > 1e12) throw Error(ErrorCode::InvalidArgument, fmt::format("replay needs a whole {}", what));
    return static_cast<std::uint64_t>(v);
}

SimTime ns(double v) { return static_cast<SimTime>(std::llround(v)); }

nvme::NamespaceTable replay_layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, kReplayBlocks},
                                          {nvme::NamespaceKind::Sharable, kReplayBlocks, kReplayBlocks}};
    return nvme::define_namespaces(spec);
}

std::uint32_t nsid_of(const nvme::NamespaceTable& table, nvme::NamespaceKind kind) {
    for (const auto& ns : table.namespaces())
        if (ns.kind == kind) return ns.nsid;
    throw Error(ErrorCode::NamespaceMissing, "replay layout");
}

/// The builtin catalog with every call at the same price.
vfw::SyscallTable uniform_catalog(SimTime cost_ns, SimTime fullos_ns) {
    std::string csv = "name,handler,category,cost_ns,fullos_ns,alias_of\n";
    for (const auto& e : vfw::SyscallTable::builtin().entries())
        csv += fmt::format("{},{},{},{},{},{}\n", e.name, vfw::to_string(e.handler), e.category, cost_ns, fullos_ns,
                           e.alias_of);
    return vfw::SyscallTable::parse_csv(csv);
}

/// Block reads through the controller; fetch and complete carry the
/// per-request cost and the flash read the per-byte cost of a full block.
double replay_storage(std::uint64_t requests, std::uint64_t bytes, ModelKind kind, const ProcessingModel& model,
                      const CostTable& table, std::size_t& events) {
    if (requests == 0) return 0;
    double scale = device_side(kind) ? model.param("internal_storage_ratio", table) : 1.0;
    double per_request = model.param("io_request_ns", table) * scale;
    nvme::NvmeTiming timing;
    timing.fetch_ns = ns(per_request / 2);
    timing.complete_ns = ns(per_request - static_cast<double>(timing.fetch_ns));
    timing.flash_read_ns = ns(static_cast<double>(nvme::kPageSize) * model.param("io_byte_ns", table) * scale);
    timing.flash_write_ns = timing.flash_read_ns;
    nvme::NvmeController ctl(replay_layout(), timing);
    auto function = device_side(kind) ? nvme::PcieFunction::Firmware : nvme::PcieFunction::Host;
    auto nsid = nsid_of(ctl.namespaces(), device_side(kind) ? nvme::NamespaceKind::Private : nvme::NamespaceKind::Sharable);
    nvme::BlockPort port(ctl, function);

    const auto start = ctl.now();
    std::uint64_t lba = 0;
    double copied = 0;
    for (std::uint64_t i = 0; i < requests; ++i) {
        auto size = bytes / requests + (i < bytes % requests ? 1 : 0);
        for (std::uint64_t done = 0; done < size; done += nvme::kPageSize) {
            (void)port.read(nsid, lba++ % kReplayBlocks);
            copied += static_cast<double>(std::min<std::uint64_t>(nvme::kPageSize, size - done));
            ++events;
        }
    }
    double t = static_cast<double>(ctl.now() - start);
    if (kind == ModelKind::DNaive) t += copied * model.param("copy_byte_ns", table);
    return t;
}

struct SystemReplay {
    double system = 0;
    double kernel_ctx = 0;
    double lba_set = 0;
};

SystemReplay replay_system(std::uint64_t syscalls, std::uint64_t walks, std::uint64_t files, ModelKind kind,
                           const ProcessingModel& model, const CostTable& table, std::size_t& events) {
    SystemReplay out;
    if (syscalls == 0) return out;
    auto p = [&](const char* name) { return model.param(name, table); };
    const double walk = p("path_walk_ns");

    vfw::CostConfig costs;
    costs.walk_lookup_ns = ns(walk / kReplayWalkDepth);
    costs.walk_hit_ns = 0;
    costs.context_switch_ns = 0;
    SimTime emulated = 0, fullos = 0;
    std::size_t cache_capacity = 0;
    switch (kind) {
    case ModelKind::Host:
        costs.mode = vfw::ExecutionMode::Emulated;
        emulated = ns(p("host_syscall_ns"));
        break;
    case ModelKind::PIspR:
    case ModelKind::PIspV:
        costs.mode = vfw::ExecutionMode::FullOs;
        costs.context_switch_ns = ns(p("ctx_switch_ns") * (kind == ModelKind::PIspR ? p("rpc_factor") : 1.0));
        break;
    case ModelKind::DFullOs:
    case ModelKind::DNaive:
        costs.mode = vfw::ExecutionMode::FullOs;
        fullos = ns(p("fullos_syscall_ns") * p("os_surcharge"));
        break;
    case ModelKind::DVirtFw:
        costs.mode = vfw::ExecutionMode::Emulated;
        emulated = ns(p("emulated_syscall_ns"));
        cache_capacity = 2 * files + 16;
        // A full hit costs what the second of two walks saves beyond the
        // cached factor.
        costs.walk_hit_ns = ns(std::max(0.0, (2 * p("cached_walk_factor") - 1) * walk));
        break;
    }

    nvme::NvmeController ctl(replay_layout());
    fs::LambdaFs fs(ctl);
    vfw::IoNodeCache cache(cache_capacity);
    vfw::LambdaFsBackend backend(fs, cache);
    auto catalog = uniform_catalog(emulated, fullos);
    vfw::VirtualFw fw(backend, costs, catalog);

    auto path_of = [](std::uint64_t k) { return fmt::format("/r{}/f", k); };
    for (std::uint64_t k = 0; k < files; ++k) {
        fs.mkdirs(nvme::PcieFunction::Firmware, fmt::format("/r{}", k));
        fs.create(nvme::PcieFunction::Firmware, path_of(k));
    }

    std::set<std::uint64_t> opened;
    for (std::uint64_t i = 0; i < walks; ++i) {
        vfw::SyscallInvocation open;
        open.name = "openat";
        open.path = path_of(i % files);
        auto fd = fw.emulate(open).value;
        if (fd < 0) throw Error(ErrorCode::PathNotFound, open.path);
        opened.insert(i % files);
        vfw::SyscallInvocation close;
        close.name = "close";
        close.args = {fd};
        fw.emulate(close);
    }
    vfw::SyscallInvocation trivial;
    trivial.name = "getpid";
    for (std::uint64_t i = 2 * walks; i < syscalls; ++i) fw.emulate(trivial);
    events += fw.stats().syscalls;

    double system = static_cast<double>(fw.stats().system_ns);
    if (isp(kind)) {
        out.kernel_ctx = static_cast<double>(fw.stats().context_switches * costs.context_switch_ns);
        // The device needs the extent list once per file it has not seen.
        out.lba_set = static_cast<double>(opened.size()) * p("lba_handshake_ns");
    }
    out.system = system - out.kernel_ctx;
    return out;
}

/// Segments a stream sized to `packets` MSS segments and carries each one
/// over the Ether-oN link; the device side counts what it decodes.
double replay_network(std::uint64_t packets, const ProcessingModel& model, const CostTable& table, std::size_t& events) {
    if (packets == 0) return 0;
    nvme::NvmeController ctl(replay_layout());
    ether::EtherOnLink link(ctl);
    ether::TcpSegment header;
    header.src_ip = ether::Ipv4Address::parse("10.0.0.1");
    header.dst_ip = ether::Ipv4Address::parse("10.0.0.2");
    header.src_port = 40000;
    header.dst_port = 80;
    Bytes stream(packets * ether::kTcpMss - ether::kTcpMss / 2, 0x5a);
    std::uint64_t received = 0;
    for (const auto& seg : ether::segment_stream(header, stream)) {
        link.transmit(ether::EthernetFrame::make(ether::mac_for_node(1), ether::mac_for_node(0), ether::kEtherTypeIpv4,
                                                 ether::encode_ipv4_tcp(seg)));
        received += link.device_poll().size();
    }
    events += received;
    return static_cast<double>(received) * model.param("net_packet_ns", table);
}

double replay_compute(double exec_s, ModelKind kind, const ProcessingModel& model, const CostTable& table,
                      std::size_t& events) {
    double need = exec_s * 1e9 * model.param("compute_share", table);
    if (device_side(kind)) need *= model.param("device_clock_ratio", table);
    if (need <= 0) return 0;
    vfw::Scheduler sched(1, kReplayQuantumNs);
    vfw::ThreadRecord thread;
    thread.tid = 1;
    thread.owner = "replay";
    thread.entry = "compute";
    sched.admit(thread);
    while (static_cast<double>(thread.cpu_ns) < need) {
        sched.tick();
        ++events;
    }
    sched.exit(thread.tid);
    return static_cast<double>(thread.cpu_ns);
}

}  // namespace

ReplayResult replay(const WorkloadDescriptor& w, const ProcessingModel& model, const CostTable& table) {
    ReplayResult r;
    r.analytical = evaluate(w, model, table);
    auto requests = whole(w.io_count, "I/O count");
    auto bytes = whole(w.io_bytes, "byte count");
    auto syscalls = whole(w.syscall_count, "syscall count");
    auto walks = whole(w.path_walk_count, "walk count");
    auto files = whole(w.files_opened, "file count");
    auto packets = whole(w.tcp_packets, "packet count");
    if (syscalls < 2 * walks) throw Error(ErrorCode::InvalidArgument, "replay needs two syscalls per path walk");
    if (walks > 0 && files == 0) throw Error(ErrorCode::InvalidArgument, "replay needs files to walk");
    double ticks = w.exec_time_s * 1e9 * model.param("compute_share", table) *
                   (device_side(model.kind) ? model.param("device_clock_ratio", table) : 1.0) / kReplayQuantumNs;
    double blocks = 0;
    if (requests > 0) blocks = static_cast<double>(requests) * std::ceil(static_cast<double>(bytes / requests + 1) / nvme::kPageSize);
    if (blocks + static_cast<double>(syscalls + packets) + ticks > static_cast<double>(kReplayEventLimit))
        throw Error(ErrorCode::InvalidArgument, fmt::format("workload '{}' is too large to replay", w.name));

    r.replayed[Component::Storage] = replay_storage(requests, bytes, model.kind, model, table, r.events);
    auto sys = replay_system(syscalls, walks, files, model.kind, model, table, r.events);
    r.replayed[Component::System] = sys.system;
    r.replayed[Component::KernelCtx] = sys.kernel_ctx;
    r.replayed[Component::LbaSet] = sys.lba_set;
    r.replayed[Component::Network] = replay_network(packets, model, table, r.events);
    r.replayed[Component::Compute] = replay_compute(w.exec_time_s, model.kind, model, table, r.events);
    return r;
}

std::vector<WorkloadDescriptor> synthetic_workloads(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&](std::uint64_t lo, std::uint64_t hi) { return lo + rng() % (hi - lo + 1); };
    std::vector<WorkloadDescriptor> out;
    for (std::size_t i = 0; i < count; ++i) {
        WorkloadDescriptor w;
        w.program = "synthetic";
        w.name = fmt::format("synthetic-{}-{}", seed, i);
        auto files = uniform(5, 40);
        auto requests = uniform(50, 250);
        w.files_opened = static_cast<double>(files);
        w.path_walk_count = static_cast<double>(2 * files);
        w.syscall_count = static_cast<double>(4 * files + uniform(0, 200));
        w.io_count = static_cast<double>(requests);
        // Request sizes from one sector to one block, not always aligned.
        w.io_bytes = static_cast<double>(requests * uniform(1, 7) * 512 + uniform(0, requests - 1));
        w.tcp_packets = rng() % 4 == 0 ? 0.0 : static_cast<double>(uniform(20, 150));
        w.exec_time_s = static_cast<double>(uniform(500, 1200)) * 1e-6;
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace csd::latency
