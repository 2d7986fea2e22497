#include "csd/cli.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "csd/ether_on.hpp"
#include "csd/lambda_fs.hpp"
#include "csd/latency_model.hpp"
#include "csd/llm_pool.hpp"
#include "csd/mini_docker.hpp"
#include "csd/nvme.hpp"
#include "csd/virtual_fw.hpp"
#include "embedded_data.hpp"

namespace csd::cli {

using nlohmann::json;

namespace {

constexpr std::array<Subcommand, 6> kSubcommands{Subcommand::NetTest,   Subcommand::FsTrace,  Subcommand::DockerSim,
                                                 Subcommand::Latency,   Subcommand::LlmSweep, Subcommand::ReplayCheck};

// Every file any subcommand may write, so a rerun never mixes outputs.
const std::vector<std::string> kKnownArtifacts{
    "net_report.json", "upcall.csv",    "trace.log",     "report.json",     "events.log",
    "transitions.csv", "breakdown.csv", "ratios.json",   "fit_report.json", "fit_report.txt",
    "sensitivity.csv", "sweep.csv",     "summary.json",  "replay.csv",      kErrorRecord};

[[noreturn]] void invalid(const std::string& message) { throw RunFailure(ErrorCode::InvalidScenario, message); }

bool same_type(const json& def, const json& value) {
    if (def.is_number_integer()) return value.is_number_integer();
    if (def.is_number()) return value.is_number();
    return def.type() == value.type();
}

// Overlays `value` on `def`, rejecting keys and types the defaults lack.
json merge(const json& def, const json& value, const std::string& where) {
    if (!value.is_object()) invalid(fmt::format("{} must be an object", where));
    if (def.empty()) return value;
    json out = def;
    for (const auto& [key, v] : value.items()) {
        auto path = where + "." + key;
        if (!def.contains(key)) invalid(fmt::format("unknown key {}", path));
        const auto& d = def.at(key);
        if (!same_type(d, v)) invalid(fmt::format("{} must be of type {}", path, d.type_name()));
        out[key] = d.is_object() ? merge(d, v, path) : v;
    }
    return out;
}

// Scenario interpretation: any error here is the scenario's fault.
template <typename F>
auto interpret(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const RunFailure&) {
        throw;
    } catch (const Error& e) {
        throw RunFailure(ErrorCode::InvalidScenario, e.what(), {{"cause", to_string(e.code())}});
    } catch (const json::exception& e) {
        throw RunFailure(ErrorCode::InvalidScenario, e.what());
    }
}

template <typename F>
auto in_module(std::string_view module, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const RunFailure&) {
        throw;
    } catch (const Error& e) {
        throw RunFailure(ErrorCode::ModuleError, fmt::format("{}: {}", module, e.what()),
                         {{"module", module}, {"module_code", to_string(e.code())}});
    }
}

std::uint64_t integer_at_least(const json& v, const std::string& what, std::int64_t min) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < min))
        invalid(fmt::format("{} must be an integer of at least {}", what, min));
    return v.get<std::uint64_t>();
}

std::uint64_t positive(const json& j, const char* key) { return integer_at_least(j.at(key), key, 1); }
std::uint64_t count(const json& j, const char* key) { return integer_at_least(j.at(key), key, 0); }

std::vector<std::string> strings(const json& j, const char* key) {
    std::vector<std::string> out;
    for (const auto& v : j.at(key)) {
        if (!v.is_string()) invalid(fmt::format("{} must hold strings", key));
        out.push_back(v.get<std::string>());
    }
    return out;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

// --- net -------------------------------------------------------------------

// Smallest payload that needs no padding: a 64-byte frame on the wire.
constexpr std::size_t kMinPayload = 46;

nvme::NamespaceTable net_layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, 1000},
                                          {nvme::NamespaceKind::Sharable, 1000, 9000}};
    return nvme::define_namespaces(spec);
}

ether::EthernetFrame random_frame(std::mt19937_64& rng, std::size_t payload_size) {
    Bytes payload(payload_size);
    for (auto& b : payload) b = static_cast<std::uint8_t>(rng());
    return ether::EthernetFrame::make(ether::mac_for_node(rng() % 300), ether::mac_for_node(rng() % 300),
                                      static_cast<std::uint16_t>(rng()), std::move(payload));
}

Artifacts run_net(const Scenario& s) {
    const auto& p = s.params;
    auto frames = interpret([&] { return positive(p, "frames"); });
    auto flips = interpret([&] { return count(p, "bit_flips"); });
    auto burst_max = interpret([&] { return positive(p, "burst_max"); });
    auto slots = interpret([&] { return positive(p, "upcall_slots"); });

    return in_module("ether_on", [&] {
        std::mt19937_64 rng(s.seed);
        std::size_t min_size = SIZE_MAX, max_size = 0, failures = 0;
        for (std::uint64_t i = 0; i < frames; ++i) {
            // The first two frames pin the minimum and maximum sizes.
            std::size_t payload = i == 0 ? kMinPayload : i == 1 ? ether::kMaxPayload
                                                                    : kMinPayload + rng() % (ether::kMaxPayload - kMinPayload + 1);
            auto frame = random_frame(rng, payload);
            auto [cmd, page] = ether::encode_tx(frame);
            min_size = std::min<std::size_t>(min_size, cmd.length);
            max_size = std::max<std::size_t>(max_size, cmd.length);
            if (ether::decode(cmd, page) != frame) ++failures;
        }
        std::uint64_t detected = 0;
        for (std::uint64_t i = 0; i < flips; ++i) {
            auto frame = random_frame(rng, kMinPayload + rng() % (ether::kMaxPayload - kMinPayload + 1));
            auto [cmd, page] = ether::encode_tx(frame);
            auto bit = rng() % (cmd.length * 8);
            page.bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
            try {
                (void)ether::decode(cmd, page);
            } catch (const Error& e) {
                if (e.code() == ErrorCode::BadChecksum) ++detected;
            }
        }

        std::string csv = "burst,immediate,service_rounds,received,in_order,armed_after\n";
        bool bursts_ok = true;
        for (std::uint64_t k = 1; k <= burst_max; ++k) {
            nvme::NvmeController ctl(net_layout());
            auto q = ctl.create_queue_pair();
            auto pool = ether::UpcallPool::arm(ctl, q, slots);
            std::vector<ether::EthernetFrame> sent;
            std::uint64_t immediate = 0;
            for (std::uint64_t i = 0; i < k; ++i) {
                sent.push_back(ether::EthernetFrame::make(ether::mac_for_node(0), ether::mac_for_node(1),
                                                          ether::kEtherTypeIpv4, to_bytes(fmt::format("frame-{}", i))));
                if (pool.deliver(sent.back()).outcome == ether::Delivery::Delivered) ++immediate;
            }
            std::vector<ether::EthernetFrame> received;
            std::uint64_t rounds = 0;
            while (pool.delivering() > 0) {
                auto round = pool.service();
                received.insert(received.end(), round.begin(), round.end());
                ++rounds;
            }
            bool in_order = received == sent;
            bursts_ok = bursts_ok && in_order && immediate == std::min(k, slots);
            csv += fmt::format("{},{},{},{},{},{}\n", k, immediate, rounds, received.size(), in_order ? 1 : 0,
                               pool.armed());
        }

        json report{{"seed", s.seed},
                    {"frames", frames},
                    {"min_encoded_bytes", min_size},
                    {"max_encoded_bytes", max_size},
                    {"round_trip_failures", failures},
                    {"bit_flips", flips},
                    {"bit_flips_detected", detected},
                    {"upcall_slots", slots},
                    {"bursts_ok", bursts_ok}};
        if (failures > 0 || detected != flips || !bursts_ok)
            throw RunFailure(ErrorCode::ModuleError, "ether_on: self-test failed", {{"module", "ether_on"}, {"report", report}});
        return Artifacts{{"net_report.json", dump(report)}, {"upcall.csv", csv}};
    });
}

// --- fs-trace --------------------------------------------------------------

nvme::NamespaceTable fs_layout() {
    std::vector<nvme::NamespaceSpec> spec{{nvme::NamespaceKind::Private, 0, 4000},
                                          {nvme::NamespaceKind::Sharable, 4000, 4000}};
    return nvme::define_namespaces(spec);
}

std::string join_lines(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) out += l + "\n";
    return out;
}

Artifacts run_fs_trace(const Scenario& s) {
    const auto& p = s.params;
    auto dirs = interpret([&] { return strings(p, "dirs"); });
    auto files = interpret([&] {
        std::map<std::string, std::string> out;
        for (const auto& [path, text] : p.at("files").items()) {
            if (!text.is_string()) invalid(fmt::format("files.{} must be a string", path));
            out[path] = text.get<std::string>();
        }
        return out;
    });
    auto events = interpret([&] { return fs::parse_trace(join_lines(strings(p, "trace"))); });

    return in_module("lambda_fs", [&] {
        nvme::NvmeController ctl(fs_layout());
        fs::LambdaFs lfs(ctl);
        for (const auto& d : dirs) lfs.mkdirs(nvme::PcieFunction::Host, d);
        for (const auto& [path, text] : files) lfs.write_file(nvme::PcieFunction::Host, path, to_bytes(text));
        auto run = fs::run_trace(lfs, events);
        json report{{"events", events.size()},
                    {"mismatches", run.mismatches},
                    {"live_handles", lfs.locks().live_handles().size()}};
        if (run.mismatches > 0)
            throw RunFailure(ErrorCode::ModuleError, fmt::format("lambda_fs: {} trace expectations not met", run.mismatches),
                             {{"module", "lambda_fs"}, {"report", report}, {"log", run.lines}});
        return Artifacts{{"trace.log", join_lines(run.lines)}, {"report.json", dump(report)}};
    });
}

// --- docker ----------------------------------------------------------------

docker::ImageSpec image_spec(const json& j) {
    docker::ImageSpec spec;
    spec.ref = docker::ImageRef{j.at("name").get<std::string>(), j.at("tag").get<std::string>()};
    (void)docker::ImageRef::parse(spec.ref.str());
    spec.entry = j.at("entry").get<std::string>();
    spec.config = j.at("config");
    for (const auto& layer : j.at("layers")) {
        if (!layer.is_object()) invalid("image.layers must hold objects mapping paths to contents");
        std::set<std::string> dirs;
        std::vector<archive::TarEntry> files;
        for (const auto& [path, text] : layer.items()) {
            if (!text.is_string()) invalid(fmt::format("layer entry {} must be a string", path));
            auto clean = path;
            bool directory = !clean.empty() && clean.back() == '/';
            if (directory) clean.pop_back();
            if (clean.empty() || clean.front() == '/') invalid(fmt::format("layer path '{}' must be relative", path));
            for (auto pos = clean.find('/'); pos != std::string::npos; pos = clean.find('/', pos + 1))
                dirs.insert(clean.substr(0, pos));
            if (directory)
                dirs.insert(clean);
            else
                files.push_back({clean, false, to_bytes(text.get<std::string>())});
        }
        std::vector<archive::TarEntry> entries;
        for (const auto& d : dirs) entries.push_back({d, true, {}});
        entries.insert(entries.end(), files.begin(), files.end());
        spec.layers.push_back(std::move(entries));
    }
    return spec;
}

struct DockerCommand {
    bool expect_failure = false;
    std::string verb;
    std::vector<std::string> args;
    std::string text;
};

DockerCommand parse_docker_command(const std::string& line) {
    static const std::set<std::string> verbs{"pull", "create", "run",  "start", "stop", "kill",   "restart",
                                             "rm",   "logs",   "ps",   "rmi",   "settle", "recover"};
    DockerCommand c;
    c.text = line;
    std::istringstream in(line);
    std::string word;
    in >> word;
    if (!word.empty() && word.front() == '!') {
        c.expect_failure = true;
        word.erase(0, 1);
    }
    if (!verbs.contains(word)) invalid(fmt::format("unknown docker command '{}'", line));
    c.verb = word;
    while (in >> word) c.args.push_back(word);
    return c;
}

Artifacts run_docker(const Scenario& s) {
    const auto& p = s.params;
    auto spec = interpret([&] { return image_spec(p.at("image")); });
    auto host_files = interpret([&] {
        std::map<std::string, std::string> out;
        for (const auto& [path, text] : p.at("host_files").items()) {
            if (!text.is_string()) invalid(fmt::format("host_files.{} must be a string", path));
            out[path] = text.get<std::string>();
        }
        return out;
    });
    auto commands = interpret([&] {
        std::vector<DockerCommand> out;
        for (const auto& line : strings(p, "commands")) out.push_back(parse_docker_command(line));
        return out;
    });

    return in_module("mini_docker", [&] {
        nvme::NvmeController ctl(fs_layout());
        fs::LambdaFs lfs(ctl);
        vfw::IoNodeCache cache(256);
        vfw::LambdaFsBackend backend(lfs, cache);
        vfw::VirtualFw fw(backend);
        docker::MiniDocker engine(lfs, fw, cache);
        for (const auto& [path, text] : host_files) {
            auto slash = path.rfind('/');
            if (slash != std::string::npos && slash > 0) lfs.mkdirs(nvme::PcieFunction::Host, path.substr(0, slash));
            lfs.write_file(nvme::PcieFunction::Host, path, to_bytes(text));
        }
        auto bundle = docker::make_image_bundle(spec);

        std::vector<std::string> ids;
        // "c1" names the first container created.
        auto container = [&](const std::vector<std::string>& args) {
            if (args.size() != 1) throw Error(ErrorCode::InvalidArgument, "expected one container");
            const auto& a = args[0];
            if (a.size() > 1 && a[0] == 'c' && a.find_first_not_of("0123456789", 1) == std::string::npos) {
                auto n = std::stoul(a.substr(1));
                if (n == 0 || n > ids.size()) throw Error(ErrorCode::ContainerNotFound, a);
                return ids[n - 1];
            }
            return a;
        };
        auto image_and_binds = [&](const std::vector<std::string>& args) {
            if (args.empty()) throw Error(ErrorCode::InvalidArgument, "expected an image");
            std::vector<docker::Bind> binds;
            for (std::size_t i = 1; i < args.size(); ++i) binds.push_back(docker::Bind::parse(args[i]));
            return std::pair{docker::ImageRef::parse(args[0]), binds};
        };

        std::string log;
        for (const auto& c : commands) {
            log += "> " + c.text + "\n";
            try {
                if (c.verb == "pull") {
                    auto m = engine.pull(bundle, spec.ref);
                    log += fmt::format("pulled {} layers\n", m.layers.size());
                } else if (c.verb == "create" || c.verb == "run") {
                    auto [ref, binds] = image_and_binds(c.args);
                    auto id = c.verb == "run" ? engine.run(ref, binds) : engine.create(ref, binds);
                    ids.push_back(id);
                    log += fmt::format("c{} {}\n", ids.size(), id);
                } else if (c.verb == "start") {
                    engine.start(container(c.args));
                } else if (c.verb == "stop") {
                    engine.stop(container(c.args));
                } else if (c.verb == "kill") {
                    engine.kill(container(c.args));
                } else if (c.verb == "restart") {
                    engine.restart(container(c.args));
                } else if (c.verb == "rm") {
                    engine.rm(container(c.args));
                } else if (c.verb == "logs") {
                    auto bytes = engine.logs(container(c.args));
                    std::istringstream in(std::string(bytes.begin(), bytes.end()));
                    for (std::string line; std::getline(in, line);) log += "| " + line + "\n";
                } else if (c.verb == "ps") {
                    for (const auto& info : engine.ps())
                        log += fmt::format("{} {} {}{}\n", info.id, info.image, to_string(info.state),
                                           info.exit_code ? fmt::format(" exit={}", *info.exit_code) : "");
                } else if (c.verb == "rmi") {
                    if (c.args.size() != 1) throw Error(ErrorCode::InvalidArgument, "expected one image");
                    log += fmt::format("deleted {} blobs\n", engine.rmi(docker::ImageRef::parse(c.args[0])).size());
                } else if (c.verb == "settle") {
                    log += fmt::format("settled in {} quanta\n", engine.settle());
                } else {
                    engine.recover();
                }
                if (c.expect_failure)
                    throw RunFailure(ErrorCode::ModuleError, fmt::format("mini_docker: '{}' succeeded unexpectedly", c.text),
                                     {{"module", "mini_docker"}, {"command", c.text}});
            } catch (const RunFailure&) {
                throw;
            } catch (const Error& e) {
                if (!c.expect_failure) {
                    throw RunFailure(ErrorCode::ModuleError, fmt::format("mini_docker: '{}': {}", c.text, e.what()),
                                     {{"module", "mini_docker"}, {"module_code", to_string(e.code())}, {"command", c.text}});
                }
                log += fmt::format("error {}\n", to_string(e.code()));
            }
        }

        std::string csv = "id,from,to,cause\n";
        for (const auto& t : engine.transitions())
            csv += fmt::format("{},{},{},{}\n", t.id, to_string(t.from), to_string(t.to), t.cause);
        json containers = json::array();
        for (const auto& info : engine.ps())
            containers.push_back({{"id", info.id},
                                  {"image", info.image},
                                  {"state", to_string(info.state)},
                                  {"exit_code", info.exit_code ? json(*info.exit_code) : json(nullptr)}});
        json report{{"commands", commands.size()},
                    {"containers", containers},
                    {"blobs", engine.blob_hashes()},
                    {"transitions", engine.transitions().size()}};
        return Artifacts{{"events.log", log}, {"transitions.csv", csv}, {"report.json", dump(report)}};
    });
}

// --- latency ---------------------------------------------------------------

latency::CostTable cost_table(const json& overrides) {
    auto j = latency::CostTable::defaults().to_json();
    for (const auto& [k, v] : overrides.items()) j[k] = v;
    return latency::CostTable::from_json(j);
}

std::vector<latency::ModelKind> models(const json& j) {
    std::vector<latency::ModelKind> out;
    for (const auto& name : strings(j, "models")) out.push_back(latency::parse_model(name));
    if (out.empty()) invalid("models must not be empty");
    return out;
}

latency::WorkloadDescriptor workload(const json& j) {
    static const json kShape{{"program", ""},    {"name", ""},         {"io_bytes", 0.0},    {"io_count", 0.0},
                             {"syscalls", 0.0},  {"path_walks", 0.0},  {"files_opened", 0.0}, {"tcp_packets", 0.0},
                             {"exec_time_s", 0.0}};
    auto m = merge(kShape, j, "workload");
    latency::WorkloadDescriptor w;
    w.program = m.at("program").get<std::string>();
    w.name = m.at("name").get<std::string>();
    if (w.name.empty()) invalid("workload.name is required");
    w.io_bytes = m.at("io_bytes").get<double>();
    w.io_count = m.at("io_count").get<double>();
    w.syscall_count = m.at("syscalls").get<double>();
    w.path_walk_count = m.at("path_walks").get<double>();
    w.files_opened = m.at("files_opened").get<double>();
    w.tcp_packets = m.at("tcp_packets").get<double>();
    w.exec_time_s = m.at("exec_time_s").get<double>();
    w.validate();
    return w;
}

Artifacts run_latency(const Scenario& s) {
    const auto& p = s.params;
    auto set = interpret([&] {
        auto kind = p.at("workloads").get<std::string>();
        if (kind == "table") return latency::table_workloads();
        if (kind == "synthetic") return latency::synthetic_workloads(positive(p, "synthetic_count"), s.seed);
        invalid(fmt::format("workloads must be 'table' or 'synthetic', not '{}'", kind));
    });
    auto kinds = interpret([&] { return models(p); });
    auto start = interpret([&] { return cost_table(p.at("costs")); });
    auto factor = interpret([&] {
        auto f = p.at("sensitivity_factor").get<double>();
        if (!(f > 0) || !std::isfinite(f)) invalid("sensitivity_factor must be positive");
        return f;
    });
    bool fit = p.at("calibrate").get<bool>();

    return in_module("latency_model", [&] {
        Artifacts out;
        auto table = start;
        if (fit) {
            auto cal = latency::calibrate(latency::published_targets(), set, start);
            table = cal.table;
            out["fit_report.json"] = dump(cal.report.to_json());
            out["fit_report.txt"] = cal.report.to_text();
            std::string csv = "parameter,factor,max_abs_residual,worst_target,blow_up\n";
            for (const auto& e : latency::sensitivity_sweep(latency::published_targets(), set, table, factor))
                csv += fmt::format("{},{},{},{},{}\n", e.parameter, e.factor, e.max_abs_residual, e.worst_target,
                                   e.blow_up ? 1 : 0);
            out["sensitivity.csv"] = csv;
        }
        std::vector<latency::BreakdownRow> rows;
        for (const auto& w : set)
            for (auto m : kinds) rows.push_back({w.name, m, latency::evaluate(w, {m, {}}, table)});
        out["breakdown.csv"] = latency::breakdown_csv(rows);

        json ratios{{"workloads", set.size()}, {"costs", table.to_json()}};
        if (kinds.size() >= 2) {
            auto matrix = latency::compare(set, kinds, table);
            json m = json::object();
            for (auto a : kinds)
                for (auto b : kinds) m[std::string(to_string(a))][std::string(to_string(b))] = matrix(a, b);
            ratios["matrix"] = m;
            json vs = json::object();
            for (const auto& [k, v] : matrix.versus_virtfw) vs[std::string(to_string(k))] = v;
            ratios["versus_virtfw"] = vs;
        }
        out["ratios.json"] = dump(ratios);
        return out;
    });
}

Artifacts run_replay_check(const Scenario& s) {
    const auto& r = s.params.at("replay");
    if (!r.at("enabled").get<bool>()) invalid("replay-check needs params.replay.enabled = true");
    auto set = interpret([&] {
        std::vector<latency::WorkloadDescriptor> out;
        auto n = count(r, "synthetic_count");
        if (n > 0) out = latency::synthetic_workloads(n, s.seed);
        for (const auto& w : r.at("workloads")) out.push_back(workload(w));
        if (out.empty()) invalid("replay needs at least one workload");
        return out;
    });
    auto kinds = interpret([&] { return models(r); });
    auto table = interpret([&] { return cost_table(s.params.at("costs")); });
    auto replay_table = interpret([&] {
        auto j = table.to_json();
        for (const auto& [k, v] : r.at("replay_overrides").items()) j[k] = v;
        return latency::CostTable::from_json(j);
    });
    auto tolerance = interpret([&] {
        auto t = r.at("tolerance").get<double>();
        if (!(t >= 0) || !std::isfinite(t)) invalid("replay.tolerance must be non-negative");
        return t;
    });

    return in_module("latency_model", [&] {
        std::string csv = "workload,model,component,analytical_ns,replayed_ns,relative_error\n";
        double worst = 0;
        json worst_at = nullptr;
        for (const auto& w : set)
            for (auto m : kinds) {
                latency::ProcessingModel model{m, {}};
                latency::ReplayResult res = latency::replay(w, model, replay_table);
                res.analytical = latency::evaluate(w, model, table);
                for (std::size_t c = 0; c < latency::kComponentCount; ++c) {
                    auto comp = static_cast<latency::Component>(c);
                    double err = res.relative_error(comp);
                    csv += fmt::format("{},{},{},{},{},{}\n", w.name, to_string(m), to_string(comp), res.analytical[comp],
                                       res.replayed[comp], err);
                    if (err > worst || worst_at.is_null()) {
                        worst = err;
                        worst_at = {{"workload", w.name}, {"model", to_string(m)}, {"component", to_string(comp)}};
                    }
                }
            }
        json report{{"workloads", set.size()},
                    {"models", kinds.size()},
                    {"tolerance", tolerance},
                    {"max_relative_error", finite_or_null(worst)},
                    {"worst", worst_at},
                    {"passed", worst <= tolerance}};
        if (worst > tolerance)
            throw RunFailure(ErrorCode::ModuleError,
                             fmt::format("replay mismatch in {} for {} on {}", worst_at.at("component").get<std::string>(),
                                         worst_at.at("model").get<std::string>(),
                                         worst_at.at("workload").get<std::string>()),
                             {{"module", "latency_model"}, {"check", "replay"}, {"report", report}});
        return Artifacts{{"replay.csv", csv}, {"report.json", dump(report)}};
    });
}

// --- llm -------------------------------------------------------------------

Artifacts run_llm(const Scenario& s) {
    const auto& p = s.params;
    auto request = interpret([&] {
        llm::SweepRequest req;
        req.arch = llm::find_architecture(p.at("arch").get<std::string>());
        for (const auto& c : strings(p, "configs")) req.configs.push_back(llm::parse_config(c));
        for (const auto& v : p.at("seqs")) req.seqs.push_back(integer_at_least(v, "seqs entry", 1));
        for (const auto& v : p.at("batches")) req.batches.push_back(integer_at_least(v, "batches entry", 1));
        if (req.configs.empty() || req.seqs.empty() || req.batches.empty())
            invalid("configs, seqs and batches must not be empty");
        auto nodes = p.at("node_count").get<std::int64_t>();
        if (nodes < 1 || nodes > 1 << 20) invalid(fmt::format("node_count must be between 1 and 2^20, got {}", nodes));
        req.node_count = static_cast<int>(nodes);
        auto costs = req.costs.to_json();
        for (const auto& [k, v] : p.at("costs").items()) costs[k] = v;
        req.costs = llm::CostModel::from_json(costs);
        return req;
    });
    auto summary_seq = interpret([&] { return positive(p, "summary_seq"); });

    return in_module("llm_pool", [&] {
        auto report = llm::sweep(request);
        json plans = json::object();
        for (auto kind : request.configs) {
            llm::Deployment dep{kind, request.node_count, request.costs};
            try {
                auto best = llm::search_plan(request.arch, dep, summary_seq, request.batches.front());
                plans[std::string(to_string(kind))] = {{"plan", llm::describe(best.plan)},
                                                       {"category", to_string(llm::category(best.plan))},
                                                       {"time_s", best.time.total()},
                                                       {"micro_batches", best.time.micro_batches}};
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NoFeasiblePlan) throw;
                plans[std::string(to_string(kind))] = "infeasible";
            }
        }
        json crossover = nullptr;
        try {
            crossover = llm::crossover_sequence(request.arch, request.costs, request.node_count, request.batches.front(),
                                                16, std::max<std::uint64_t>(16, request.seqs.back()));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InvalidArgument && e.code() != ErrorCode::CacheOverflow &&
                e.code() != ErrorCode::NoFeasiblePlan)
                throw;
        }
        auto first = report.crossover_seq();
        json summary{{"arch", request.arch.name},
                     {"node_count", request.node_count},
                     {"crossover_point", first ? json(*first) : json(nullptr)},
                     {"crossover_seq", crossover},
                     {"max_speedup", finite_or_null(report.max_speedup())},
                     {"saturation_limit", llm::saturation_limit(request.arch, request.costs, request.batches.front())},
                     {"summary_seq", summary_seq},
                     {"plans", plans}};
        return Artifacts{{"sweep.csv", llm::sweep_csv(report)}, {"summary.json", dump(summary)}};
    });
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::string_view to_string(Subcommand s) noexcept {
    switch (s) {
    case Subcommand::NetTest: return "net-test";
    case Subcommand::FsTrace: return "fs-trace";
    case Subcommand::DockerSim: return "docker-sim";
    case Subcommand::Latency: return "latency";
    case Subcommand::LlmSweep: return "llm-sweep";
    case Subcommand::ReplayCheck: return "replay-check";
    }
    return "?";
}

Subcommand parse_subcommand(std::string_view text) {
    for (auto s : kSubcommands)
        if (to_string(s) == text) return s;
    throw Error(ErrorCode::InvalidArgument, fmt::format("unknown subcommand '{}'", text));
}

std::string_view scenario_kind(Subcommand s) noexcept {
    switch (s) {
    case Subcommand::NetTest: return "net";
    case Subcommand::FsTrace: return "fs-trace";
    case Subcommand::DockerSim: return "docker";
    case Subcommand::Latency:
    case Subcommand::ReplayCheck: return "latency";
    case Subcommand::LlmSweep: return "llm";
    }
    return "?";
}

const json& scenario_defaults() {
    static const json defaults = json::parse(data::kScenarioDefaultsJson);
    return defaults;
}

Scenario parse_scenario(const json& j) {
    if (!j.is_object()) invalid("scenario must be an object");
    for (const auto& [key, v] : j.items())
        if (key != "kind" && key != "seed" && key != "params") invalid(fmt::format("unknown key {}", key));
    if (!j.contains("kind") || !j.at("kind").is_string()) invalid("kind must be a string");
    Scenario s;
    s.kind = j.at("kind").get<std::string>();
    const auto& defaults = scenario_defaults();
    if (s.kind == "seed" || !defaults.contains(s.kind)) invalid(fmt::format("unknown scenario kind '{}'", s.kind));
    s.seed = defaults.at("seed").get<std::uint64_t>();
    if (j.contains("seed")) {
        s.seed = integer_at_least(j.at("seed"), "seed", 0);
    }
    s.params = merge(defaults.at(s.kind), j.value("params", json::object()), "params");
    return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) invalid(fmt::format("cannot read scenario {}", path.string()));
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        invalid(fmt::format("{}: {}", path.string(), e.what()));
    }
    return parse_scenario(j);
}

Artifacts execute(Subcommand command, const Scenario& scenario) {
    if (scenario.kind != scenario_kind(command))
        invalid(fmt::format("{} expects a '{}' scenario, got '{}'", to_string(command), scenario_kind(command),
                            scenario.kind));
    switch (command) {
    case Subcommand::NetTest: return run_net(scenario);
    case Subcommand::FsTrace: return run_fs_trace(scenario);
    case Subcommand::DockerSim: return run_docker(scenario);
    case Subcommand::Latency: return run_latency(scenario);
    case Subcommand::LlmSweep: return run_llm(scenario);
    case Subcommand::ReplayCheck: return run_replay_check(scenario);
    }
    invalid("unknown subcommand");
}

int run(Subcommand command, const std::filesystem::path& scenario_path, const std::filesystem::path& out_dir,
        std::optional<std::uint64_t> seed) {
    Artifacts artifacts;
    std::optional<json> failure;
    try {
        auto scenario = load_scenario(scenario_path);
        if (seed) scenario.seed = *seed;
        artifacts = execute(command, scenario);
    } catch (const RunFailure& e) {
        failure = json{{"code", to_string(e.code())}, {"message", e.what()}, {"details", e.details()}};
    } catch (const Error& e) {
        failure = json{{"code", to_string(ErrorCode::ModuleError)},
                       {"message", e.what()},
                       {"details", {{"module_code", to_string(e.code())}}}};
    }
    if (failure) {
        (*failure)["subcommand"] = to_string(command);
        (*failure)["scenario"] = scenario_path.string();
        artifacts = {{kErrorRecord, dump(*failure)}};
    }

    std::filesystem::create_directories(out_dir);
    for (const auto& name : kKnownArtifacts) std::filesystem::remove(out_dir / name);
    for (const auto& [name, content] : artifacts) write_file(out_dir / name, content);
    return failure ? 1 : 0;
}

}  // namespace csd::cli
