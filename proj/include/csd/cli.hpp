#pragma once

// Batch front-end: scenario files, the six subcommands and artifact output.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "csd/common.hpp"

namespace csd::cli {

enum class Subcommand { NetTest, FsTrace, DockerSim, Latency, LlmSweep, ReplayCheck };
/// "net-test", "fs-trace", "docker-sim", "latency", "llm-sweep", "replay-check".
std::string_view to_string(Subcommand s) noexcept;
/// Throws InvalidArgument.
Subcommand parse_subcommand(std::string_view text);
/// Scenario kind a subcommand accepts: "net", "fs-trace", "docker", "latency"
/// or "llm". replay-check takes a latency scenario.
std::string_view scenario_kind(Subcommand s) noexcept;

/// Every parameter with its default, shipped in data/scenario_defaults.json.
const nlohmann::json& scenario_defaults();

struct Scenario {
    std::string kind;
    std::uint64_t seed = 1;
    /// Defaults with the file's values merged in.
    nlohmann::json params;
};

/// `{"kind": ..., "seed": ..., "params": {...}}`. Keys absent from the
/// defaults and values of the wrong JSON type are rejected. An empty object
/// in the defaults is a free-form map checked later by the module. Throws
/// InvalidScenario.
Scenario parse_scenario(const nlohmann::json& j);
Scenario load_scenario(const std::filesystem::path& path);

/// File name to content, written only when the whole run succeeds.
using Artifacts = std::map<std::string, std::string>;

/// A failed run as written to error.json.
class RunFailure : public Error {
public:
    RunFailure(ErrorCode code, const std::string& message, nlohmann::json details = nlohmann::json::object())
        : Error(code, message), details_(std::move(details)) {}
    const nlohmann::json& details() const noexcept { return details_; }

private:
    nlohmann::json details_;
};

/// Runs a scenario in memory. Throws RunFailure with InvalidScenario for bad
/// parameters or a subcommand/kind mismatch, ModuleError wrapping any module
/// error (the module's code is in the details), and ModuleError naming the
/// component when a replay check exceeds its tolerance.
Artifacts execute(Subcommand command, const Scenario& scenario);

inline constexpr const char* kErrorRecord = "error.json";

/// Loads, executes and writes artifacts into `out_dir`, first removing files
/// a previous run may have left there. On failure only error.json is
/// written. `seed` overrides the scenario's seed. Returns 0 on success and 1
/// on failure.
int run(Subcommand command, const std::filesystem::path& scenario_path, const std::filesystem::path& out_dir,
        std::optional<std::uint64_t> seed = std::nullopt);

}  // namespace csd::cli
