// csdsim: runs one scenario file through a subcommand and writes its artifacts.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "csd/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Computational-storage simulator batch runner"};
    app.require_subcommand(1);

    std::string scenario;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    const std::pair<const char*, const char*> commands[] = {
        {"net-test", "Ether-oN codec round trip, bit-flip detection and upcall bursts"},
        {"fs-trace", "Replay a host/container open-close trace against the inode locks"},
        {"docker-sim", "Pull an image and drive containers through a command list"},
        {"latency", "Calibrate the latency model and emit breakdowns and ratios"},
        {"llm-sweep", "Sweep sequence length and batch over the four deployments"},
        {"replay-check", "Compare the analytical breakdown with a simulator replay"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--scenario", scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "Output directory")->capture_default_str();
        sub->add_option("--seed", seed, "Override the scenario seed");
    }
    CLI11_PARSE(app, argc, argv);

    auto command = csd::cli::parse_subcommand(app.get_subcommands().front()->get_name());
    int rc = csd::cli::run(command, scenario, out, seed);
    if (rc != 0) std::cerr << "csdsim: failed, see " << (std::filesystem::path(out) / csd::cli::kErrorRecord).string() << "\n";
    return rc;
}
