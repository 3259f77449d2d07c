#pragma once

// Run configuration documents for the command-line tool. Every command reads
// one JSON object; unknown keys and wrongly typed values are ConfigErrors, and
// the whole document is parsed and validated before any work starts.

#include "mmsqc/control/closed_loop.hpp"
#include "mmsqc/sim/plant.hpp"
#include "mmsqc/train/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmsqc::app {

using Json = nlohmann::json;

/// Reads a config file; a missing or malformed file is a ConfigError.
Json read_config_file(const std::filesystem::path& path);

/// `a.b.c=value`: value is parsed as JSON if it can be, else kept as a string.
/// Intermediate objects are created as needed.
void apply_override(Json& doc, std::string_view assignment);

/// Hex SHA-256 of the compact, key-sorted dump.
std::string config_hash(const Json& doc);

struct SimulateRun {
    std::filesystem::path output = "data";
    sim::GenerateConfig generate;
};

struct TrainRun {
    std::filesystem::path data = "data";
    std::filesystem::path output = "runs/train";
    std::optional<std::filesystem::path> resume;
    std::uint64_t seed = 0;
    train::DatasetOptions dataset;
    sdk::ModelConfig model;
    train::TrainConfig train;
};

struct EvaluateRun {
    std::filesystem::path data = "data";
    std::filesystem::path output = "runs/evaluate";
    /// One trained model per repetition; relative_quality comes from them.
    std::vector<std::filesystem::path> checkpoints;
    std::uint64_t seed = 0;
    std::size_t repeats = 10; ///< baseline fits, seeds derived from `seed`
    train::DatasetOptions dataset;
    train::TrainConfig baseline;
};

struct ControlTrial {
    std::string id;
    sim::DisturbanceProfile schedule;
    std::uint64_t seed = 0;
};

struct ControlRun {
    std::filesystem::path checkpoint = "runs/train/checkpoint.json";
    std::filesystem::path output = "runs/control";
    std::uint64_t seed = 0;
    control::ClosedLoopConfig loop; ///< trial.schedule and trial.seed are set per trial
    std::vector<ControlTrial> trials;
};

SimulateRun parse_simulate(const Json& doc);
TrainRun parse_train(const Json& doc);
EvaluateRun parse_evaluate(const Json& doc);
ControlRun parse_control(const Json& doc);

} // namespace mmsqc::app
