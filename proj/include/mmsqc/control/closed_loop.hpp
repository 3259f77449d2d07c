#pragma once

// Supervisory feedforward loop over the simulated line. Every `cadence`
// seconds the controller averages the observed stages' measurements, estimates
// H_k, solves for actuator moves and offsets the downstream set-points.

#include "mmsqc/control/controller.hpp"
#include "mmsqc/sim/plant.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace mmsqc::control {

struct ClosedLoopConfig {
    sim::TrialSpec trial; ///< plant, nominal set-points, disturbance schedule, duration, seed
    bool enabled = true;
    double cadence = 10.0;       ///< s between solves
    double average_window = 1.0; ///< s of measurements averaged before each solve
    std::size_t stage = 0;       ///< last observed stage k (zero-based)
    std::vector<sim::Channel> actuators{sim::Channel::dv2, sim::Channel::dv3};
    /// Per quality index, repeated for every horizon stage; empty means all ones.
    nn::Vector quality_weights;
    double r_weight = 0.01;
    /// Default box: ± this fraction of each actuator's nominal actuation.
    double bound_fraction = 0.2;
    /// Explicit per-actuator bounds; overrides bound_fraction when non-empty.
    std::vector<sim::Range> bounds;
    /// Let δ move the observed stages' measurements too (H_k re-encoded per iterate).
    bool reencode_observed = true;
    SolverConfig solver;
    /// Consecutive failed solves tolerated before the run aborts.
    std::size_t failsafe_budget = 3;

    void validate() const;
};

struct ControlCycle {
    double time = 0.0;
    bool solved = false;
    ControlSolution solution;
    std::string error;
};

struct ClosedLoopLog {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::vector<ControlCycle> cycles;

    std::size_t column(std::string_view name) const;
    /// Without timing the solve_ms column is dropped, leaving a file that
    /// reruns reproduce byte for byte.
    std::string to_csv(bool with_timing = true) const;
};

/// Pitch-length differences over a run, in metres.
struct DeviationSummary {
    double max_21 = 0.0, mean_21 = 0.0;
    double max_31 = 0.0, mean_31 = 0.0;
};

DeviationSummary summarize(const ClosedLoopLog& log);

/// Steady-state change of every stage's measurements (stacked) per unit move
/// of each actuator channel, by central differences around `sp`.
nn::Matrix actuation_map(const sim::PlantConfig& plant, const sim::Setpoints& sp,
                         std::span<const sim::Channel> actuators);

/// Size of the nominal actuation behind a channel, used for default bounds.
double nominal_actuation(const sim::PlantConfig& plant, const sim::Setpoints& sp, sim::Channel c);

/// Throws SolverError once more than failsafe_budget consecutive solves fail.
ClosedLoopLog run_closed_loop(const sdk::SdkModel& model, const ClosedLoopConfig& config);

} // namespace mmsqc::control
