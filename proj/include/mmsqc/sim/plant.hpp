#pragma once

// Closed-loop R2R plant: physics plus the lower-level drive controllers,
// process noise, set-point schedules and trial logging.

#include "mmsqc/sim/physics.hpp"
#include "mmsqc/train/dataset.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mmsqc::sim {

struct PiGains {
    double kp = 0.0;
    double ki = 0.0;
    /// Bound on |ki·∫e|, in output units.
    double integral_limit = 0.0;
};

/// u = u_ff + kp·e + ki·∫e with the integral term clamped to ±integral_limit.
class PiController {
public:
    PiController() = default;
    explicit PiController(PiGains gains) : gains_(gains) {}

    double command(double feedforward, double error, double dt);
    void reset(double integral = 0.0) { integral_ = integral; }
    double integral() const noexcept { return integral_; }
    const PiGains& gains() const noexcept { return gains_; }

private:
    PiGains gains_;
    double integral_ = 0.0;
};

/// Multiplicative process noise 1 + a·U(-1, 1), stateless and indexed by
/// (step, channel) so any sample can be recomputed independently.
class NoiseSource {
public:
    NoiseSource(std::uint64_t seed, double amplitude) : seed_(seed), amplitude_(amplitude) {}
    double factor(std::uint64_t step, std::uint32_t channel) const noexcept;
    double amplitude() const noexcept { return amplitude_; }

private:
    std::uint64_t seed_;
    double amplitude_;
};

/// Set-point channels that schedules and the supervisory layer may offset.
enum class Channel { t_set1, dv2, dv3, gamma1, gamma2, gamma3, t_rewind, u0, u1, u2, u3 };
std::string_view to_string(Channel c) noexcept;
Channel channel_from_string(std::string_view s);

struct Setpoints {
    double tension1 = 20.0;                           ///< t_set1, N
    std::array<double, 2> speed_dev{0.0, 0.0};        ///< δv2, δv3, m/s
    std::array<double, span_count> gamma{313.15, 313.15, 313.15}; ///< chamber set-points, K
    double rewind_tension = 20.0;                     ///< N
    std::array<double, roller_count> torque_offset{}; ///< added to drive feedforward, N·m

    double& operator[](Channel c);
    double operator[](Channel c) const;
};

/// Additive offsets per channel. Between knots a channel holds the last
/// value; a knot marked `ramp` is approached linearly from the previous knot.
class DisturbanceProfile {
public:
    struct Knot {
        double time = 0.0;
        double value = 0.0;
        bool ramp = false;
    };

    /// Throws ConfigError unless knot times strictly increase.
    void set(Channel c, std::vector<Knot> knots);
    void add_step(Channel c, double time, double value);
    double offset(Channel c, double time) const;
    Setpoints apply(Setpoints base, double time) const;
    bool empty() const noexcept { return knots_.empty(); }
    const std::map<Channel, std::vector<Knot>>& channels() const noexcept { return knots_; }

private:
    std::map<Channel, std::vector<Knot>> knots_;
};

struct PlantConfig {
    SimConstants constants;
    double line_speed = 1.0;      ///< m/s, master speed of roller 0
    double unwind_tension = 20.0; ///< N
    double dt = 1e-3;             ///< s
    double noise = 0.05;          ///< relative amplitude on torques and speed deviations
    PiGains speed{2.0, 20.0, 0.5};
    PiGains tension{0.01, 0.05, 0.5};
    /// Speed-error damping in the tension loop's feedforward path, N·m per m/s.
    double tension_damping = 2.0;
    double torque_limit = 5.0; ///< |u| bound, N·m

    void validate() const;
};

struct Measurement {
    std::array<nn::Vector, span_count> x; ///< per-stage process measurements
    std::array<nn::Vector, span_count> y; ///< per-stage (t_k, l_k)
};

/// Channel names of the logged features, stage by stage.
std::vector<std::vector<std::string>> measurement_names();
std::vector<std::vector<std::string>> quality_names();

class Plant {
public:
    Plant(PlantConfig config, std::uint64_t noise_seed);

    /// Analytic noise-free equilibrium for the set-points with all integrators settled.
    void initialize_steady(const Setpoints& sp);
    /// Advances one step under the given set-points.
    void step(const Setpoints& sp);

    const SimState& state() const noexcept { return state_; }
    double time() const noexcept { return state_.time; }
    std::uint64_t steps() const noexcept { return step_; }
    Measurement measure() const;
    /// Torques commanded in the last step, before noise.
    const std::array<double, roller_count>& commanded() const noexcept { return commanded_; }
    const Setpoints& setpoints() const noexcept { return last_sp_; }
    const PlantConfig& config() const noexcept { return config_; }
    std::size_t clamp_count() const noexcept { return clamps_; }

    /// Noise-free equilibrium state for the set-points (no integration).
    SimState steady_state(const Setpoints& sp) const;
    /// Measurement the plant would report at that equilibrium.
    Measurement steady_measurement(const Setpoints& sp) const;

private:
    std::array<double, roller_count> control(const Setpoints& sp, const SimState& s, std::uint64_t step,
                                             bool noisy);

    PlantConfig config_;
    NoiseSource noise_;
    SimState state_;
    std::array<PiController, roller_count> pi_;
    std::array<double, roller_count> commanded_{};
    Setpoints last_sp_;
    std::uint64_t step_ = 0;
    std::size_t clamps_ = 0;
};

struct TrialSpec {
    PlantConfig plant;
    Setpoints base;
    DisturbanceProfile schedule;
    double duration = 100.0;
    double log_period = 0.1;
    std::uint64_t seed = 0;
    std::string id = "trial";
};

/// Starts at the equilibrium of the t = 0 set-points and logs every log_period.
train::Trial run_trial(const TrialSpec& spec);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct ScheduleRanges {
    Range tension1{18.0, 22.0};
    Range speed_dev{-0.004, 0.004};
    Range gamma{293.15, 413.15};
    Range rewind_tension{16.0, 24.0};
    Range event_interval{8.0, 20.0};
};

struct GenerateConfig {
    std::size_t n_trials = 200;
    std::uint64_t seed = 0;
    double duration = 100.0;
    double log_period = 0.1;
    double test_fraction = 0.2;
    PlantConfig plant;
    Setpoints nominal;
    ScheduleRanges ranges;

    void validate() const;
};

struct GeneratedDataset {
    std::vector<train::Trial> trials;
    std::vector<train::Split> splits;
    train::DatasetIndex index;
};

/// Randomized operating-condition schedule around the nominal set-points.
DisturbanceProfile random_schedule(const GenerateConfig& cfg, std::mt19937_64& rng);

/// Trials run in parallel; the result depends only on the config.
GeneratedDataset generate_dataset(const GenerateConfig& cfg);
void write_dataset(const GeneratedDataset& data, const std::filesystem::path& dir);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

} // namespace mmsqc::sim
