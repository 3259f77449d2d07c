#pragma once

// Web-handling physics of a four-roller, three-span printing line.
//
// Rollers 0..3 carry the web; span i (1..3) lies between rollers i-1 and i
// and passes through print chamber i. The unwind side (ahead of roller 0)
// and the rewind side (after roller 3) are held at boundary tensions.

#include <array>
#include <cstddef>

namespace mmsqc::sim {

inline constexpr std::size_t roller_count = 4;
inline constexpr std::size_t span_count = 3;

struct SimConstants {
    double l0 = 0.10;           ///< unstretched pitch length, m
    double gamma0 = 293.15;     ///< room temperature, K
    double area = 1e-7;         ///< web cross-section, m²
    double modulus = 4e9;       ///< Young's modulus, Pa
    double alpha = 2e-5;        ///< thermal expansion, 1/K
    double span_length = 1.0;   ///< m
    double inertia = 1e-3;      ///< kg·m²
    double radius = 0.05;       ///< m
    double friction = 1e-3;     ///< viscous friction, N·m·s
    double tau_gamma = 30.0;    ///< chamber temperature lag, s

    double ae() const noexcept { return area * modulus; }
    /// Throws ConfigError unless every constant is strictly positive.
    void validate() const;
};

/// l = (t/(AE) + 1)·l0 + α(Γ − Γ0)·l0, meters.
double pitch_length(double tension, double gamma, const SimConstants& c) noexcept;

struct SimState {
    std::array<double, span_count> t{};     ///< span tensions t1..t3, N
    std::array<double, roller_count> v{};   ///< roller surface speeds v0..v3, m/s
    std::array<double, span_count> gamma{}; ///< chamber temperatures Γ1..Γ3, K
    double time = 0.0;
};

/// Inputs held constant over one integration step.
struct Drive {
    std::array<double, roller_count> torque{};   ///< applied motor torques, N·m
    std::array<double, span_count> gamma_set{};  ///< chamber set-points, K
    double unwind_tension = 20.0;                ///< N, upstream of roller 0
    double rewind_tension = 20.0;                ///< N, downstream of roller 3
};

/// Time derivatives of (t, v, Γ) packed like SimState.
SimState derivative(const SimState& s, const Drive& d, const SimConstants& c) noexcept;

/// One classic RK4 step. Tensions are clamped at zero afterwards (the return
/// value reports whether a clamp happened). Throws SimulationError with the
/// simulated time when the state stops being finite.
bool step_dynamics(SimState& s, const Drive& d, const SimConstants& c, double dt);

} // namespace mmsqc::sim
