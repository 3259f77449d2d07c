#include "mmsqc/sim/physics.hpp"

#include "mmsqc/errors.hpp"

#include <cmath>
#include <string>

namespace mmsqc::sim {

void SimConstants::validate() const
{
    const double vals[] = {l0, gamma0, area, modulus, alpha, span_length, inertia, radius, friction, tau_gamma};
    const char* names[] = {"l0", "gamma0", "area", "modulus", "alpha", "span_length", "inertia", "radius", "friction", "tau_gamma"};
    for (std::size_t i = 0; i < std::size(vals); ++i) {
        if (!(vals[i] > 0.0) || !std::isfinite(vals[i])) {
            throw ConfigError(std::string("sim constant '") + names[i] + "' must be finite and > 0");
        }
    }
}

double pitch_length(double tension, double gamma, const SimConstants& c) noexcept
{
    return (tension / c.ae() + 1.0) * c.l0 + c.alpha * (gamma - c.gamma0) * c.l0;
}

SimState derivative(const SimState& s, const Drive& d, const SimConstants& c) noexcept
{
    SimState ds;
    const double ae = c.ae();
    const double r = c.radius;
    // span tension, span i between rollers i-1 and i
    for (std::size_t i = 0; i < span_count; ++i) {
        const double t_up = i == 0 ? d.unwind_tension : s.t[i - 1];
        const double v_up = s.v[i];
        const double v_dn = s.v[i + 1];
        ds.t[i] = (ae * (v_dn - v_up) + v_up * t_up - v_dn * s.t[i]) / c.span_length;
    }
    // roller torque balance: upstream tension drags, downstream tension pulls
    for (std::size_t i = 0; i < roller_count; ++i) {
        const double t_in = i == 0 ? d.unwind_tension : s.t[i - 1];
        const double t_out = i == roller_count - 1 ? d.rewind_tension : s.t[i];
        ds.v[i] = (r * d.torque[i] - r * r * (t_in - t_out) - c.friction * s.v[i]) / c.inertia;
    }
    for (std::size_t i = 0; i < span_count; ++i) {
        ds.gamma[i] = (d.gamma_set[i] - s.gamma[i]) / c.tau_gamma;
    }
    ds.time = 1.0;
    return ds;
}

namespace {

SimState axpy(const SimState& s, double h, const SimState& k)
{
    SimState out;
    for (std::size_t i = 0; i < span_count; ++i) out.t[i] = s.t[i] + h * k.t[i];
    for (std::size_t i = 0; i < roller_count; ++i) out.v[i] = s.v[i] + h * k.v[i];
    for (std::size_t i = 0; i < span_count; ++i) out.gamma[i] = s.gamma[i] + h * k.gamma[i];
    out.time = s.time + h;
    return out;
}

} // namespace

bool step_dynamics(SimState& s, const Drive& d, const SimConstants& c, double dt)
{
    if (!(dt > 0.0)) throw UsageError("integration step must be > 0");
    const auto k1 = derivative(s, d, c);
    const auto k2 = derivative(axpy(s, 0.5 * dt, k1), d, c);
    const auto k3 = derivative(axpy(s, 0.5 * dt, k2), d, c);
    const auto k4 = derivative(axpy(s, dt, k3), d, c);
    const double w = dt / 6.0;
    for (std::size_t i = 0; i < span_count; ++i) {
        s.t[i] += w * (k1.t[i] + 2.0 * k2.t[i] + 2.0 * k3.t[i] + k4.t[i]);
        s.gamma[i] += w * (k1.gamma[i] + 2.0 * k2.gamma[i] + 2.0 * k3.gamma[i] + k4.gamma[i]);
    }
    for (std::size_t i = 0; i < roller_count; ++i) {
        s.v[i] += w * (k1.v[i] + 2.0 * k2.v[i] + 2.0 * k3.v[i] + k4.v[i]);
    }
    s.time += dt;
    bool clamped = false;
    bool finite = true;
    for (auto& t : s.t) {
        finite = finite && std::isfinite(t);
        if (t < 0.0) {
            t = 0.0;
            clamped = true;
        }
    }
    for (double v : s.v) finite = finite && std::isfinite(v);
    for (double g : s.gamma) finite = finite && std::isfinite(g);
    if (!finite) {
        throw SimulationError("simulation blew up at t = " + std::to_string(s.time) + " s");
    }
    return clamped;
}

} // namespace mmsqc::sim
