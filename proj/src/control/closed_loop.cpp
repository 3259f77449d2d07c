#include "mmsqc/control/closed_loop.hpp"

#include "mmsqc/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>

namespace mmsqc::control {

namespace {

double probe_step(sim::Channel c)
{
    switch (c) {
    case sim::Channel::dv2:
    case sim::Channel::dv3: return 1e-4;
    case sim::Channel::gamma1:
    case sim::Channel::gamma2:
    case sim::Channel::gamma3: return 1.0;
    case sim::Channel::t_set1:
    case sim::Channel::t_rewind: return 0.1;
    default: return 1e-3;
    }
}

nn::Vector flatten(const sim::Measurement& m)
{
    nn::Vector out;
    for (const auto& x : m.x) out.insert(out.end(), x.begin(), x.end());
    return out;
}

void append_number(std::string& out, double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

} // namespace

void ClosedLoopConfig::validate() const
{
    trial.plant.validate();
    if (!(cadence > 0.0)) throw ConfigError("control cadence must be > 0");
    if (!(average_window > 0.0) || average_window > cadence) {
        throw ConfigError("averaging window must lie in (0, cadence]");
    }
    if (stage >= sim::span_count) throw ConfigError("control stage out of range");
    if (actuators.empty()) throw ConfigError("no controllable channels");
    if (!(r_weight >= 0.0)) throw ConfigError("r_weight must be >= 0");
    if (!(bound_fraction >= 0.0)) throw ConfigError("bound_fraction must be >= 0");
    if (!bounds.empty() && bounds.size() != actuators.size()) {
        throw ConfigError("need one bound per controllable channel");
    }
    for (const auto& b : bounds) {
        if (!(b.lo <= 0.0 && 0.0 <= b.hi)) throw ConfigError("bounds must contain zero");
    }
    for (double w : quality_weights) {
        if (!(w >= 0.0)) throw ConfigError("quality weights must be >= 0");
    }
    solver.validate();
}

std::size_t ClosedLoopLog::column(std::string_view name) const
{
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw UsageError("closed-loop log has no column " + std::string(name));
    return static_cast<std::size_t>(it - columns.begin());
}

std::string ClosedLoopLog::to_csv(bool with_timing) const
{
    std::vector<bool> keep(columns.size(), true);
    if (!with_timing) {
        for (std::size_t i = 0; i < columns.size(); ++i) keep[i] = columns[i] != "solve_ms";
    }
    std::string out;
    bool first = true;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (!keep[i]) continue;
        if (!first) out += ',';
        first = false;
        out += columns[i];
    }
    out += '\n';
    for (const auto& row : rows) {
        first = true;
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (!keep[i]) continue;
            if (!first) out += ',';
            first = false;
            append_number(out, row[i]);
        }
        out += '\n';
    }
    return out;
}

DeviationSummary summarize(const ClosedLoopLog& log)
{
    const auto c1 = log.column("l1"), c2 = log.column("l2"), c3 = log.column("l3");
    DeviationSummary s;
    if (log.rows.empty()) return s;
    for (const auto& r : log.rows) {
        const double d21 = std::abs(r[c2] - r[c1]), d31 = std::abs(r[c3] - r[c1]);
        s.max_21 = std::max(s.max_21, d21);
        s.max_31 = std::max(s.max_31, d31);
        s.mean_21 += d21;
        s.mean_31 += d31;
    }
    s.mean_21 /= double(log.rows.size());
    s.mean_31 /= double(log.rows.size());
    return s;
}

nn::Matrix actuation_map(const sim::PlantConfig& plant, const sim::Setpoints& sp,
                         std::span<const sim::Channel> actuators)
{
    const sim::Plant p(plant, 0);
    const auto base = flatten(p.steady_measurement(sp));
    nn::Matrix m(base.size(), actuators.size());
    for (std::size_t j = 0; j < actuators.size(); ++j) {
        const double h = probe_step(actuators[j]);
        auto hi = sp, lo = sp;
        hi[actuators[j]] += h;
        lo[actuators[j]] -= h;
        const auto fh = flatten(p.steady_measurement(hi));
        const auto fl = flatten(p.steady_measurement(lo));
        for (std::size_t i = 0; i < base.size(); ++i) m(i, j) = (fh[i] - fl[i]) / (2.0 * h);
    }
    return m;
}

double nominal_actuation(const sim::PlantConfig& plant, const sim::Setpoints& sp, sim::Channel c)
{
    using sim::Channel;
    const auto u = [&](std::size_t stage, std::size_t idx) {
        return std::abs(sim::Plant(plant, 0).steady_measurement(sp).x[stage][idx]);
    };
    switch (c) {
    case Channel::dv2: return std::abs(plant.line_speed + sp.speed_dev[0]);
    case Channel::dv3: return std::abs(plant.line_speed + sp.speed_dev[1]);
    case Channel::u0: return u(0, 1);
    case Channel::u1: return u(0, 4);
    case Channel::u2: return u(1, 2);
    case Channel::u3: return u(2, 2);
    default: return std::abs(sp[c]);
    }
}

ClosedLoopLog run_closed_loop(const sdk::SdkModel& model, const ClosedLoopConfig& config)
{
    config.validate();
    const auto& trial = config.trial;
    const auto& pc = trial.plant;
    if (model.stage_count() != sim::span_count) {
        throw ConfigError("the line has " + std::to_string(sim::span_count) + " stages, the model " +
                          std::to_string(model.stage_count()));
    }
    const double dt = pc.dt;
    const auto steps_of = [dt](double seconds, const char* what) {
        const auto n = static_cast<std::uint64_t>(std::llround(seconds / dt));
        if (n == 0 || std::abs(double(n) * dt - seconds) > 1e-9 * seconds) {
            throw ConfigError(std::string(what) + " must be a whole multiple of dt");
        }
        return n;
    };
    const auto per_log = steps_of(trial.log_period, "log_period");
    const auto per_cycle = steps_of(config.cadence, "cadence");
    const auto window = steps_of(config.average_window, "averaging window");
    const auto total = steps_of(trial.duration, "duration");

    const std::size_t k = config.stage;
    const std::size_t m = config.actuators.size();
    const sim::Setpoints& nominal_sp = trial.base;

    sim::Plant plant(pc, trial.seed);
    plant.initialize_steady(trial.schedule.apply(nominal_sp, 0.0));
    const auto x_nom = plant.steady_measurement(nominal_sp);
    std::vector<nn::Vector> x_nom_v(x_nom.x.begin(), x_nom.x.end());
    for (std::size_t s = 0; s < sim::span_count; ++s) {
        if (x_nom_v[s].size() != model.stages()[s].inputs) {
            throw ConfigError("model stage " + std::to_string(s) + " does not match the line's measurements");
        }
    }

    // Problem data that stays fixed for the whole run.
    ControlProblem base;
    base.stage = k;
    base.nominal = NominalProfile::build(model, x_nom_v);
    const auto full_map = actuation_map(pc, nominal_sp, config.actuators);
    std::size_t observed_rows = 0;
    for (std::size_t s = 0; s <= k; ++s) observed_rows += model.stages()[s].inputs;
    const auto nx = horizon_inputs(model, k);
    const auto ny = horizon_outputs(model, k);
    base.actuation = nn::Matrix(nx, m);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < m; ++j) base.actuation(i, j) = full_map(observed_rows + i, j);
    base.observed_actuation = nn::Matrix(observed_rows, m);
    for (std::size_t i = 0; i < observed_rows; ++i)
        for (std::size_t j = 0; j < m; ++j) base.observed_actuation(i, j) = full_map(i, j);
    base.q = nn::Matrix(ny, ny);
    {
        std::size_t off = 0;
        for (std::size_t l = k + 1; l < model.stage_count(); ++l) {
            const auto q = model.stages()[l].outputs;
            if (!config.quality_weights.empty() && config.quality_weights.size() != q) {
                throw ConfigError("quality_weights needs " + std::to_string(q) + " entries");
            }
            for (std::size_t i = 0; i < q; ++i) {
                base.q(off + i, off + i) = config.quality_weights.empty() ? 1.0 : config.quality_weights[i];
            }
            off += q;
        }
    }
    base.r = nn::Matrix(nx, nx);
    for (std::size_t i = 0; i < nx; ++i) base.r(i, i) = config.r_weight;
    base.lower.resize(m);
    base.upper.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        if (!config.bounds.empty()) {
            base.lower[j] = config.bounds[j].lo;
            base.upper[j] = config.bounds[j].hi;
        } else {
            const double a = config.bound_fraction * nominal_actuation(pc, nominal_sp, config.actuators[j]);
            base.lower[j] = -a;
            base.upper[j] = a;
        }
    }

    ClosedLoopLog log;
    log.columns = {"t", "stage"};
    std::vector<sim::Channel> disturbed;
    for (const auto& [c, knots] : trial.schedule.channels()) {
        disturbed.push_back(c);
        log.columns.push_back("dist_" + std::string(sim::to_string(c)));
    }
    for (auto c : config.actuators) log.columns.push_back("dX_" + std::string(sim::to_string(c)));
    const auto& y_names = model.metadata().y_names;
    for (std::size_t l = k + 1; l < model.stage_count(); ++l) {
        for (std::size_t i = 0; i < model.stages()[l].outputs; ++i) {
            const std::string name = l < y_names.size() && i < y_names[l].size()
                                         ? y_names[l][i]
                                         : "stage" + std::to_string(l) + "_y" + std::to_string(i);
            log.columns.push_back("dY_" + name);
        }
    }
    for (auto n : {"l1", "l2", "l3", "t1", "t2", "t3", "solve_ms", "obj"}) log.columns.emplace_back(n);

    nn::Vector delta(m, 0.0);
    nn::Vector dy_abs(ny, 0.0);
    double last_ms = 0.0, last_obj = 0.0;
    std::size_t failures = 0;
    std::vector<nn::Vector> sums(k + 1);
    for (std::size_t s = 0; s <= k; ++s) sums[s].assign(model.stages()[s].inputs, 0.0);
    std::size_t n_avg = 0;

    for (std::uint64_t n = 0; n < total; ++n) {
        const double t = double(n) * dt;
        if (config.enabled && n > 0 && n % per_cycle == 0) {
            ControlCycle cycle;
            cycle.time = t;
            // Strip the effect of the moves already applied so H_k describes
            // the observed stages at nominal downstream actuation.
            std::vector<nn::Vector> x_obs(k + 1);
            std::size_t row = 0;
            for (std::size_t s = 0; s <= k; ++s) {
                x_obs[s].resize(sums[s].size());
                for (std::size_t i = 0; i < sums[s].size(); ++i, ++row) {
                    double applied = 0.0;
                    for (std::size_t j = 0; j < m; ++j) applied += full_map(row, j) * delta[j];
                    x_obs[s][i] = sums[s][i] / double(n_avg) - applied;
                }
                std::fill(sums[s].begin(), sums[s].end(), 0.0);
            }
            n_avg = 0;
            try {
                ControlProblem problem = base;
                problem.latent = estimate_latent(model, k, x_obs);
                if (config.reencode_observed) {
                    problem.observed = std::move(x_obs);
                } else {
                    problem.observed_actuation = nn::Matrix();
                }
                cycle.solution = solve_adjustments(model, problem, config.solver);
                cycle.solved = true;
                failures = 0;
                delta = cycle.solution.delta;
                std::size_t off = 0;
                for (std::size_t l = k + 1; l < model.stage_count(); ++l) {
                    const auto& dy = cycle.solution.dy[l - k - 1];
                    for (std::size_t i = 0; i < dy.size(); ++i) {
                        dy_abs[off++] = dy[i] * model.norm_stats().y_std[l][i];
                    }
                }
                last_ms = cycle.solution.solve_ms;
                last_obj = cycle.solution.objective;
            } catch (const SolverError& e) {
                cycle.error = e.what();
                if (++failures > config.failsafe_budget) {
                    throw SolverError("controller failed " + std::to_string(failures) + " cycles in a row at t = " +
                                      std::to_string(t) + ": " + e.what());
                }
            }
            log.cycles.push_back(std::move(cycle));
        }

        if (n % per_log == 0) {
            const auto& st = plant.state();
            const auto meas = plant.measure();
            std::vector<double> r{t, double(k + 1)};
            for (auto c : disturbed) r.push_back(trial.schedule.offset(c, t));
            r.insert(r.end(), delta.begin(), delta.end());
            r.insert(r.end(), dy_abs.begin(), dy_abs.end());
            for (std::size_t s = 0; s < sim::span_count; ++s) r.push_back(meas.y[s][1]);
            for (std::size_t s = 0; s < sim::span_count; ++s) r.push_back(st.t[s]);
            r.push_back(last_ms);
            r.push_back(last_obj);
            log.rows.push_back(std::move(r));
        }

        auto sp = trial.schedule.apply(nominal_sp, t);
        for (std::size_t j = 0; j < m; ++j) sp[config.actuators[j]] += delta[j];
        plant.step(sp);

        const auto phase = (n + 1) % per_cycle;
        if (config.enabled && (phase == 0 || phase > per_cycle - window)) {
            const auto meas = plant.measure();
            for (std::size_t s = 0; s <= k; ++s)
                for (std::size_t i = 0; i < sums[s].size(); ++i) sums[s][i] += meas.x[s][i];
            ++n_avg;
        }
    }
    return log;
}

} // namespace mmsqc::control
