#include "mmsqc/sim/plant.hpp"

#include "mmsqc/errors.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

namespace mmsqc::sim {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept
{
    // splitmix64 finalizer over a combined key
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double PiController::command(double feedforward, double error, double dt)
{
    integral_ += error * dt;
    if (gains_.ki > 0.0) {
        const double cap = gains_.integral_limit / gains_.ki;
        integral_ = std::clamp(integral_, -cap, cap);
    }
    return feedforward + gains_.kp * error + gains_.ki * integral_;
}

double NoiseSource::factor(std::uint64_t step, std::uint32_t channel) const noexcept
{
    if (amplitude_ == 0.0) return 1.0;
    const std::uint64_t bits = mix_seed(mix_seed(seed_, step), channel);
    const double u = static_cast<double>(bits >> 11) * 0x1.0p-53; // [0, 1)
    return 1.0 + amplitude_ * (2.0 * u - 1.0);
}

namespace {

constexpr std::pair<Channel, std::string_view> channel_names[] = {
    {Channel::t_set1, "t_set1"}, {Channel::dv2, "dv2"},       {Channel::dv3, "dv3"},
    {Channel::gamma1, "gamma1"}, {Channel::gamma2, "gamma2"}, {Channel::gamma3, "gamma3"},
    {Channel::t_rewind, "t_rewind"}, {Channel::u0, "u0"},     {Channel::u1, "u1"},
    {Channel::u2, "u2"},         {Channel::u3, "u3"},
};

} // namespace

std::string_view to_string(Channel c) noexcept
{
    for (const auto& [ch, name] : channel_names) {
        if (ch == c) return name;
    }
    return "?";
}

Channel channel_from_string(std::string_view s)
{
    for (const auto& [ch, name] : channel_names) {
        if (name == s) return ch;
    }
    throw ConfigError("unknown plant channel '" + std::string(s) + "'");
}

double& Setpoints::operator[](Channel c)
{
    switch (c) {
    case Channel::t_set1: return tension1;
    case Channel::dv2: return speed_dev[0];
    case Channel::dv3: return speed_dev[1];
    case Channel::gamma1: return gamma[0];
    case Channel::gamma2: return gamma[1];
    case Channel::gamma3: return gamma[2];
    case Channel::t_rewind: return rewind_tension;
    case Channel::u0: return torque_offset[0];
    case Channel::u1: return torque_offset[1];
    case Channel::u2: return torque_offset[2];
    case Channel::u3: return torque_offset[3];
    }
    return tension1;
}

double Setpoints::operator[](Channel c) const { return const_cast<Setpoints&>(*this)[c]; }

void DisturbanceProfile::set(Channel c, std::vector<Knot> knots)
{
    for (std::size_t i = 0; i < knots.size(); ++i) {
        if (!std::isfinite(knots[i].time) || !std::isfinite(knots[i].value)) {
            throw ConfigError("disturbance knots must be finite");
        }
        if (i > 0 && !(knots[i].time > knots[i - 1].time)) {
            throw ConfigError("disturbance schedule times must strictly increase (channel " +
                              std::string(to_string(c)) + ")");
        }
    }
    if (knots.empty()) {
        knots_.erase(c);
    } else {
        knots_[c] = std::move(knots);
    }
}

void DisturbanceProfile::add_step(Channel c, double time, double value)
{
    auto knots = knots_.count(c) ? knots_.at(c) : std::vector<Knot>{};
    knots.push_back({time, value, false});
    set(c, std::move(knots));
}

double DisturbanceProfile::offset(Channel c, double time) const
{
    const auto it = knots_.find(c);
    if (it == knots_.end()) return 0.0;
    const auto& k = it->second;
    double prev_t = 0.0, prev_v = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (time < k[i].time) {
            if (k[i].ramp) {
                const double span = k[i].time - prev_t;
                const double frac = span > 0.0 ? std::clamp((time - prev_t) / span, 0.0, 1.0) : 1.0;
                return prev_v + frac * (k[i].value - prev_v);
            }
            return prev_v;
        }
        prev_t = k[i].time;
        prev_v = k[i].value;
    }
    return prev_v;
}

Setpoints DisturbanceProfile::apply(Setpoints base, double time) const
{
    for (const auto& [c, knots] : knots_) base[c] += offset(c, time);
    return base;
}

void PlantConfig::validate() const
{
    constants.validate();
    if (!(line_speed > 0.0)) throw ConfigError("line_speed must be > 0");
    if (!(unwind_tension >= 0.0) || unwind_tension >= constants.ae()) {
        throw ConfigError("unwind_tension must lie in [0, AE)");
    }
    if (!(dt > 0.0)) throw ConfigError("dt must be > 0");
    if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("noise amplitude must lie in [0, 1)");
    for (const auto* g : {&speed, &tension}) {
        if (g->kp < 0.0 || g->ki < 0.0 || g->integral_limit < 0.0) throw ConfigError("PI gains must be >= 0");
    }
    if (tension_damping < 0.0 || !(torque_limit > 0.0)) throw ConfigError("invalid drive limits");
}

std::vector<std::vector<std::string>> measurement_names()
{
    return {{"v0", "u0", "v1", "dv1", "u1", "Gamma1"}, {"v2", "dv2", "u2", "Gamma2"}, {"v3", "dv3", "u3", "Gamma3"}};
}

std::vector<std::vector<std::string>> quality_names() { return {{"t1", "l1"}, {"t2", "l2"}, {"t3", "l3"}}; }

Plant::Plant(PlantConfig config, std::uint64_t noise_seed)
    : config_(config), noise_(noise_seed, config.noise)
{
    config_.validate();
    pi_[0] = PiController(config_.speed);
    pi_[1] = PiController(config_.tension);
    pi_[2] = PiController(config_.speed);
    pi_[3] = PiController(config_.speed);
}

SimState Plant::steady_state(const Setpoints& sp) const
{
    const auto& c = config_.constants;
    const double ae = c.ae();
    const double v = config_.line_speed;
    const double flux = v * (ae - config_.unwind_tension);
    if (!(sp.tension1 < ae)) throw ConfigError("tension set-point must stay below AE");
    SimState s;
    s.v[0] = v;
    s.v[1] = flux / (ae - sp.tension1);
    s.v[2] = v + sp.speed_dev[0];
    s.v[3] = v + sp.speed_dev[1];
    if (!(s.v[2] > 0.0) || !(s.v[3] > 0.0)) throw ConfigError("speed set-points must stay positive");
    s.t[0] = sp.tension1;
    s.t[1] = ae - flux / s.v[2];
    s.t[2] = ae - flux / s.v[3];
    s.gamma = sp.gamma;
    return s;
}

void Plant::initialize_steady(const Setpoints& sp)
{
    state_ = steady_state(sp);
    step_ = 0;
    clamps_ = 0;
    last_sp_ = sp;
    const double r = config_.constants.radius;
    const double b = config_.constants.friction;
    const auto& s = state_;
    const double t_in[] = {config_.unwind_tension, s.t[0], s.t[1], s.t[2]};
    const double t_out[] = {s.t[0], s.t[1], s.t[2], sp.rewind_tension};
    for (std::size_t i = 0; i < roller_count; ++i) {
        commanded_[i] = r * (t_in[i] - t_out[i]) + b * s.v[i] / r;
        // the integral term absorbs any supervisory torque offset
        const double ki = pi_[i].gains().ki;
        pi_[i].reset(ki > 0.0 ? -sp.torque_offset[i] / ki : 0.0);
    }
}

std::array<double, roller_count> Plant::control(const Setpoints& sp, const SimState& s, std::uint64_t step,
                                                bool noisy)
{
    const auto& c = config_.constants;
    const double r = c.radius;
    const double b = c.friction;
    const double dt = config_.dt;
    const double v = config_.line_speed;
    const double ae = c.ae();
    auto nz = [&](std::uint32_t ch) { return noisy ? noise_.factor(step, ch) : 1.0; };
    std::array<double, roller_count> u{};

    u[0] = pi_[0].command(r * (config_.unwind_tension - s.t[0]) + b * v / r + sp.torque_offset[0], v - s.v[0], dt);

    const double v1_ref = v * (ae - config_.unwind_tension) / (ae - sp.tension1);
    const double ff1 = r * (sp.tension1 - s.t[1]) + b * v1_ref / r + config_.tension_damping * (v1_ref - s.v[1]);
    u[1] = pi_[1].command(ff1 + sp.torque_offset[1], sp.tension1 - s.t[0], dt);

    const double v2_ref = v + sp.speed_dev[0] * nz(4);
    u[2] = pi_[2].command(r * (s.t[1] - s.t[2]) + b * v2_ref / r + sp.torque_offset[2], v2_ref - s.v[2], dt);

    const double v3_ref = v + sp.speed_dev[1] * nz(5);
    u[3] = pi_[3].command(r * (s.t[2] - sp.rewind_tension) + b * v3_ref / r + sp.torque_offset[3], v3_ref - s.v[3],
                          dt);

    for (auto& x : u) x = std::clamp(x, -config_.torque_limit, config_.torque_limit);
    return u;
}

void Plant::step(const Setpoints& sp)
{
    const bool noisy = config_.noise > 0.0;
    commanded_ = control(sp, state_, step_, noisy);
    Drive d;
    for (std::size_t i = 0; i < roller_count; ++i) {
        d.torque[i] = commanded_[i] * (noisy ? noise_.factor(step_, static_cast<std::uint32_t>(i)) : 1.0);
    }
    d.gamma_set = sp.gamma;
    d.unwind_tension = config_.unwind_tension;
    d.rewind_tension = sp.rewind_tension;
    if (step_dynamics(state_, d, config_.constants, config_.dt)) ++clamps_;
    last_sp_ = sp;
    ++step_;
}

namespace {

Measurement make_measurement(const SimState& s, const std::array<double, roller_count>& u, const Setpoints& sp,
                             const PlantConfig& cfg)
{
    Measurement m;
    m.x[0] = {s.v[0], u[0], s.v[1], s.v[1] - cfg.line_speed, u[1], s.gamma[0]};
    m.x[1] = {s.v[2], sp.speed_dev[0], u[2], s.gamma[1]};
    m.x[2] = {s.v[3], sp.speed_dev[1], u[3], s.gamma[2]};
    for (std::size_t k = 0; k < span_count; ++k) {
        m.y[k] = {s.t[k], pitch_length(s.t[k], s.gamma[k], cfg.constants)};
    }
    return m;
}

} // namespace

Measurement Plant::measure() const { return make_measurement(state_, commanded_, last_sp_, config_); }

Measurement Plant::steady_measurement(const Setpoints& sp) const
{
    Plant tmp(config_, 0);
    tmp.initialize_steady(sp);
    return tmp.measure();
}

train::Trial run_trial(const TrialSpec& spec)
{
    const double dt = spec.plant.dt;
    const auto per_log = static_cast<std::uint64_t>(std::llround(spec.log_period / dt));
    if (per_log == 0 || std::abs(double(per_log) * dt - spec.log_period) > 1e-9 * spec.log_period) {
        throw ConfigError("log_period must be a whole multiple of dt");
    }
    if (!(spec.duration > 0.0)) throw ConfigError("duration must be > 0");
    const auto total = static_cast<std::uint64_t>(std::llround(spec.duration / dt));

    Plant plant(spec.plant, spec.seed);
    plant.initialize_steady(spec.schedule.apply(spec.base, 0.0));
    train::Trial trial;
    trial.id = spec.id;
    for (std::size_t k = 0; k < span_count; ++k) {
        trial.x.emplace_back(0, plant.measure().x[k].size());
        trial.y.emplace_back(0, 2);
    }
    std::array<std::vector<double>, span_count> xd, yd;
    for (std::uint64_t n = 0; n < total; ++n) {
        if (n % per_log == 0) {
            const auto m = plant.measure();
            trial.t.push_back(double(n) * dt);
            for (std::size_t k = 0; k < span_count; ++k) {
                xd[k].insert(xd[k].end(), m.x[k].begin(), m.x[k].end());
                yd[k].insert(yd[k].end(), m.y[k].begin(), m.y[k].end());
            }
        }
        plant.step(spec.schedule.apply(spec.base, double(n) * dt));
    }
    for (std::size_t k = 0; k < span_count; ++k) {
        const auto cols = trial.x[k].cols();
        trial.x[k] = nn::Matrix(trial.t.size(), cols, std::move(xd[k]));
        trial.y[k] = nn::Matrix(trial.t.size(), 2, std::move(yd[k]));
    }
    return trial;
}

void GenerateConfig::validate() const
{
    plant.validate();
    if (n_trials == 0) throw ConfigError("n_trials must be >= 1");
    if (!(duration > 0.0) || !(log_period > 0.0)) throw ConfigError("duration and log_period must be > 0");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must lie in [0, 1)");
    for (const auto* r : {&ranges.tension1, &ranges.speed_dev, &ranges.gamma, &ranges.rewind_tension,
                          &ranges.event_interval}) {
        if (!(r->lo <= r->hi)) throw ConfigError("schedule ranges need lo <= hi");
    }
    if (!(ranges.event_interval.lo > 0.0)) throw ConfigError("event interval must be > 0");
}

DisturbanceProfile random_schedule(const GenerateConfig& cfg, std::mt19937_64& rng)
{
    const auto& rg = cfg.ranges;
    auto draw = [&](const Range& r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
    const Channel channels[] = {Channel::t_set1, Channel::dv2,    Channel::dv3,     Channel::gamma1,
                                Channel::gamma2, Channel::gamma3, Channel::t_rewind};
    auto range_of = [&](Channel c) -> const Range& {
        switch (c) {
        case Channel::t_set1: return rg.tension1;
        case Channel::dv2:
        case Channel::dv3: return rg.speed_dev;
        case Channel::t_rewind: return rg.rewind_tension;
        default: return rg.gamma;
        }
    };
    std::map<Channel, std::vector<DisturbanceProfile::Knot>> knots;
    for (auto c : channels) knots[c].push_back({0.0, draw(range_of(c)) - cfg.nominal[c], false});
    double t = draw(rg.event_interval);
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<std::size_t> pick(0, std::size(channels) - 1);
    while (t < cfg.duration) {
        bool any = false;
        for (auto c : channels) {
            if (coin(rng)) {
                knots[c].push_back({t, draw(range_of(c)) - cfg.nominal[c], false});
                any = true;
            }
        }
        if (!any) {
            const auto c = channels[pick(rng)];
            knots[c].push_back({t, draw(range_of(c)) - cfg.nominal[c], false});
        }
        t += draw(rg.event_interval);
    }
    DisturbanceProfile p;
    for (auto& [c, k] : knots) p.set(c, std::move(k));
    return p;
}

GeneratedDataset generate_dataset(const GenerateConfig& cfg)
{
    cfg.validate();
    GeneratedDataset out;
    const std::size_t n = cfg.n_trials;
    out.trials.resize(n);
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        try {
            std::mt19937_64 rng(mix_seed(cfg.seed, 2 * std::uint64_t(i)));
            TrialSpec spec;
            spec.plant = cfg.plant;
            spec.base = cfg.nominal;
            spec.schedule = random_schedule(cfg, rng);
            spec.duration = cfg.duration;
            spec.log_period = cfg.log_period;
            spec.seed = mix_seed(cfg.seed, 2 * std::uint64_t(i) + 1);
            char id[32];
            std::snprintf(id, sizeof id, "trial_%03zu", static_cast<std::size_t>(i));
            spec.id = id;
            out.trials[i] = run_trial(spec);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 split_rng(mix_seed(cfg.seed, 0x5eed5eedULL));
    std::shuffle(order.begin(), order.end(), split_rng);
    auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * double(n)));
    n_test = std::min(n_test, n - 1);
    out.splits.assign(n, train::Split::train);
    for (std::size_t i = 0; i < n_test; ++i) out.splits[order[i]] = train::Split::test;

    out.index.sample_period = cfg.log_period;
    out.index.seed = cfg.seed;
    out.index.x_names = measurement_names();
    out.index.y_names = quality_names();
    for (std::size_t i = 0; i < n; ++i) out.index.trials.push_back({out.trials[i].id + ".csv", out.splits[i]});
    return out;
}

void write_dataset(const GeneratedDataset& data, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    for (const auto& t : data.trials) train::write_trial_csv(t, dir / (t.id + ".csv"));
    train::write_index(data.index, dir);
}

} // namespace mmsqc::sim
