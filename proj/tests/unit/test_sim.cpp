#include "mmsqc/errors.hpp"
#include "mmsqc/sim/physics.hpp"
#include "mmsqc/sim/plant.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mmsqc;
using namespace mmsqc::sim;

namespace {

PlantConfig quiet_plant()
{
    PlantConfig cfg;
    cfg.noise = 0.0;
    return cfg;
}

// open-loop equilibrium: equal speeds and tensions, torques balance friction only
void open_loop_equilibrium(SimState& s, Drive& d, const SimConstants& c, double v, double t)
{
    s.v.fill(v);
    s.t.fill(t);
    s.gamma.fill(c.gamma0);
    d.unwind_tension = t;
    d.rewind_tension = t;
    d.gamma_set.fill(c.gamma0);
    d.torque.fill(c.friction * v / c.radius);
}

double max_state_diff(const SimState& a, const SimState& b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < span_count; ++i) m = std::max({m, std::abs(a.t[i] - b.t[i]), std::abs(a.gamma[i] - b.gamma[i])});
    for (std::size_t i = 0; i < roller_count; ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("pitch_length closed form")
{
    SimConstants c;
    CHECK(pitch_length(0.0, c.gamma0, c) == 0.10);
    CHECK(pitch_length(c.ae(), c.gamma0, c) == 0.20);
    c.alpha = 1e-5;
    CHECK(pitch_length(0.0, c.gamma0 + 50.0, c) == doctest::Approx(0.100050).epsilon(1e-14));
}

TEST_CASE("sim constants validation")
{
    SimConstants c;
    c.modulus = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    PlantConfig p;
    p.noise = -0.1;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("open-loop equilibrium is preserved")
{
    SimConstants c;
    SimState s;
    Drive d;
    open_loop_equilibrium(s, d, c, 1.0, 20.0);
    const SimState start = s;
    for (int i = 0; i < 10000; ++i) step_dynamics(s, d, c, 1e-3);
    for (std::size_t i = 0; i < span_count; ++i) CHECK(std::abs(s.t[i] - start.t[i]) < 1e-9);
    CHECK(max_state_diff(s, start) < 1e-9);
    CHECK(s.time == doctest::Approx(10.0));
}

TEST_CASE("faster downstream roller raises the span tension")
{
    SimConstants c;
    SimState s;
    Drive d;
    open_loop_equilibrium(s, d, c, 1.0, 20.0);
    s.v[2] = 1.001;
    const double before = s.t[1];
    step_dynamics(s, d, c, 1e-3);
    CHECK(s.t[1] > before);
}

TEST_CASE("rk4 step-halving agreement and convergence order")
{
    SimConstants c;
    auto run = [&](double dt, double horizon) {
        SimState s;
        Drive d;
        open_loop_equilibrium(s, d, c, 1.0, 20.0);
        s.t[1] += 0.5;
        s.v[2] += 0.002;
        const auto n = static_cast<int>(std::llround(horizon / dt));
        for (int i = 0; i < n; ++i) step_dynamics(s, d, c, dt);
        return s;
    };
    const auto a = run(1e-3, 1.0);
    const auto b = run(5e-4, 1.0);
    CHECK(max_state_diff(a, b) / 20.0 < 1e-8);

    const auto y1 = run(0.02, 1.0), y2 = run(0.01, 1.0), y3 = run(0.005, 1.0);
    const double order = std::log2(max_state_diff(y1, y2) / max_state_diff(y2, y3));
    CHECK(order >= 3.5);
}

TEST_CASE("non-finite state raises a simulation error")
{
    SimConstants c;
    SimState s;
    Drive d;
    open_loop_equilibrium(s, d, c, 1.0, 20.0);
    d.torque[1] = std::nan("");
    CHECK_THROWS_AS(step_dynamics(s, d, c, 1e-3), SimulationError);
}

TEST_CASE("tension clamp at zero")
{
    SimConstants c;
    SimState s;
    Drive d;
    open_loop_equilibrium(s, d, c, 1.0, 0.0);
    s.v[1] = 0.5; // roller 1 far slower than roller 2 would slacken span 1... use span 1 slack
    s.v[0] = 1.5;
    const bool clamped = step_dynamics(s, d, c, 1e-3);
    CHECK(clamped);
    CHECK(s.t[0] == 0.0);
}

TEST_CASE("pi controller: feedforward at zero error and integral clamp")
{
    PiController pi({2.0, 5.0, 0.3});
    CHECK(pi.command(1.25, 0.0, 1e-3) == 1.25);
    for (int i = 0; i < 100000; ++i) pi.command(0.0, 10.0, 1e-3);
    CHECK(pi.gains().ki * pi.integral() == doctest::Approx(0.3));
    CHECK(pi.command(0.0, 0.0, 1e-3) == doctest::Approx(0.3));
}

TEST_CASE("tension loop step response settles")
{
    Plant plant(quiet_plant(), 1);
    Setpoints sp;
    plant.initialize_steady(sp);
    sp.tension1 = 21.0;
    double peak = 0.0;
    for (int i = 0; i < 10000; ++i) {
        plant.step(sp);
        peak = std::max(peak, plant.state().t[0]);
    }
    CHECK(std::abs(plant.state().t[0] - 21.0) < 1e-3); // settled within 10 s
    CHECK(peak < 21.2);
}

TEST_CASE("closed-loop equilibrium drift over 100 s")
{
    Plant plant(quiet_plant(), 1);
    Setpoints sp;
    sp.speed_dev = {0.002, -0.001};
    sp.gamma = {330.0, 300.0, 390.0};
    sp.tension1 = 19.0;
    plant.initialize_steady(sp);
    const auto start = plant.state();
    for (int i = 0; i < 100000; ++i) plant.step(sp);
    CHECK(max_state_diff(plant.state(), start) < 1e-6);
}

TEST_CASE("temperature sensitivity of pitch is alpha * l0")
{
    SimConstants c;
    const double h = 1.0;
    for (double g : {293.15, 350.0, 413.15}) {
        const double slope = (pitch_length(20.0, g + h, c) - pitch_length(20.0, g - h, c)) / (2.0 * h);
        CHECK(std::abs(slope - c.alpha * c.l0) < 1e-9);
    }
}

TEST_CASE("noise envelope: long-run mean of every noisy channel tracks its command")
{
    const NoiseSource noise(123, 0.05);
    for (std::uint32_t ch = 0; ch < 6; ++ch) {
        double sum = 0.0, lo = 2.0, hi = 0.0;
        for (std::uint64_t s = 0; s < 100000; ++s) {
            const double f = noise.factor(s, ch);
            sum += f;
            lo = std::min(lo, f);
            hi = std::max(hi, f);
        }
        CHECK(std::abs(sum / 100000.0 - 1.0) < 0.01);
        CHECK(lo >= 0.95);
        CHECK(hi <= 1.05);
    }
    CHECK(NoiseSource(1, 0.0).factor(5, 2) == 1.0);
}

TEST_CASE("disturbance profile: steps, ramps and validation")
{
    DisturbanceProfile p;
    p.set(Channel::gamma1, {{10.0, 30.0, false}, {20.0, 60.0, true}});
    CHECK(p.offset(Channel::gamma1, 5.0) == 0.0);
    CHECK(p.offset(Channel::gamma1, 10.0) == 30.0);
    CHECK(p.offset(Channel::gamma1, 15.0) == 45.0);
    CHECK(p.offset(Channel::gamma1, 25.0) == 60.0);
    CHECK(p.offset(Channel::dv2, 25.0) == 0.0);
    Setpoints base;
    CHECK(p.apply(base, 12.0).gamma[0] == doctest::Approx(base.gamma[0] + 36.0));
    CHECK_THROWS_AS(p.set(Channel::dv2, {{5.0, 1.0}, {5.0, 2.0}}), ConfigError);
    CHECK(channel_from_string("t_rewind") == Channel::t_rewind);
    CHECK_THROWS_AS(channel_from_string("u9"), ConfigError);
}

TEST_CASE("run_trial: quiet equilibrium, determinism, single-factor sensitivity")
{
    TrialSpec spec;
    spec.plant = quiet_plant();
    spec.duration = 20.0;
    const auto quiet = run_trial(spec);
    CHECK(quiet.rows() == 200);
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t r = 1; r < quiet.rows(); ++r) CHECK(quiet.y[k](r, 1) == doctest::Approx(quiet.y[k](0, 1)).epsilon(1e-12));
    }

    spec.plant.noise = 0.05;
    spec.seed = 9;
    const auto a = run_trial(spec);
    const auto b = run_trial(spec);
    CHECK(a.x[0] == b.x[0]);
    CHECK(a.y[2] == b.y[2]);
    spec.seed = 10;
    CHECK(run_trial(spec).y[2] != a.y[2]);

    // tension change confined to the last span
    spec.seed = 9;
    spec.schedule.add_step(Channel::dv3, 5.0, 0.002);
    const auto stepped = run_trial(spec);
    const auto last = stepped.rows() - 1;
    CHECK(stepped.y[2](last, 1) - a.y[2](last, 1) > 100e-6);
    CHECK(std::abs(stepped.y[0](last, 1) - a.y[0](last, 1)) < 5e-6);
}

TEST_CASE("generate_dataset: smoke, row contract and determinism")
{
    GenerateConfig cfg;
    cfg.n_trials = 1;
    cfg.duration = 10.0;
    const auto one = generate_dataset(cfg);
    REQUIRE(one.trials.size() == 1);
    CHECK(one.splits[0] == train::Split::train);
    CHECK(one.trials[0].rows() == 100);

    cfg.n_trials = 4;
    cfg.seed = 5;
    cfg.test_fraction = 0.25;
    const auto a = generate_dataset(cfg);
    const auto b = generate_dataset(cfg);
    CHECK(std::count(a.splits.begin(), a.splits.end(), train::Split::test) == 1);
    const auto dir_a = std::filesystem::temp_directory_path() / "mmsqc_gen_a";
    const auto dir_b = std::filesystem::temp_directory_path() / "mmsqc_gen_b";
    write_dataset(a, dir_a);
    write_dataset(b, dir_b);
    for (const auto& e : a.index.trials) CHECK(slurp(dir_a / e.file) == slurp(dir_b / e.file));
    CHECK(slurp(dir_a / "index.json") == slurp(dir_b / "index.json"));
    const auto ds = train::load_dataset(dir_a, {});
    CHECK(ds.specs.size() == 3);
    CHECK(ds.specs[0].inputs == 6);
    CHECK(ds.x_names[2][3] == "Gamma3");
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}
