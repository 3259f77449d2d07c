#include "mmsqc/control/closed_loop.hpp"
#include "mmsqc/control/controller.hpp"
#include "mmsqc/errors.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace mmsqc;
using namespace mmsqc::control;

namespace {

sdk::SdkModel make_model(std::vector<sdk::StageSpec> specs, nn::Activation act, std::uint64_t seed,
                         std::size_t d_h = 5)
{
    sdk::SdkModel m(std::move(specs), {d_h, 8, act}, seed);
    m.norm_stats() = sdk::NormStats::identity(m.stages());
    return m;
}

std::vector<nn::Vector> random_inputs(const sdk::SdkModel& m, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<nn::Vector> x;
    for (const auto& s : m.stages()) {
        nn::Vector v(s.inputs);
        for (auto& e : v) e = n(rng);
        x.push_back(v);
    }
    return x;
}

nn::Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> d(0.0, scale);
    nn::Vector v(n);
    for (auto& e : v) e = d(rng);
    return v;
}

double norm2(const nn::Vector& v)
{
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Stage-k latent from a perturbed upstream measurement.
sdk::LatentState disturbed_latent(const sdk::SdkModel& m, const NominalProfile& nom, std::size_t k, double size)
{
    auto x = nom.x;
    for (std::size_t s = 0; s <= k; ++s)
        for (auto& v : x[s]) v += size;
    return estimate_latent(m, k, x);
}

const std::vector<sdk::StageSpec> three_stage{{3, 2}, {2, 2}, {2, 1}};

} // namespace

TEST_CASE("assess_local_variation: nominal case is exactly zero")
{
    std::mt19937_64 rng(1);
    auto m = make_model(three_stage, nn::Activation::relu, 3);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    for (std::size_t k = 0; k < 3; ++k) {
        std::optional<sdk::LatentState> prev;
        if (k > 0) prev = nom.latent[k - 1];
        const auto v = assess_local_variation(m, nom, k, prev, nn::Vector(m.stages()[k].inputs, 0.0));
        for (double d : v.dy) CHECK(d == 0.0);
        CHECK(v.latent.mean == nom.latent[k].mean);
    }
    CHECK_THROWS_AS(assess_local_variation(m, nom, 1, nom.latent[0], nn::Vector(3, 0.0)), ShapeError);
    CHECK_THROWS_AS(assess_local_variation(m, nom, 1, std::nullopt, nn::Vector(2, 0.0)), UsageError);
}

TEST_CASE("assess_local_variation: linear model gives a linear response")
{
    std::mt19937_64 rng(2);
    auto m = make_model(three_stage, nn::Activation::identity, 4);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    const auto a = random_vector(2, rng), b = random_vector(2, rng);
    nn::Vector ab{a[0] + b[0], a[1] + b[1]}, a2{2 * a[0], 2 * a[1]};
    const auto dy = [&](const nn::Vector& d) { return assess_local_variation(m, nom, 1, nom.latent[0], d).dy; };
    const auto ya = dy(a), yb = dy(b), yab = dy(ab), y2 = dy(a2);
    for (std::size_t i = 0; i < ya.size(); ++i) {
        CHECK(yab[i] == doctest::Approx(ya[i] + yb[i]).epsilon(1e-10));
        CHECK(y2[i] == doctest::Approx(2 * ya[i]).epsilon(1e-10));
    }
}

TEST_CASE("forecast_downstream: fixpoint, locality and chain oracle")
{
    std::mt19937_64 rng(3);
    auto m = make_model(three_stage, nn::Activation::softplus, 5);
    auto& st = m.norm_stats();
    for (std::size_t k = 0; k < 3; ++k) {
        st.x_mean[k] = random_vector(m.stages()[k].inputs, rng);
        for (auto& s : st.x_std[k]) s = 0.5 + std::abs(random_vector(1, rng)[0]);
    }
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));

    const auto zero = forecast_downstream(m, nom, 0, nom.latent[0], nn::Vector(4, 0.0));
    REQUIRE(zero.size() == 2);
    for (const auto& v : zero)
        for (double d : v) CHECK(d == 0.0);
    CHECK(forecast_downstream(m, nom, 2, nom.latent[2], {}).empty());
    CHECK_THROWS_AS(forecast_downstream(m, nom, 0, nom.latent[0], nn::Vector(3, 0.0)), ShapeError);

    // chain oracle: the full model on X_0 disturbed and X_1, X_2 adjusted
    auto x = nom.x;
    x[0][1] += 0.7;
    const auto dx = random_vector(4, rng, 0.3);
    const auto h0 = estimate_latent(m, 0, x);
    const auto f = forecast_downstream(m, nom, 0, h0, dx);
    x[1][0] += dx[0];
    x[1][1] += dx[1];
    x[2][0] += dx[2];
    x[2][1] += dx[3];
    std::vector<nn::Vector> xn;
    for (std::size_t k = 0; k < 3; ++k) xn.push_back(st.normalize_x(k, x[k]));
    const auto chain = m.forward_chain(xn, sdk::EpsilonPolicy::zero());
    for (std::size_t l = 1; l < 3; ++l) {
        for (std::size_t i = 0; i < f[l - 1].size(); ++i) {
            CHECK(f[l - 1][i] == doctest::Approx(chain[l].quality[i] - nom.quality[l][i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("forecast_downstream: zero Koopman decouples the horizon")
{
    std::mt19937_64 rng(4);
    auto m = make_model(three_stage, nn::Activation::relu, 6);
    for (std::size_t k = 1; k < 3; ++k) {
        m.koopman(k).mean.value.fill(0.0);
        m.koopman(k).log_std.value.fill(0.0);
    }
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    const auto h = disturbed_latent(m, nom, 0, 1.0);
    const auto base = forecast_downstream(m, nom, 0, h, nn::Vector(4, 0.0));
    for (const auto& v : base)
        for (double d : v) CHECK(d == 0.0);
    const auto moved = forecast_downstream(m, nom, 0, h, nn::Vector{0.5, -0.2, 0.0, 0.0});
    CHECK(moved[1] == base[1]);
}

TEST_CASE("control problem validation")
{
    std::mt19937_64 rng(5);
    auto m = make_model(three_stage, nn::Activation::relu, 7);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    const std::vector<std::size_t> ch{0, 2};
    const auto good = ControlProblem::with_channels(m, 0, nom.latent[0], nom, ch, {-1, -1}, {1, 1});
    CHECK_NOTHROW(good.validate(m));
    CHECK(good.actuation(2, 1) == 1.0);

    auto p = good;
    p.q(0, 1) = 0.5; // asymmetric
    CHECK_THROWS_AS(p.validate(m), ConfigError);
    p.q(1, 0) = 0.5; // symmetric, still PSD
    CHECK_NOTHROW(p.validate(m));
    p.q(0, 1) = p.q(1, 0) = 2.0; // eigenvalue -1
    CHECK_THROWS_AS(p.validate(m), ConfigError);
    p = good;
    p.r(3, 3) = -0.1;
    CHECK_THROWS_AS(p.validate(m), ConfigError);
    p = good;
    p.lower[1] = 0.1;
    CHECK_THROWS_AS(p.validate(m), ConfigError);
    p = good;
    p.q = nn::Matrix::identity(2);
    CHECK_THROWS_AS(p.validate(m), ShapeError);
    CHECK_THROWS_AS(ControlProblem::with_channels(m, 0, nom.latent[0], nom, std::vector<std::size_t>{4}, {-1}, {1}),
                    ConfigError);
    SolverConfig sc;
    sc.armijo = 1.5;
    CHECK_THROWS_AS(sc.validate(), ConfigError);
}

TEST_CASE("objective gradient matches finite differences")
{
    std::mt19937_64 rng(6);
    auto m = make_model(three_stage, nn::Activation::softplus, 8);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    auto p = ControlProblem::with_channels(m, 0, disturbed_latent(m, nom, 0, 0.5), nom,
                                           std::vector<std::size_t>{0, 1, 2, 3}, {-5, -5, -5, -5}, {5, 5, 5, 5});
    p.actuation(1, 0) = 0.4; // coupled channel
    for (std::size_t samples : {0, 3}) {
        const Objective f(m, p, samples, 11);
        const auto d = random_vector(4, rng, 0.5);
        nn::Vector g(4);
        const double v = f.value_and_gradient(d, g);
        CHECK(v == f.value(d));
        for (std::size_t i = 0; i < 4; ++i) {
            auto hi = d, lo = d;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            const double fd = (f.value(hi) - f.value(lo)) / 2e-6;
            CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
        }
    }
}

TEST_CASE("objective: re-encoding the observed stages")
{
    std::mt19937_64 rng(21);
    auto m = make_model(three_stage, nn::Activation::softplus, 4, 6);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    auto x_obs = nom.x;
    x_obs.resize(2);
    for (auto& v : x_obs[0]) v += 0.3;
    const auto h = estimate_latent(m, 1, x_obs);
    const std::vector<std::size_t> ch{0, 1};
    auto fixed = ControlProblem::with_channels(m, 1, h, nom, ch, {-3, -3}, {3, 3});

    auto p = fixed;
    p.observed = x_obs;
    p.observed_actuation = nn::Matrix(5, 2);
    CHECK_NOTHROW(p.validate(m));
    const auto d = random_vector(2, rng, 0.7);
    // zero observed rows: same problem as holding H_k
    CHECK(Objective(m, p).value(d) == doctest::Approx(Objective(m, fixed).value(d)).epsilon(1e-12));

    for (auto& v : p.observed_actuation.values()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
    const Objective f(m, p);
    nn::Vector g(2);
    const double v = f.value_and_gradient(d, g);
    for (std::size_t i = 0; i < 2; ++i) {
        auto hi = d, lo = d;
        hi[i] += 1e-6;
        lo[i] -= 1e-6;
        CHECK(g[i] == doctest::Approx((f.value(hi) - f.value(lo)) / 2e-6).epsilon(1e-6));
    }
    // value recomposed from the tape-free forecast (identity normalization)
    const auto dy = f.predicted_dy(d);
    const auto dx = f.adjustment(d);
    double oracle = 0.0;
    for (const auto& s : dy)
        for (double e : s) oracle += e * e;
    for (double e : dx) oracle += 0.01 * e * e;
    CHECK(v == doctest::Approx(oracle).epsilon(1e-12));
    // and the forecast really moved with the observed rows
    const auto held = Objective(m, fixed).predicted_dy(d);
    CHECK(std::abs(held[0][0] - dy[0][0]) > 1e-6);

    auto bad = p;
    bad.observed.pop_back();
    CHECK_THROWS_AS(bad.validate(m), ShapeError);
    bad = p;
    bad.observed_actuation = nn::Matrix(4, 2);
    CHECK_THROWS_AS(bad.validate(m), ShapeError);
    bad = fixed;
    bad.observed_actuation = nn::Matrix(5, 2);
    CHECK_THROWS_AS(bad.validate(m), ShapeError);
}

TEST_CASE("solve_adjustments: forced and nominal zero solutions")
{
    std::mt19937_64 rng(7);
    auto m = make_model(three_stage, nn::Activation::relu, 9);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    const std::vector<std::size_t> ch{0, 1, 3};
    auto p = ControlProblem::with_channels(m, 0, disturbed_latent(m, nom, 0, 1.0), nom, ch, {-2, -2, -2}, {2, 2, 2});
    p.q.fill(0.0);
    auto s = solve_adjustments(m, p);
    for (double d : s.delta) CHECK(d == 0.0);
    CHECK(s.objective == 0.0);

    auto n = ControlProblem::with_channels(m, 0, nom.latent[0], nom, ch, {-2, -2, -2}, {2, 2, 2});
    s = solve_adjustments(m, n);
    for (double d : s.delta) CHECK(std::abs(d) <= 1e-8);
    CHECK(s.converged);
}

TEST_CASE("solve_adjustments: linear chain matches the clipped ridge solution")
{
    std::mt19937_64 rng(8);
    auto m = make_model({{1, 1}, {1, 1}}, nn::Activation::identity, 10, 3);
    m.norm_stats().x_std[1][0] = 2.0; // R acts on normalized ΔX
    const auto nom = NominalProfile::build(m, {{0.3}, {-0.2}});
    const auto h = disturbed_latent(m, nom, 0, 1.5);
    const double b = forecast_downstream(m, nom, 0, h, nn::Vector{0.0})[0][0];
    const double a = forecast_downstream(m, nom, 0, h, nn::Vector{1.0})[0][0] - b;
    REQUIRE(std::abs(a) > 1e-3);
    const std::vector<std::size_t> ch{0};
    for (double q : {1.0, 3.0}) {
        for (double r : {0.01, 1.0}) {
            auto p = ControlProblem::with_channels(m, 0, h, nom, ch, {-100}, {100});
            p.q(0, 0) = q;
            p.r(0, 0) = r;
            const double r_eff = r / 4.0;
            const double ridge = -(a * q * b) / (a * q * a + r_eff);
            auto s = solve_adjustments(m, p);
            CHECK(s.delta[0] == doctest::Approx(ridge).epsilon(1e-6));
            // tight box: the clipped ridge point
            const double cap = std::abs(ridge) / 2.0;
            p.lower = {-cap};
            p.upper = {cap};
            s = solve_adjustments(m, p);
            CHECK(s.delta[0] == doctest::Approx(std::clamp(ridge, -cap, cap)).epsilon(1e-12));
        }
    }
}

TEST_CASE("solve_adjustments: feasibility, descent, determinism, regularization path")
{
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        std::mt19937_64 rng(100 + seed);
        auto m = make_model(three_stage, nn::Activation::relu, 20 + seed);
        const auto nom = NominalProfile::build(m, random_inputs(m, rng));
        const std::vector<std::size_t> ch{0, 1, 2, 3};
        auto p = ControlProblem::with_channels(m, 0, disturbed_latent(m, nom, 0, 1.0), nom, ch, {-0.3, -1, -0.5, -2},
                                               {0.4, 1, 0.1, 2});
        const auto s = solve_adjustments(m, p);
        for (std::size_t i = 0; i < ch.size(); ++i) {
            CHECK(s.delta[i] >= p.lower[i]);
            CHECK(s.delta[i] <= p.upper[i]);
        }
        CHECK(s.objective <= s.objective_at_zero);
        CHECK(std::isfinite(s.objective));
        const auto again = solve_adjustments(m, p);
        CHECK(again.delta == s.delta);
        CHECK(again.objective == s.objective);

        // Fully interior problem so the path is governed by R alone.
        p.lower.assign(4, -50.0);
        p.upper.assign(4, 50.0);
        double prev = INFINITY;
        for (double r : {1e-2, 1e-1, 1.0, 10.0}) {
            for (std::size_t i = 0; i < 4; ++i) p.r(i, i) = r;
            const double len = norm2(solve_adjustments(m, p).delta);
            CHECK(len <= prev * (1 + 1e-6) + 1e-9);
            prev = len;
        }
    }
}

TEST_CASE("solve_adjustments: last stage has an empty horizon")
{
    std::mt19937_64 rng(9);
    auto m = make_model(three_stage, nn::Activation::relu, 30);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    auto p = ControlProblem::with_channels(m, 2, disturbed_latent(m, nom, 2, 1.0), nom, {}, {}, {});
    const auto s = solve_adjustments(m, p);
    CHECK(s.delta.empty());
    CHECK(s.dy.empty());
    CHECK(s.objective == 0.0);
}

TEST_CASE("solve_adjustments: hook, Monte-Carlo flag and non-finite objective")
{
    std::mt19937_64 rng(10);
    auto m = make_model(three_stage, nn::Activation::relu, 31);
    const auto nom = NominalProfile::build(m, random_inputs(m, rng));
    const std::vector<std::size_t> ch{0, 2};
    auto p = ControlProblem::with_channels(m, 0, disturbed_latent(m, nom, 0, 1.0), nom, ch, {-1, -1}, {1, 1});

    SolverConfig hook;
    hook.custom = [](const Objective& f, const ControlProblem&) { return nn::Vector(f.dimension(), 5.0); };
    const auto h = solve_adjustments(m, p, hook);
    CHECK(h.delta == nn::Vector{1.0, 1.0}); // projected into the box

    SolverConfig mc;
    mc.mc_samples = 4;
    mc.mc_seed = 3;
    const auto a = solve_adjustments(m, p, mc), b = solve_adjustments(m, p, mc);
    CHECK(a.delta == b.delta);
    CHECK(a.objective <= a.objective_at_zero);

    p.nominal.quality[2][0] = std::nan("");
    CHECK_THROWS_AS(solve_adjustments(m, p), SolverError);
}

namespace {

sdk::SdkModel line_model(std::uint64_t seed)
{
    sdk::SdkModel m({{6, 2}, {4, 2}, {4, 2}}, {8, 16, nn::Activation::relu}, seed);
    m.norm_stats() = sdk::NormStats::identity(m.stages());
    sim::PlantConfig pc;
    const auto x = sim::Plant(pc, 0).steady_measurement({}).x;
    for (std::size_t k = 0; k < 3; ++k) {
        m.norm_stats().x_mean[k] = x[k];
        m.norm_stats().x_std[k].assign(x[k].size(), 0.01);
    }
    m.metadata().y_names = sim::quality_names();
    return m;
}

ClosedLoopConfig short_loop()
{
    ClosedLoopConfig c;
    c.trial.duration = 40.0;
    c.trial.seed = 4;
    c.trial.schedule.add_step(sim::Channel::gamma1, 5.0, 30.0);
    c.bounds = {{-0.002, 0.002}, {-0.002, 0.002}};
    return c;
}

} // namespace

TEST_CASE("actuation map matches the flux-balance derivative")
{
    sim::PlantConfig pc;
    const sim::Setpoints sp;
    const std::vector<sim::Channel> ch{sim::Channel::dv2, sim::Channel::dv3};
    const auto map = actuation_map(pc, sp, ch);
    REQUIRE(map.rows() == 14);
    const auto& c = pc.constants;
    const double flux = pc.line_speed * (c.ae() - pc.unwind_tension);
    const double dt2 = flux / (pc.line_speed * pc.line_speed); // ∂t2/∂v2
    CHECK(map(6, 0) == doctest::Approx(1.0));                  // v2
    CHECK(map(7, 0) == doctest::Approx(1.0));                  // dv2 set-point
    CHECK(map(8, 0) == doctest::Approx(c.radius * dt2 + c.friction / c.radius).epsilon(1e-6)); // u2
    CHECK(map(4, 0) == doctest::Approx(-c.radius * dt2).epsilon(1e-6));                           // u1
    CHECK(map(8, 1) == doctest::Approx(-c.radius * dt2).epsilon(1e-6));                            // u2 via t3
    CHECK(map(0, 0) == 0.0);
    CHECK(nominal_actuation(pc, sp, sim::Channel::dv2) == 1.0);
}

TEST_CASE("closed loop: disabled controller reproduces the open-loop trial")
{
    auto m = line_model(1);
    auto cfg = short_loop();
    cfg.enabled = false;
    const auto log = run_closed_loop(m, cfg);
    const auto trial = sim::run_trial(cfg.trial);
    REQUIRE(log.rows.size() == trial.rows());
    CHECK(log.cycles.empty());
    const auto l1 = log.column("l1"), l3 = log.column("l3"), t2 = log.column("t2");
    for (std::size_t r = 0; r < trial.rows(); ++r) {
        CHECK(log.rows[r][l1] == trial.y[0](r, 1));
        CHECK(log.rows[r][l3] == trial.y[2](r, 1));
        CHECK(log.rows[r][t2] == trial.y[1](r, 0));
    }
    CHECK(log.column("dist_gamma1") == 2);
    CHECK(log.columns.back() == "obj");
}

TEST_CASE("closed loop: quiet nominal run keeps adjustments at zero")
{
    auto m = line_model(2);
    auto cfg = short_loop();
    cfg.trial.schedule = {};
    cfg.trial.plant.noise = 0.0;
    const auto log = run_closed_loop(m, cfg);
    REQUIRE(log.cycles.size() == 3);
    for (const auto& c : log.cycles) {
        REQUIRE(c.solved);
        for (double d : c.solution.delta) CHECK(std::abs(d) < 1e-8);
    }
}

TEST_CASE("closed loop: bounds, descent on every cycle and the fail-safe budget")
{
    auto m = line_model(3);
    auto cfg = short_loop();
    const auto log = run_closed_loop(m, cfg);
    REQUIRE(log.cycles.size() == 3);
    for (const auto& c : log.cycles) {
        CHECK(c.solution.objective <= c.solution.objective_at_zero);
        for (double d : c.solution.delta) CHECK(std::abs(d) <= 0.002);
    }
    const auto again = run_closed_loop(m, cfg);
    CHECK(again.rows.size() == log.rows.size());
    CHECK(again.rows.back()[again.column("l3")] == log.rows.back()[log.column("l3")]);

    cfg.solver.custom = [](const Objective&, const ControlProblem&) -> nn::Vector {
        throw SolverError("injected");
    };
    cfg.failsafe_budget = 3;
    const auto held = run_closed_loop(m, cfg); // three failures fit in the budget
    for (const auto& c : held.cycles) CHECK_FALSE(c.solved);
    CHECK(held.rows.back()[held.column("dX_dv2")] == 0.0);
    cfg.failsafe_budget = 2;
    CHECK_THROWS_AS(run_closed_loop(m, cfg), SolverError);
    cfg.average_window = 20.0;
    CHECK_THROWS_AS(run_closed_loop(m, cfg), ConfigError);
}
