#include "mmsqc/control/controller.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/ops.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace mmsqc::control {

namespace {

struct StageResult {
    sdk::LatentState state;
    nn::Vector quality;
};

// One ε = 0 stage on absolute measurements; shared by every tape-free path so
// the nominal profile and the perturbed evaluations round identically.
StageResult run_stage(const sdk::SdkModel& model, std::size_t k, const sdk::LatentState* prev,
                      std::span<const double> x_abs)
{
    if (x_abs.size() != model.stages()[k].inputs) {
        throw ShapeError("stage " + std::to_string(k) + " expects " + std::to_string(model.stages()[k].inputs) +
                         " measurements, got " + std::to_string(x_abs.size()));
    }
    const auto local = model.encode_stage(k, model.norm_stats().normalize_x(k, x_abs));
    StageResult out;
    if (k == 0) {
        if (prev) {
            throw UsageError("stage 0 has no upstream latent");
        }
        out.state = local;
    } else {
        if (!prev) {
            throw UsageError("stage " + std::to_string(k) + " needs the upstream latent");
        }
        out.state = sdk::propagate(model.koopman(k), *prev, local);
    }
    out.quality = model.predict_quality(k, out.state.mean);
    return out;
}

nn::Vector diff(const nn::Vector& a, const nn::Vector& b)
{
    nn::Vector d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

void check_weight(const nn::Matrix& w, std::size_t n, const char* name)
{
    if (w.rows() != n || w.cols() != n) {
        throw ShapeError(std::string(name) + " must be " + std::to_string(n) + "x" + std::to_string(n));
    }
    if (!w.all_finite()) {
        throw ConfigError(std::string(name) + " has non-finite entries");
    }
    double scale = 1.0;
    bool diagonal = true;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scale = std::max(scale, std::abs(w(i, j)));
            if (i != j && w(i, j) != 0.0) diagonal = false;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(w(i, j) - w(j, i)) > 1e-12 * scale) {
                throw ConfigError(std::string(name) + " is not symmetric");
            }
        }
    }
    if (diagonal) {
        for (std::size_t i = 0; i < n; ++i) {
            if (w(i, i) < 0.0) throw ConfigError(std::string(name) + " has a negative diagonal entry");
        }
        return;
    }
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = w(i, j);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10 * scale) {
        throw ConfigError(std::string(name) + " is not positive semi-definite");
    }
}

double dot(std::span<const double> a, std::span<const double> b)
{
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

} // namespace

NominalProfile NominalProfile::build(const sdk::SdkModel& model, std::vector<nn::Vector> x_nom)
{
    if (x_nom.size() != model.stage_count()) {
        throw ShapeError("nominal profile needs measurements for every stage");
    }
    NominalProfile p;
    p.x = std::move(x_nom);
    for (std::size_t k = 0; k < model.stage_count(); ++k) {
        auto r = run_stage(model, k, k == 0 ? nullptr : &p.latent.back(), p.x[k]);
        p.latent.push_back(std::move(r.state));
        p.quality.push_back(std::move(r.quality));
    }
    return p;
}

sdk::LatentState estimate_latent(const sdk::SdkModel& model, std::size_t k, std::span<const nn::Vector> x)
{
    if (k >= model.stage_count() || x.size() < k + 1) {
        throw UsageError("estimate_latent: need measurements of stages 0.." + std::to_string(k));
    }
    sdk::LatentState h;
    for (std::size_t s = 0; s <= k; ++s) {
        h = run_stage(model, s, s == 0 ? nullptr : &h, x[s]).state;
    }
    return h;
}

LocalVariation assess_local_variation(const sdk::SdkModel& model, const NominalProfile& nominal, std::size_t k,
                                      const std::optional<sdk::LatentState>& prev, std::span<const double> dx)
{
    if (k >= model.stage_count() || nominal.x.size() != model.stage_count()) {
        throw UsageError("assess_local_variation: stage out of range");
    }
    const auto& xn = nominal.x[k];
    if (dx.size() != xn.size()) {
        throw ShapeError("assess_local_variation: adjustment has " + std::to_string(dx.size()) + " entries, stage " +
                         std::to_string(k) + " has " + std::to_string(xn.size()));
    }
    nn::Vector x(xn.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = xn[i] + dx[i];
    auto r = run_stage(model, k, prev ? &*prev : nullptr, x);
    return {std::move(r.state), diff(r.quality, nominal.quality[k])};
}

std::size_t horizon_inputs(const sdk::SdkModel& model, std::size_t k)
{
    std::size_t n = 0;
    for (std::size_t l = k + 1; l < model.stage_count(); ++l) n += model.stages()[l].inputs;
    return n;
}

std::size_t horizon_outputs(const sdk::SdkModel& model, std::size_t k)
{
    std::size_t n = 0;
    for (std::size_t l = k + 1; l < model.stage_count(); ++l) n += model.stages()[l].outputs;
    return n;
}

std::vector<nn::Vector> forecast_downstream(const sdk::SdkModel& model, const NominalProfile& nominal, std::size_t k,
                                            const sdk::LatentState& h_k, std::span<const double> dx)
{
    if (dx.size() != horizon_inputs(model, k)) {
        throw ShapeError("forecast_downstream: adjustment must have " + std::to_string(horizon_inputs(model, k)) +
                         " entries");
    }
    std::vector<nn::Vector> out;
    std::optional<sdk::LatentState> prev = h_k;
    std::size_t off = 0;
    for (std::size_t l = k + 1; l < model.stage_count(); ++l) {
        const auto p = model.stages()[l].inputs;
        auto v = assess_local_variation(model, nominal, l, prev, dx.subspan(off, p));
        off += p;
        prev = std::move(v.latent);
        out.push_back(std::move(v.dy));
    }
    return out;
}

void ControlProblem::validate(const sdk::SdkModel& model) const
{
    if (stage >= model.stage_count()) {
        throw ConfigError("control stage " + std::to_string(stage) + " out of range");
    }
    if (nominal.x.size() != model.stage_count() || nominal.latent.size() != model.stage_count()) {
        throw ShapeError("nominal profile does not match the model");
    }
    if (latent.mean.size() != model.latent_dim() || latent.log_std.size() != model.latent_dim()) {
        throw ShapeError("latent state must have " + std::to_string(model.latent_dim()) + " entries");
    }
    const auto nx = horizon_inputs(model, stage);
    check_weight(q, horizon_outputs(model, stage), "Q");
    check_weight(r, nx, "R");
    if (upper.size() != lower.size()) {
        throw ShapeError("bounds: lower and upper differ in length");
    }
    if (actuation.rows() != nx || actuation.cols() != lower.size()) {
        throw ShapeError("actuation map must be " + std::to_string(nx) + "x" + std::to_string(lower.size()));
    }
    if (!actuation.all_finite()) {
        throw ConfigError("actuation map has non-finite entries");
    }
    for (std::size_t i = 0; i < lower.size(); ++i) {
        if (!(lower[i] <= 0.0 && 0.0 <= upper[i])) {
            throw ConfigError("bounds for actuator " + std::to_string(i) + " exclude the nominal point");
        }
    }
    if (observed.empty()) {
        if (observed_actuation.rows() != 0) throw ShapeError("observed actuation given without observed measurements");
        return;
    }
    if (observed.size() != stage + 1) {
        throw ShapeError("observed measurements must cover stages 0.." + std::to_string(stage));
    }
    std::size_t rows = 0;
    for (std::size_t s = 0; s <= stage; ++s) {
        if (observed[s].size() != model.stages()[s].inputs) {
            throw ShapeError("observed stage " + std::to_string(s) + " has the wrong number of measurements");
        }
        rows += observed[s].size();
    }
    if (observed_actuation.rows() != rows || observed_actuation.cols() != lower.size()) {
        throw ShapeError("observed actuation must be " + std::to_string(rows) + "x" + std::to_string(lower.size()));
    }
    if (!observed_actuation.all_finite()) {
        throw ConfigError("observed actuation has non-finite entries");
    }
}

ControlProblem ControlProblem::with_channels(const sdk::SdkModel& model, std::size_t stage, sdk::LatentState latent,
                                             NominalProfile nominal, std::span<const std::size_t> channels,
                                             nn::Vector lower, nn::Vector upper)
{
    ControlProblem p;
    p.stage = stage;
    p.latent = std::move(latent);
    p.nominal = std::move(nominal);
    const auto nx = horizon_inputs(model, stage);
    p.q = nn::Matrix::identity(horizon_outputs(model, stage));
    p.r = nn::Matrix::identity(nx);
    for (auto& v : p.r.values()) v *= 0.01;
    p.actuation = nn::Matrix(nx, channels.size());
    for (std::size_t j = 0; j < channels.size(); ++j) {
        if (channels[j] >= nx) {
            throw ConfigError("controllable channel " + std::to_string(channels[j]) + " outside the horizon");
        }
        p.actuation(channels[j], j) = 1.0;
    }
    p.lower = std::move(lower);
    p.upper = std::move(upper);
    return p;
}

Objective::Objective(const sdk::SdkModel& model, const ControlProblem& problem, std::size_t mc_samples,
                     std::uint64_t mc_seed)
    : model_(model), problem_(problem)
{
    problem.validate(model);
    const auto m = problem.actuators();
    const auto& stats = model.norm_stats();
    map_all_ = nn::Matrix(problem.actuation.rows(), m);
    std::size_t off = 0;
    for (std::size_t l = problem.stage + 1; l < model.stage_count(); ++l) {
        const auto p = model.stages()[l].inputs;
        nn::Matrix ml(p, m);
        for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t a = 0; a < m; ++a) {
                ml(i, a) = problem.actuation(off + i, a) / stats.x_std[l][i];
                map_all_(off + i, a) = ml(i, a);
            }
        }
        map_.push_back(std::move(ml));
        x_nom_.push_back(nn::Matrix::row_vector(stats.normalize_x(l, problem.nominal.x[l])));
        off += p;
    }
    if (problem.reencodes()) {
        std::size_t row = 0;
        for (std::size_t k = 0; k <= problem.stage; ++k) {
            const auto p = model.stages()[k].inputs;
            nn::Matrix mk(p, m);
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t a = 0; a < m; ++a) mk(i, a) = problem.observed_actuation(row + i, a) / stats.x_std[k][i];
            row += p;
            obs_map_.push_back(std::move(mk));
            x_obs_.push_back(nn::Matrix::row_vector(stats.normalize_x(k, problem.observed[k])));
        }
    }
    std::mt19937_64 rng(mc_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t s = 0; s < mc_samples; ++s) {
        std::vector<nn::Matrix> draw;
        for (std::size_t j = 0; j < map_.size(); ++j) {
            nn::Matrix e(1, model.latent_dim());
            for (auto& v : e.values()) v = normal(rng);
            draw.push_back(std::move(e));
        }
        eps_.push_back(std::move(draw));
    }
}

double Objective::value(std::span<const double> delta) const
{
    return evaluate(delta, {});
}

double Objective::value_and_gradient(std::span<const double> delta, std::span<double> grad) const
{
    if (grad.size() != dimension()) {
        throw ShapeError("gradient buffer has the wrong length");
    }
    return evaluate(delta, grad);
}

nn::Vector Objective::adjustment(std::span<const double> delta) const
{
    const auto& a = problem_.actuation;
    nn::Vector dx(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) dx[i] = dot(a.row(i), delta);
    return dx;
}

std::vector<nn::Vector> Objective::predicted_dy(std::span<const double> delta) const
{
    if (!problem_.reencodes()) {
        return forecast_downstream(model_, problem_.nominal, problem_.stage, problem_.latent, adjustment(delta));
    }
    auto x = problem_.observed;
    const auto& a = problem_.observed_actuation;
    std::size_t row = 0;
    for (auto& xs : x)
        for (auto& v : xs) v += dot(a.row(row++), delta);
    const auto h = estimate_latent(model_, problem_.stage, x);
    return forecast_downstream(model_, problem_.nominal, problem_.stage, h, adjustment(delta));
}

double Objective::evaluate(std::span<const double> delta, std::span<double> grad) const
{
    if (delta.size() != dimension()) {
        throw ShapeError("objective expects " + std::to_string(dimension()) + " actuator moves");
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    if (map_.empty()) {
        return 0.0; // nothing downstream left to steer
    }
    using namespace nn::ops;
    nn::Tape tape;
    tape.set_frozen_parameters(true);
    // Parameters only enter as frozen leaves here; the model is never written.
    auto& model = const_cast<sdk::SdkModel&>(model_);
    const auto d_row = nn::Matrix::row_vector(delta);
    const nn::Var d = grad.empty() ? tape.constant(d_row) : tape.input(d_row);

    std::vector<nn::Var> x;
    for (std::size_t j = 0; j < map_.size(); ++j) {
        x.push_back(add(tape.constant(x_nom_[j]), linear(d, tape.constant(map_[j]))));
    }
    nn::Var h_mean, h_log_std;
    if (problem_.reencodes()) {
        for (std::size_t k = 0; k < x_obs_.size(); ++k) {
            const auto xk = add(tape.constant(x_obs_[k]), linear(d, tape.constant(obs_map_[k])));
            auto st = model.forward_stage(tape, k, xk, h_mean, h_log_std, nn::Var{}, false);
            h_mean = st.mean;
            h_log_std = st.log_std;
        }
    } else {
        h_mean = tape.constant(nn::Matrix::row_vector(problem_.latent.mean));
        h_log_std = tape.constant(nn::Matrix::row_vector(problem_.latent.log_std));
    }
    const std::size_t samples = std::max<std::size_t>(1, eps_.size());
    std::vector<nn::Var> terms;
    for (std::size_t s = 0; s < samples; ++s) {
        nn::Var pm = h_mean, ps = h_log_std;
        std::vector<nn::Var> dy;
        for (std::size_t j = 0; j < map_.size(); ++j) {
            const auto l = problem_.stage + 1 + j;
            const nn::Var eps = eps_.empty() ? nn::Var{} : tape.constant(eps_[s][j]);
            auto st = model.forward_stage(tape, l, x[j], pm, ps, eps, false);
            dy.push_back(sub(st.quality, tape.constant(nn::Matrix::row_vector(problem_.nominal.quality[l]))));
            pm = st.mean;
            ps = st.log_std;
        }
        terms.push_back(quadratic_form(concat_cols(dy), problem_.q));
    }
    terms.push_back(quadratic_form(linear(d, tape.constant(map_all_)), problem_.r));
    std::vector<double> w(terms.size(), 1.0 / static_cast<double>(samples));
    w.back() = 1.0;
    const auto j = weighted_sum(terms, w);
    const double value = j.scalar();
    if (!grad.empty()) {
        tape.backward(j);
        const auto g = d.grad().values();
        std::copy(g.begin(), g.end(), grad.begin());
    }
    return value;
}

void SolverConfig::validate() const
{
    if (max_iterations == 0) throw ConfigError("solver: max_iterations must be positive");
    if (!(tolerance > 0.0)) throw ConfigError("solver: tolerance must be positive");
    if (!(armijo > 0.0 && armijo < 1.0)) throw ConfigError("solver: armijo constant must lie in (0, 1)");
}

ControlSolution solve_adjustments(const sdk::SdkModel& model, const ControlProblem& problem,
                                  const SolverConfig& config)
{
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const Objective f(model, problem, config.mc_samples, config.mc_seed);
    const auto m = problem.actuators();
    const auto finite_or_throw = [](double v, std::size_t it) {
        if (!std::isfinite(v)) {
            throw SolverError("non-finite objective at iteration " + std::to_string(it));
        }
        return v;
    };
    const auto project = [&](nn::Vector& v) {
        for (std::size_t i = 0; i < m; ++i) v[i] = std::clamp(v[i], problem.lower[i], problem.upper[i]);
    };

    ControlSolution sol;
    nn::Vector x(m, 0.0), g(m);
    double fx = finite_or_throw(f.value_and_gradient(x, g), 0);
    sol.objective_at_zero = fx;
    nn::Vector best = x;
    double f_best = fx;

    if (config.custom) {
        best = config.custom(f, problem);
        if (best.size() != m) throw SolverError("custom solver returned the wrong number of moves");
        project(best);
        f_best = finite_or_throw(f.value(best), 0);
    } else {
        double alpha = 1.0;
        const double gn = std::sqrt(dot(g, g));
        if (gn > 0.0) alpha = 1.0 / gn;
        nn::Vector xn(m), gnext(m);
        for (std::size_t it = 0; it < config.max_iterations; ++it) {
            nn::Vector probe(m);
            for (std::size_t i = 0; i < m; ++i) probe[i] = x[i] - g[i];
            project(probe);
            double pg = 0.0;
            for (std::size_t i = 0; i < m; ++i) pg += (x[i] - probe[i]) * (x[i] - probe[i]);
            if (std::sqrt(pg) < config.tolerance) {
                sol.converged = true;
                break;
            }
            bool accepted = false;
            double fn = fx;
            for (std::size_t b = 0; b <= config.max_backtracks; ++b) {
                for (std::size_t i = 0; i < m; ++i) xn[i] = x[i] - alpha * g[i];
                project(xn);
                fn = finite_or_throw(f.value_and_gradient(xn, gnext), it + 1);
                nn::Vector s(m);
                for (std::size_t i = 0; i < m; ++i) s[i] = xn[i] - x[i];
                if (fn <= fx + config.armijo * dot(g, s)) {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            sol.iterations = it + 1;
            if (!accepted) {
                break; // no decrease left at machine precision
            }
            double ss = 0.0, sy = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double s = xn[i] - x[i], y = gnext[i] - g[i];
                ss += s * s;
                sy += s * y;
            }
            alpha = sy > 0.0 ? std::clamp(ss / sy, 1e-16, 1e16) : std::min(alpha * 2.0, 1e16);
            x = xn;
            g = gnext;
            fx = fn;
            if (fx < f_best) {
                f_best = fx;
                best = x;
            }
            if (ss == 0.0) {
                sol.converged = true;
                break;
            }
        }
    }

    sol.delta = std::move(best);
    sol.objective = f_best;
    sol.dx = f.adjustment(sol.delta);
    sol.dy = f.predicted_dy(sol.delta);
    sol.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return sol;
}

} // namespace mmsqc::control
