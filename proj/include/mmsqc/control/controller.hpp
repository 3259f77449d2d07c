#pragma once

// Feedforward quality-variation control on top of a frozen SDK model.
//
// After stage k has been observed, its latent H_k is carried through the
// remaining stages with the downstream measurements held at nominal plus an
// adjustment. The adjustment is parameterised by actuator moves δ:
//   ΔX = M·δ   (M: stacked horizon measurements × actuators, absolute units)
// and chosen to minimise  ΔYᵀ Q ΔY + ΔXᵀ R ΔX  over the box lower ≤ δ ≤ upper.
// ΔY and the R-weighted ΔX are in the model's normalized units.
// With M a column selection this is the plain per-channel box problem.
// On a real line a set-point move also shows up in measurements the model
// already saw (a downstream speed change loads the upstream drive), so the
// problem may carry the observed stages too; H_k is then re-encoded from
// X_obs + M_obs·δ instead of held fixed.

#include "mmsqc/nn/matrix.hpp"
#include "mmsqc/sdk/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace mmsqc::control {

/// Nominal operating point: measurements, ε = 0 latents and predictions.
struct NominalProfile {
    std::vector<nn::Vector> x;              ///< X_nom,k, absolute units
    std::vector<sdk::LatentState> latent;   ///< H_nom,k
    std::vector<nn::Vector> quality;        ///< Ỹ_nom,k, normalized model targets

    /// Recompute whenever the model changes.
    static NominalProfile build(const sdk::SdkModel& model, std::vector<nn::Vector> x_nom);
};

/// ε = 0 latent of stage k given absolute measurements of stages 0..k.
sdk::LatentState estimate_latent(const sdk::SdkModel& model, std::size_t k, std::span<const nn::Vector> x);

struct LocalVariation {
    sdk::LatentState latent; ///< H_k
    nn::Vector dy;           ///< Ỹ_k − Ỹ_nom,k, normalized
};

/// Stage k evaluated at X_nom,k + dx. `prev` is H_{k−1} and must be empty for k = 0.
LocalVariation assess_local_variation(const sdk::SdkModel& model, const NominalProfile& nominal, std::size_t k,
                                      const std::optional<sdk::LatentState>& prev, std::span<const double> dx);

/// ΔỸ_l for l = k+1..N−1 with `dx` stacked over those stages (absolute units).
/// Empty when stage k is the last one.
std::vector<nn::Vector> forecast_downstream(const sdk::SdkModel& model, const NominalProfile& nominal, std::size_t k,
                                            const sdk::LatentState& h_k, std::span<const double> dx);

/// Σ p_l and Σ q_l over the horizon of stage k.
std::size_t horizon_inputs(const sdk::SdkModel& model, std::size_t k);
std::size_t horizon_outputs(const sdk::SdkModel& model, std::size_t k);

struct ControlProblem {
    std::size_t stage = 0;
    sdk::LatentState latent; ///< H_k
    NominalProfile nominal;
    nn::Matrix q;         ///< over stacked ΔY
    nn::Matrix r;         ///< over stacked ΔX
    nn::Matrix actuation; ///< M, one column per actuator
    nn::Vector lower, upper;
    /// Optional stages 0..k measurements (absolute, at δ = 0) and their rows of M.
    /// Empty means H_k stays at `latent` whatever δ is.
    std::vector<nn::Vector> observed;
    nn::Matrix observed_actuation;

    bool reencodes() const noexcept { return !observed.empty(); }

    std::size_t actuators() const noexcept { return lower.size(); }
    /// Throws ConfigError on bad weights or bounds, ShapeError on size mismatches.
    void validate(const sdk::SdkModel& model) const;

    /// Q = I, R = 0.01·I, M selecting the given stacked horizon channels.
    static ControlProblem with_channels(const sdk::SdkModel& model, std::size_t stage, sdk::LatentState latent,
                                        NominalProfile nominal, std::span<const std::size_t> channels,
                                        nn::Vector lower, nn::Vector upper);
};

struct ControlSolution {
    nn::Vector delta;              ///< actuator moves
    nn::Vector dx;                 ///< M·δ, stacked, absolute
    std::vector<nn::Vector> dy;    ///< predicted ΔỸ per horizon stage
    double objective = 0.0;
    double objective_at_zero = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    double solve_ms = 0.0;
};

/// Deterministic objective J(δ) and its gradient through the model.
class Objective {
public:
    /// With mc_samples > 0 the quality term is averaged over that many fixed ε draws.
    Objective(const sdk::SdkModel& model, const ControlProblem& problem, std::size_t mc_samples = 0,
              std::uint64_t mc_seed = 0);

    double value(std::span<const double> delta) const;
    double value_and_gradient(std::span<const double> delta, std::span<double> grad) const;
    /// ε = 0 forecast at δ, per horizon stage.
    std::vector<nn::Vector> predicted_dy(std::span<const double> delta) const;
    /// M·δ, absolute units.
    nn::Vector adjustment(std::span<const double> delta) const;
    std::size_t dimension() const noexcept { return problem_.actuators(); }

private:
    double evaluate(std::span<const double> delta, std::span<double> grad) const;

    const sdk::SdkModel& model_;
    const ControlProblem& problem_;
    std::vector<nn::Matrix> map_;  ///< per horizon stage, normalized M rows
    nn::Matrix map_all_;
    std::vector<nn::Matrix> x_nom_; ///< normalized nominal rows
    std::vector<nn::Matrix> obs_map_, x_obs_; ///< same for the observed stages when re-encoding
    std::vector<std::vector<nn::Matrix>> eps_;
};

struct SolverConfig {
    std::size_t max_iterations = 500;
    double tolerance = 1e-6; ///< on ‖δ − P(δ − ∇J)‖₂
    double armijo = 1e-4;
    std::size_t max_backtracks = 60;
    std::size_t mc_samples = 0;
    std::uint64_t mc_seed = 0;
    /// Replaces the built-in projected-gradient loop when set.
    std::function<nn::Vector(const Objective&, const ControlProblem&)> custom;

    void validate() const;
};

/// Projected gradient with Armijo backtracking and Barzilai-Borwein steps,
/// started from δ = 0. Returns the best iterate seen; throws SolverError on a
/// non-finite objective.
ControlSolution solve_adjustments(const sdk::SdkModel& model, const ControlProblem& problem,
                                  const SolverConfig& config = {});

} // namespace mmsqc::control
