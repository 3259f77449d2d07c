#pragma once

// Composite SDK loss: weighted per-stage prediction, reconstruction and KL terms.

#include "mmsqc/nn/matrix.hpp"
#include "mmsqc/nn/tape.hpp"
#include "mmsqc/sdk/model.hpp"

#include <span>
#include <vector>

namespace mmsqc::train {

struct LossWeights {
    nn::Vector rho;   ///< prediction weight per stage
    nn::Vector theta; ///< reconstruction weight per stage
    nn::Vector omega; ///< KL weight per stage

    /// ρ = (1, 10, 10, ...), θ = 0.01, ω = 5e-7.
    static LossWeights defaults(std::size_t stages);
    /// Throws ConfigError on negative entries or a stage-count mismatch.
    void validate(std::size_t stages) const;
};

/// (1/n) Σ ‖y − ŷ‖² over rows.
double pred_loss(const nn::Matrix& y, const nn::Matrix& y_hat);
double recon_loss(const nn::Matrix& x, const nn::Matrix& x_hat);
/// Batch mean of ½ Σ (σ² + μ² − 1 − ln σ²) with σ = exp(log_std).
double kld_loss(const nn::Matrix& mean, const nn::Matrix& log_std);

struct LossComponents {
    nn::Vector pred, recon, kld;
    double total = 0.0;
};

LossComponents combine_losses(nn::Vector pred, nn::Vector recon, nn::Vector kld, const LossWeights& w);

/// Tape-free stage outputs for one batch.
struct StageBatch {
    nn::Matrix quality;
    nn::Matrix reconstruction;
    nn::Matrix local_mean;
    nn::Matrix local_log_std;
};

LossComponents total_loss(std::span<const StageBatch> out, std::span<const nn::Matrix> x,
                          std::span<const nn::Matrix> y, const LossWeights& w);

struct TapedLoss {
    nn::Var total;
    std::vector<nn::Var> pred, recon, kld;

    LossComponents values() const;
};

/// Same composition recorded on the tape. Stages need reconstructions.
TapedLoss total_loss(std::span<const sdk::TapedStage> out, std::span<const nn::Var> x, std::span<const nn::Var> y,
                     const LossWeights& w);

} // namespace mmsqc::train
