#pragma once

// End-to-end SDK training, RMSE evaluation and the ANN baseline.

#include "mmsqc/nn/layers.hpp"
#include "mmsqc/nn/optimizer.hpp"
#include "mmsqc/sdk/model.hpp"
#include "mmsqc/train/dataset.hpp"
#include "mmsqc/train/loss.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mmsqc::train {

struct EpochRecord {
    std::size_t epoch = 0;  ///< 1-based within this run
    LossComponents train;   ///< row-weighted mean over the epoch's batches
    double val_pred = 0.0;  ///< Σ ρ_k · pred loss at ε = 0 on the validation rows
    double learning_rate = 0.0;
    bool improved = false;
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 64;
    /// Epochs without validation improvement before stopping; 0 disables.
    std::size_t patience = 20;
    /// Learning rate is multiplied by lr_decay after decay_patience epochs
    /// without improvement (counted from the last improvement or decay); 0 disables.
    std::size_t decay_patience = 0;
    double lr_decay = 0.5;
    /// Rescales each batch gradient to at most this global L2 norm; 0 disables.
    double clip_norm = 0.0;
    nn::OptimizerConfig optimizer;
    std::optional<LossWeights> weights;
    std::uint64_t seed = 0;
    std::function<void(const EpochRecord&)> on_epoch;

    void validate() const;
};

/// RMSE per stage and quality index.
using StageRmse = std::vector<nn::Vector>;

struct TrainReport {
    std::uint64_t seed = 0;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    bool stopped_early = false;
    std::vector<EpochRecord> history;
    std::map<std::string, StageRmse> rmse; ///< keyed by split name, model-target units
    double wall_seconds = 0.0;

    /// Loss curves: epoch, total, pred_k, recon_k, kld_k, val_pred.
    std::string history_csv() const;
    /// Everything except wall time unless `with_timing`.
    std::string to_json(bool with_timing) const;
};

/// Trains in place and keeps the best-validation parameters. Epochs are
/// numbered on from the model's epochs_completed, so a reloaded checkpoint
/// continues its count (optimizer moments start fresh). The dataset's
/// statistics and channel names are attached to the model.
TrainReport train(sdk::SdkModel& model, const Dataset& data, const TrainConfig& config);

/// ε = 0 predictions of the model targets (relative indices stay relative).
std::vector<nn::Matrix> predict_targets(const sdk::SdkModel& model, std::span<const nn::Matrix> x);
/// ε = 0 predictions in absolute engineering units, one matrix per stage.
std::vector<nn::Matrix> predict_absolute(const sdk::SdkModel& model, std::span<const nn::Matrix> x);

StageRmse rmse(std::span<const nn::Matrix> truth, std::span<const nn::Matrix> prediction);
/// RMSE of the model targets in engineering units. Throws UsageError on an empty split.
StageRmse evaluate_rmse(const sdk::SdkModel& model, const SplitData& split);

/// Flat regression net for one stage fed the stage-cumulative measurements.
/// Learns the same targets as the SDK model.
struct BaselineModel {
    std::size_t stage = 0;
    nn::Mlp net;
    nn::Vector x_mean, x_std, y_mean, y_std;

    nn::Matrix predict(std::span<const nn::Matrix> x) const;
};

struct BaselineResult {
    BaselineModel model;
    std::vector<double> val_history;
    std::map<std::string, nn::Vector> rmse;
};

/// 64-unit ReLU hidden layer; same optimizer, batching and stopping rule as train().
BaselineResult train_baseline_ann(const Dataset& data, std::size_t stage, const TrainConfig& config);

} // namespace mmsqc::train
