#pragma once

// Stochastic deep Koopman model of stage-to-stage quality propagation.
//
// Stage k encodes its local measurements X_k into a Gaussian (μ̂_k, ln σ̂_k).
// From the second stage on, the upstream latent is carried forward linearly:
//   μ_k    = μ̂_k    + K^μ_k · μ_{k-1}
//   ln σ_k = ln σ̂_k + K^σ_k · ln σ_{k-1}
// A sample H_k = μ_k + ε ⊙ σ_k feeds the stage quality head, and a decoder
// reconstructs X_k from the local sample during training.
//
// Stage indices are zero-based throughout the API.

#include "mmsqc/nn/layers.hpp"
#include "mmsqc/nn/matrix.hpp"
#include "mmsqc/nn/tape.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmsqc::sdk {

struct StageSpec {
    std::size_t inputs = 0;  ///< process-measurement dimension p_k
    std::size_t outputs = 0; ///< quality-index dimension q_k
};

struct ModelConfig {
    std::size_t latent_dim = 40;
    std::size_t hidden = 64;
    nn::Activation hidden_activation = nn::Activation::relu;
    /// Initial bias of the ln σ̂ heads. Only used at construction, so not checkpointed.
    double initial_log_std = -3.0;
};

/// Per-feature z-score statistics for measurements and quality indices.
struct NormStats {
    std::vector<nn::Vector> x_mean, x_std, y_mean, y_std;

    static NormStats identity(std::span<const StageSpec> stages);

    nn::Vector normalize_x(std::size_t k, std::span<const double> x) const;
    nn::Vector normalize_y(std::size_t k, std::span<const double> y) const;
    nn::Vector denormalize_y(std::size_t k, std::span<const double> y) const;
    nn::Matrix normalize_x(std::size_t k, const nn::Matrix& x) const;
    nn::Matrix normalize_y(std::size_t k, const nn::Matrix& y) const;
    nn::Matrix denormalize_y(std::size_t k, const nn::Matrix& y) const;
};

/// Descriptive data carried with a model so downstream tools can interpret it.
struct ModelMetadata {
    std::vector<std::vector<std::string>> x_names;
    std::vector<std::vector<std::string>> y_names;
    /// Quality indices that, for every stage after the first, are expressed
    /// relative to the first stage's value of the same index.
    std::vector<std::size_t> relative_quality;
    std::size_t epochs_completed = 0;
};

struct LatentState {
    nn::Vector mean;
    nn::Vector log_std;
};

struct Encoder {
    nn::DenseLayer hidden;
    nn::DenseLayer mean;
    nn::DenseLayer log_std;
};

struct StageModel {
    Encoder encoder;
    nn::Mlp decoder;
    nn::Mlp head;
};

/// Transition into a stage from its predecessor.
struct KoopmanPair {
    nn::Parameter mean;    ///< K^μ, d_h×d_h
    nn::Parameter log_std; ///< K^σ, d_h×d_h
};

struct EpsilonPolicy {
    enum class Kind { zero, sample };
    Kind kind = Kind::zero;
    std::uint64_t seed = 0;

    static EpsilonPolicy zero() { return {}; }
    static EpsilonPolicy sample(std::uint64_t s) { return {Kind::sample, s}; }
};

struct StageOutput {
    LatentState local;
    LatentState state;
    nn::Vector h;
    nn::Vector quality;
    nn::Vector reconstruction;
};

/// Tape handles for one stage of a batched forward pass.
struct TapedStage {
    nn::Var local_mean;
    nn::Var local_log_std;
    nn::Var mean;
    nn::Var log_std;
    nn::Var h;
    nn::Var quality;
    nn::Var reconstruction; ///< unbound when reconstruction was not requested
};

LatentState propagate(const KoopmanPair& pair, const LatentState& prev, const LatentState& local);
nn::Vector sample_latent(const LatentState& state, std::span<const double> eps);

class SdkModel {
public:
    SdkModel(std::vector<StageSpec> stages, ModelConfig config, std::uint64_t seed);

    std::size_t stage_count() const noexcept { return specs_.size(); }
    const std::vector<StageSpec>& stages() const noexcept { return specs_; }
    std::size_t latent_dim() const noexcept { return config_.latent_dim; }
    const ModelConfig& config() const noexcept { return config_; }
    std::uint64_t seed() const noexcept { return seed_; }

    StageModel& stage(std::size_t k);
    const StageModel& stage(std::size_t k) const;
    /// Transition into stage k; k must be >= 1.
    KoopmanPair& koopman(std::size_t k);
    const KoopmanPair& koopman(std::size_t k) const;

    NormStats& norm_stats() noexcept { return stats_; }
    const NormStats& norm_stats() const noexcept { return stats_; }
    ModelMetadata& metadata() noexcept { return meta_; }
    const ModelMetadata& metadata() const noexcept { return meta_; }

    /// Local Gaussian of stage k from normalized measurements.
    LatentState encode_stage(std::size_t k, std::span<const double> x) const;
    nn::Vector decode_stage(std::size_t k, std::span<const double> h) const;
    /// Normalized quality prediction; see NormStats::denormalize_y.
    nn::Vector predict_quality(std::size_t k, std::span<const double> h) const;

    /// Runs stages 0..N-1 on normalized inputs.
    std::vector<StageOutput> forward_chain(std::span<const nn::Vector> x, EpsilonPolicy eps) const;

    /// Batched, tape-free prediction with ε = 0. Inputs and outputs are normalized.
    std::vector<nn::Matrix> predict_batch(std::span<const nn::Matrix> x) const;

    /// One taped stage. `prev_mean`/`prev_log_std` are unbound for stage 0.
    /// `eps` may be unbound (ε = 0).
    TapedStage forward_stage(nn::Tape& tape, std::size_t k, nn::Var x, nn::Var prev_mean, nn::Var prev_log_std,
                             nn::Var eps, bool reconstruct);
    /// Full taped chain over batched inputs; `eps` is empty or holds one matrix per stage.
    std::vector<TapedStage> forward(nn::Tape& tape, std::span<const nn::Var> x, std::span<const nn::Matrix> eps,
                                    bool reconstruct);

    std::vector<nn::Parameter*> parameters();
    std::vector<const nn::Parameter*> parameters() const;

private:
    void check_stage(std::size_t k) const;

    std::vector<StageSpec> specs_;
    ModelConfig config_;
    std::uint64_t seed_ = 0;
    std::vector<StageModel> stages_;
    std::vector<KoopmanPair> koopman_; ///< koopman_[k-1] feeds stage k
    NormStats stats_;
    ModelMetadata meta_;
};

} // namespace mmsqc::sdk
