#pragma once

// Trials, trial CSV files, and the split/normalized view used for training.

#include "mmsqc/nn/matrix.hpp"
#include "mmsqc/sdk/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mmsqc::train {

/// One production run. x[k] and y[k] hold one row per time sample.
struct Trial {
    std::string id;
    std::vector<double> t;
    std::vector<nn::Matrix> x;
    std::vector<nn::Matrix> y;

    std::size_t rows() const noexcept { return t.size(); }
    std::size_t stage_count() const noexcept { return x.size(); }
    std::vector<sdk::StageSpec> specs() const;
    /// Throws ShapeError on ragged series and Error on non-finite samples.
    void validate() const;
};

enum class Split { train, val, test };
std::string_view to_string(Split s) noexcept;
Split split_from_string(std::string_view s);

/// Column layout: t, stage{k}_x{i}..., stage{k}_y{j}... (1-based k, i, j).
void write_trial_csv(const Trial& trial, const std::filesystem::path& path);
Trial read_trial_csv(const std::filesystem::path& path);

struct DatasetIndexEntry {
    std::string file;
    Split split = Split::train;
};

/// index.json next to the trial files.
struct DatasetIndex {
    double sample_period = 0.1;
    std::uint64_t seed = 0;
    std::vector<std::vector<std::string>> x_names;
    std::vector<std::vector<std::string>> y_names;
    std::vector<DatasetIndexEntry> trials;
};

void write_index(const DatasetIndex& index, const std::filesystem::path& dir);
DatasetIndex read_index(const std::filesystem::path& dir);

struct DatasetOptions {
    /// Share of shuffled training rows held out for validation.
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
    /// Quality indices learned relative to the first stage for stages after it.
    std::vector<std::size_t> relative_quality;
    /// Moving-average window applied to every measurement series (1 = off).
    std::size_t filter_window = 1;
    /// Keep every n-th sample of each trial.
    std::size_t row_stride = 1;
};

/// Rows of one split, stage by stage, in raw engineering units.
struct SplitData {
    std::vector<nn::Matrix> x;
    std::vector<nn::Matrix> y;
    std::size_t rows() const noexcept { return x.empty() ? 0 : x.front().rows(); }
};

struct Dataset {
    std::vector<sdk::StageSpec> specs;
    std::vector<std::vector<std::string>> x_names;
    std::vector<std::vector<std::string>> y_names;
    std::vector<std::size_t> relative_quality;
    SplitData train, val, test;
    /// Statistics of the training rows; y statistics refer to model targets.
    sdk::NormStats stats;

    std::size_t n() const noexcept { return train.rows(); }
    const SplitData& split(Split s) const;
};

/// `splits[i]` assigns trial i to train or test; validation rows are carved
/// out of the training rows.
Dataset build_dataset(std::span<const Trial> trials, std::span<const Split> splits, const DatasetOptions& options);
Dataset load_dataset(const std::filesystem::path& dir, const DatasetOptions& options);

/// Absolute quality series → model targets (relative indices subtracted from stage 0).
std::vector<nn::Matrix> to_model_targets(std::span<const nn::Matrix> y, std::span<const std::size_t> relative);
/// Inverse of to_model_targets applied to predictions.
std::vector<nn::Matrix> to_absolute(std::span<const nn::Matrix> y, std::span<const std::size_t> relative);

/// Z-score statistics of the columns of each matrix; zero spread maps to 1.
void column_stats(std::span<const nn::Matrix> m, std::vector<nn::Vector>& mean, std::vector<nn::Vector>& std);

/// Centered moving average with truncated windows at the edges.
std::vector<double> moving_average_filter(std::span<const double> series, std::size_t window);

} // namespace mmsqc::train
