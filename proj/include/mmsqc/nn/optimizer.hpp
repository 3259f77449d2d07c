#pragma once

#include "mmsqc/nn/tape.hpp"

#include <cstddef>
#include <string_view>
#include <vector>

namespace mmsqc::nn {

enum class OptimizerKind { sgd, sgd_momentum, adam };

std::string_view to_string(OptimizerKind k) noexcept;
OptimizerKind optimizer_kind_from_string(std::string_view name);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

/// First-order optimizer over a fixed parameter list. step() consumes the
/// gradients currently stored in each Parameter.
class Optimizer {
public:
    Optimizer(OptimizerConfig config, std::vector<Parameter*> params);

    /// Throws DivergenceError naming the first parameter with a non-finite gradient;
    /// parameters are left untouched in that case.
    void step();
    std::size_t step_count() const noexcept { return steps_; }
    const OptimizerConfig& config() const noexcept { return config_; }
    /// Takes effect from the next step; moment estimates are kept.
    void set_learning_rate(double lr);

private:
    OptimizerConfig config_;
    std::vector<Parameter*> params_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

} // namespace mmsqc::nn
