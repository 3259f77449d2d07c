#pragma once

#include "mmsqc/nn/matrix.hpp"
#include "mmsqc/nn/tape.hpp"

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmsqc::nn {

enum class Activation { identity, relu, softplus };

std::string_view to_string(Activation a) noexcept;
Activation activation_from_string(std::string_view name);

/// Applies the activation in place (tape-free path).
void apply_activation(Activation a, Matrix& m) noexcept;
Var apply_activation(Activation a, Var x);

class DenseLayer {
public:
    DenseLayer() = default;
    DenseLayer(std::size_t in, std::size_t out, Activation activation, const std::string& name);

    std::size_t in_features() const noexcept { return weight_.value.cols(); }
    std::size_t out_features() const noexcept { return weight_.value.rows(); }
    Activation activation() const noexcept { return activation_; }

    Parameter& weight() noexcept { return weight_; }
    const Parameter& weight() const noexcept { return weight_; }
    /// Stored as a 1×out row.
    Parameter& bias() noexcept { return bias_; }
    const Parameter& bias() const noexcept { return bias_; }

    /// Kaiming-uniform for ReLU layers, Xavier-uniform otherwise; zero bias.
    void initialize(std::mt19937_64& rng);

    Matrix forward(const Matrix& x) const;
    Var forward(Tape& tape, Var x);

private:
    Parameter weight_;
    Parameter bias_;
    Activation activation_ = Activation::identity;
};

/// activation(W·x + b) for a single example.
Vector dense_forward(const DenseLayer& layer, std::span<const double> x);

/// Stack of dense layers: hidden layers use `hidden_activation`, the last
/// layer is `output_activation`.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::span<const std::size_t> widths, Activation hidden_activation, Activation output_activation,
        const std::string& name);

    std::size_t in_features() const { return layers_.front().in_features(); }
    std::size_t out_features() const { return layers_.back().out_features(); }

    std::vector<DenseLayer>& layers() noexcept { return layers_; }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

    void initialize(std::mt19937_64& rng);
    Matrix forward(const Matrix& x) const;
    Var forward(Tape& tape, Var x);
    void collect_parameters(std::vector<Parameter*>& out);

private:
    std::vector<DenseLayer> layers_;
};

void zero_grads(std::span<Parameter* const> params);

} // namespace mmsqc::nn
