#include "mmsqc/nn/layers.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/kernels.hpp"
#include "mmsqc/nn/ops.hpp"

#include <cmath>

namespace mmsqc::nn {

std::string_view to_string(Activation a) noexcept
{
    switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name)
{
    if (name == "identity") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "softplus") return Activation::softplus;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

void apply_activation(Activation a, Matrix& m) noexcept
{
    auto v = m.values();
    switch (a) {
    case Activation::identity: break;
    case Activation::relu:
        for (auto& x : v) x = ops::relu_value(x);
        break;
    case Activation::softplus:
        for (auto& x : v) x = ops::softplus_value(x);
        break;
    }
}

Var apply_activation(Activation a, Var x)
{
    switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return ops::relu(x);
    case Activation::softplus: return ops::softplus(x);
    }
    return x;
}

DenseLayer::DenseLayer(std::size_t in, std::size_t out, Activation activation, const std::string& name)
    : weight_(name + ".weight", Matrix(out, in)), bias_(name + ".bias", Matrix(1, out)), activation_(activation)
{
    if (in == 0 || out == 0) {
        throw ShapeError("dense layer '" + name + "' needs non-zero dimensions");
    }
}

void DenseLayer::initialize(std::mt19937_64& rng)
{
    const double fan_in = static_cast<double>(in_features());
    const double fan_out = static_cast<double>(out_features());
    const double bound = activation_ == Activation::relu ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : weight_.value.values()) {
        w = dist(rng);
    }
    bias_.value.fill(0.0);
    weight_.zero_grad();
    bias_.zero_grad();
}

Matrix DenseLayer::forward(const Matrix& x) const
{
    Matrix y;
    kernels::affine(x, weight_.value, bias_.value.values(), y);
    apply_activation(activation_, y);
    return y;
}

Var DenseLayer::forward(Tape& tape, Var x)
{
    if (x.cols() != in_features()) {
        throw ShapeError(weight_.name + ": input has " + std::to_string(x.cols()) + " features, expected " +
                         std::to_string(in_features()));
    }
    auto y = ops::affine(x, tape.parameter(weight_), tape.parameter(bias_));
    return apply_activation(activation_, y);
}

Vector dense_forward(const DenseLayer& layer, std::span<const double> x)
{
    if (x.size() != layer.in_features()) {
        throw ShapeError("dense_forward: input has " + std::to_string(x.size()) + " features, expected " +
                         std::to_string(layer.in_features()));
    }
    const auto y = layer.forward(Matrix::row_vector(x));
    return Vector(y.values().begin(), y.values().end());
}

Mlp::Mlp(std::span<const std::size_t> widths, Activation hidden_activation, Activation output_activation,
         const std::string& name)
{
    if (widths.size() < 2) {
        throw ShapeError("mlp '" + name + "' needs at least input and output widths");
    }
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        layers_.emplace_back(widths[i], widths[i + 1], last ? output_activation : hidden_activation,
                             name + ".l" + std::to_string(i));
    }
}

void Mlp::initialize(std::mt19937_64& rng)
{
    for (auto& l : layers_) {
        l.initialize(rng);
    }
}

Matrix Mlp::forward(const Matrix& x) const
{
    Matrix h = layers_.front().forward(x);
    for (std::size_t i = 1; i < layers_.size(); ++i) {
        h = layers_[i].forward(h);
    }
    return h;
}

Var Mlp::forward(Tape& tape, Var x)
{
    for (auto& l : layers_) {
        x = l.forward(tape, x);
    }
    return x;
}

void Mlp::collect_parameters(std::vector<Parameter*>& out)
{
    for (auto& l : layers_) {
        out.push_back(&l.weight());
        out.push_back(&l.bias());
    }
}

void zero_grads(std::span<Parameter* const> params)
{
    for (auto* p : params) {
        p->zero_grad();
    }
}

} // namespace mmsqc::nn
