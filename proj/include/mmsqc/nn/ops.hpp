#pragma once

#include "mmsqc/nn/tape.hpp"

#include <span>

namespace mmsqc::nn::ops {

/// x·wᵀ + b with b a 1×out row (broadcast over rows).
Var affine(Var x, Var w, Var b);
/// x·wᵀ without bias.
Var linear(Var x, Var w);

Var relu(Var x);
Var softplus(Var x);
Var exp(Var x);

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double factor);

/// (1/rows)·Σ_r ‖x_r‖², a 1×1 node.
Var mean_row_sqnorm(Var x);
/// Σ_r x_r·Q·x_rᵀ for a symmetric Q (cols×cols), a 1×1 node.
Var quadratic_form(Var x, const Matrix& q);
/// Side-by-side concatenation of equal-row blocks.
Var concat_cols(std::span<const Var> parts);
/// Batch mean of KL(N(μ, σ²) ‖ N(0, I)) with σ = exp(log_sigma), a 1×1 node.
Var kld_standard_normal(Var mean, Var log_sigma);
/// Σ_i w_i·s_i over 1×1 nodes.
Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

// Pointwise helpers shared with the tape-free inference path so both produce
// identical bits.
double relu_value(double x) noexcept;
double softplus_value(double x) noexcept;
double sigmoid_value(double x) noexcept;

} // namespace mmsqc::nn::ops
