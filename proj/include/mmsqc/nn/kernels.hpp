#pragma once

// Dense affine kernels used by every layer in the project. Two implementations
// live side by side: `serial` is the reference, `parallel` splits independent
// output rows across OpenMP threads. Both accumulate every output element in
// the same order, so their results are bitwise identical for any thread count.

#include "mmsqc/nn/matrix.hpp"

#include <cstddef>
#include <span>

namespace mmsqc::nn::kernels {

namespace serial {

/// y = x·wᵀ + bias. x: n×in, w: out×in, bias: out (or empty), y resized to n×out.
void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y);
/// dx += dy·w
void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx);
/// dw += dyᵀ·x
void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw);
/// db += column sums of dy
void column_sums(const Matrix& dy, std::span<double> db);

} // namespace serial

namespace parallel {

void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y);
void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx);
void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw);
void column_sums(const Matrix& dy, std::span<double> db);

} // namespace parallel

/// True when the library was built with OpenMP.
bool openmp_available() noexcept;
/// Number of worker threads the parallel kernels will use.
int thread_count() noexcept;
void set_thread_count(int threads);

/// Multiply-add count above which the dispatching entry points use the
/// parallel kernels. Tiny training batches stay serial.
std::size_t parallel_threshold() noexcept;
void set_parallel_threshold(std::size_t flops);

void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y);
void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx);
void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw);
void column_sums(const Matrix& dy, std::span<double> db);

} // namespace mmsqc::nn::kernels
