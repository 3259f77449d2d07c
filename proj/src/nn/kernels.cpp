#include "mmsqc/nn/kernels.hpp"

#include "mmsqc/errors.hpp"

#include <atomic>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mmsqc::nn::kernels {

namespace {

void check_affine(const Matrix& x, const Matrix& w, std::span<const double> bias)
{
    if (x.cols() != w.cols()) {
        throw ShapeError("affine: input has " + std::to_string(x.cols()) + " features, layer expects " +
                         std::to_string(w.cols()));
    }
    if (!bias.empty() && bias.size() != w.rows()) {
        throw ShapeError("affine: bias length " + std::to_string(bias.size()) + " != " +
                         std::to_string(w.rows()));
    }
}

void check_grad_input(const Matrix& dy, const Matrix& w, const Matrix& dx)
{
    if (dy.cols() != w.rows() || dx.cols() != w.cols() || dx.rows() != dy.rows()) {
        throw ShapeError("affine_grad_input: shape mismatch");
    }
}

void check_grad_weight(const Matrix& dy, const Matrix& x, const Matrix& dw)
{
    if (dy.rows() != x.rows() || dw.rows() != dy.cols() || dw.cols() != x.cols()) {
        throw ShapeError("affine_grad_weight: shape mismatch");
    }
}

std::vector<double> transpose(const Matrix& w)
{
    std::vector<double> wt(w.size());
    const std::size_t out = w.rows();
    const std::size_t in = w.cols();
    for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) {
            wt[i * out + o] = w(o, i);
        }
    }
    return wt;
}

// One output row of y = x·wᵀ + b using the transposed weight (in×out) so the
// inner loop is a contiguous axpy. Element (r, o) accumulates over i in order.
inline void affine_row(const double* xr, const double* wt, const double* bias, double* yr, std::size_t in,
                       std::size_t out)
{
    for (std::size_t o = 0; o < out; ++o) {
        yr[o] = bias ? bias[o] : 0.0;
    }
    for (std::size_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        const double* wrow = wt + i * out;
        for (std::size_t o = 0; o < out; ++o) {
            yr[o] += xi * wrow[o];
        }
    }
}

inline void grad_input_row(const double* dyr, const Matrix& w, double* dxr)
{
    const std::size_t out = w.rows();
    const std::size_t in = w.cols();
    const double* wd = w.values().data();
    for (std::size_t o = 0; o < out; ++o) {
        const double g = dyr[o];
        const double* wrow = wd + o * in;
        for (std::size_t i = 0; i < in; ++i) {
            dxr[i] += g * wrow[i];
        }
    }
}

inline void grad_weight_row(const Matrix& dy, const Matrix& x, std::size_t o, double* dwr)
{
    const std::size_t in = x.cols();
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const double g = dy(r, o);
        const double* xr = x.row(r).data();
        for (std::size_t i = 0; i < in; ++i) {
            dwr[i] += g * xr[i];
        }
    }
}

std::atomic<std::size_t> g_threshold{1u << 17};

} // namespace

namespace serial {

void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y)
{
    check_affine(x, w, bias);
    if (y.rows() != x.rows() || y.cols() != w.rows()) {
        y = Matrix(x.rows(), w.rows());
    }
    const auto wt = transpose(w);
    const double* b = bias.empty() ? nullptr : bias.data();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        affine_row(x.row(r).data(), wt.data(), b, y.row(r).data(), w.cols(), w.rows());
    }
}

void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx)
{
    check_grad_input(dy, w, dx);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        grad_input_row(dy.row(r).data(), w, dx.row(r).data());
    }
}

void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw)
{
    check_grad_weight(dy, x, dw);
    // Row-outer order; each dw element still sums over r ascending.
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const double* xr = x.row(r).data();
        for (std::size_t o = 0; o < dy.cols(); ++o) {
            const double g = dy(r, o);
            double* dwr = dw.row(o).data();
            for (std::size_t i = 0; i < x.cols(); ++i) {
                dwr[i] += g * xr[i];
            }
        }
    }
}

void column_sums(const Matrix& dy, std::span<double> db)
{
    if (db.size() != dy.cols()) {
        throw ShapeError("column_sums: length mismatch");
    }
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        for (std::size_t c = 0; c < dy.cols(); ++c) {
            db[c] += dy(r, c);
        }
    }
}

} // namespace serial

namespace parallel {

void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y)
{
    check_affine(x, w, bias);
    if (y.rows() != x.rows() || y.cols() != w.rows()) {
        y = Matrix(x.rows(), w.rows());
    }
    const auto wt = transpose(w);
    const double* b = bias.empty() ? nullptr : bias.data();
    const auto rows = static_cast<std::ptrdiff_t>(x.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        affine_row(x.row(ur).data(), wt.data(), b, y.row(ur).data(), w.cols(), w.rows());
    }
}

void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx)
{
    check_grad_input(dy, w, dx);
    const auto rows = static_cast<std::ptrdiff_t>(dy.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        grad_input_row(dy.row(ur).data(), w, dx.row(ur).data());
    }
}

void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw)
{
    check_grad_weight(dy, x, dw);
    const auto outs = static_cast<std::ptrdiff_t>(dy.cols());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < outs; ++o) {
        const auto uo = static_cast<std::size_t>(o);
        grad_weight_row(dy, x, uo, dw.row(uo).data());
    }
}

void column_sums(const Matrix& dy, std::span<double> db)
{
    if (db.size() != dy.cols()) {
        throw ShapeError("column_sums: length mismatch");
    }
    const auto cols = static_cast<std::ptrdiff_t>(dy.cols());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
        const auto uc = static_cast<std::size_t>(c);
        double acc = db[uc];
        for (std::size_t r = 0; r < dy.rows(); ++r) {
            acc += dy(r, uc);
        }
        db[uc] = acc;
    }
}

} // namespace parallel

bool openmp_available() noexcept
{
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

int thread_count() noexcept
{
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_thread_count(int threads)
{
    if (threads < 1) {
        throw UsageError("thread count must be >= 1");
    }
#ifdef _OPENMP
    omp_set_num_threads(threads);
#endif
}

std::size_t parallel_threshold() noexcept
{
    return g_threshold.load();
}

void set_parallel_threshold(std::size_t flops)
{
    g_threshold.store(flops);
}

namespace {

bool use_parallel(std::size_t work)
{
    return openmp_available() && thread_count() > 1 && work >= g_threshold.load();
}

} // namespace

void affine(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y)
{
    if (use_parallel(x.rows() * w.size())) {
        parallel::affine(x, w, bias, y);
    } else {
        serial::affine(x, w, bias, y);
    }
}

void affine_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx)
{
    if (use_parallel(dy.rows() * w.size())) {
        parallel::affine_grad_input(dy, w, dx);
    } else {
        serial::affine_grad_input(dy, w, dx);
    }
}

void affine_grad_weight(const Matrix& dy, const Matrix& x, Matrix& dw)
{
    if (use_parallel(dy.rows() * dw.size())) {
        parallel::affine_grad_weight(dy, x, dw);
    } else {
        serial::affine_grad_weight(dy, x, dw);
    }
}

void column_sums(const Matrix& dy, std::span<double> db)
{
    if (use_parallel(dy.size())) {
        parallel::column_sums(dy, db);
    } else {
        serial::column_sums(dy, db);
    }
}

} // namespace mmsqc::nn::kernels
