#include "mmsqc/nn/ops.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/kernels.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace mmsqc::nn::ops {

double relu_value(double x) noexcept
{
    return x > 0.0 ? x : 0.0;
}

double softplus_value(double x) noexcept
{
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) noexcept
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {

Tape& tape_of(const Var& a, const char* op)
{
    if (!a.valid()) {
        throw StateError(std::string(op) + ": unbound variable");
    }
    return *a.tape();
}

template <typename Fn, typename Dfn>
Var pointwise(Var x, const char* name, Fn f, Dfn df)
{
    Tape& t = tape_of(x, name);
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    auto src = xv.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = f(src[i]);
    }
    const auto xid = x.id();
    return t.record(std::move(out), {x}, [xid, df](Tape& tp, std::size_t self) {
        if (!tp.needs_grad(xid)) {
            return;
        }
        const auto xs = tp.value(xid).values();
        const auto ys = tp.value(self).values();
        const auto g = tp.grad(self).values();
        auto gx = tp.grad(xid).values();
        for (std::size_t i = 0; i < xs.size(); ++i) {
            gx[i] += g[i] * df(xs[i], ys[i]);
        }
    });
}

} // namespace

Var affine(Var x, Var w, Var b)
{
    Tape& t = tape_of(x, "affine");
    t.check_owned(w, "affine");
    t.check_owned(b, "affine");
    if (b.value().rows() != 1) {
        throw ShapeError("affine: bias must be a single row");
    }
    Matrix y;
    kernels::affine(x.value(), w.value(), b.value().values(), y);
    const auto xid = x.id(), wid = w.id(), bid = b.id();
    return t.record(std::move(y), {x, w, b}, [xid, wid, bid](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        if (tp.needs_grad(xid)) {
            kernels::affine_grad_input(g, tp.value(wid), tp.grad(xid));
        }
        if (tp.needs_grad(wid)) {
            kernels::affine_grad_weight(g, tp.value(xid), tp.grad(wid));
        }
        if (tp.needs_grad(bid)) {
            kernels::column_sums(g, tp.grad(bid).values());
        }
    });
}

Var linear(Var x, Var w)
{
    Tape& t = tape_of(x, "linear");
    t.check_owned(w, "linear");
    Matrix y;
    kernels::affine(x.value(), w.value(), {}, y);
    const auto xid = x.id(), wid = w.id();
    return t.record(std::move(y), {x, w}, [xid, wid](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        if (tp.needs_grad(xid)) {
            kernels::affine_grad_input(g, tp.value(wid), tp.grad(xid));
        }
        if (tp.needs_grad(wid)) {
            kernels::affine_grad_weight(g, tp.value(xid), tp.grad(wid));
        }
    });
}

Var relu(Var x)
{
    return pointwise(
        x, "relu", [](double v) { return relu_value(v); }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var x)
{
    return pointwise(
        x, "softplus", [](double v) { return softplus_value(v); },
        [](double v, double) { return sigmoid_value(v); });
}

Var exp(Var x)
{
    return pointwise(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(Var a, Var b, Binary kind, const char* name)
{
    Tape& t = tape_of(a, name);
    t.check_owned(b, name);
    require_same_shape(a.value(), b.value(), name);
    Matrix out(a.value().rows(), a.value().cols());
    const auto av = a.value().values();
    const auto bv = b.value().values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        switch (kind) {
        case Binary::add: ov[i] = av[i] + bv[i]; break;
        case Binary::sub: ov[i] = av[i] - bv[i]; break;
        case Binary::mul: ov[i] = av[i] * bv[i]; break;
        }
    }
    const auto aid = a.id(), bid = b.id();
    return t.record(std::move(out), {a, b}, [aid, bid, kind](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self).values();
        if (tp.needs_grad(aid)) {
            auto ga = tp.grad(aid).values();
            const auto bv2 = tp.value(bid).values();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += kind == Binary::mul ? g[i] * bv2[i] : g[i];
            }
        }
        if (tp.needs_grad(bid)) {
            auto gb = tp.grad(bid).values();
            const auto av2 = tp.value(aid).values();
            for (std::size_t i = 0; i < g.size(); ++i) {
                switch (kind) {
                case Binary::add: gb[i] += g[i]; break;
                case Binary::sub: gb[i] -= g[i]; break;
                case Binary::mul: gb[i] += g[i] * av2[i]; break;
                }
            }
        }
    });
}

} // namespace

Var add(Var a, Var b)
{
    return binary(a, b, Binary::add, "add");
}

Var sub(Var a, Var b)
{
    return binary(a, b, Binary::sub, "sub");
}

Var mul(Var a, Var b)
{
    return binary(a, b, Binary::mul, "mul");
}

Var scale(Var a, double factor)
{
    return pointwise(
        a, "scale", [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Var mean_row_sqnorm(Var x)
{
    Tape& t = tape_of(x, "mean_row_sqnorm");
    const Matrix& xv = x.value();
    if (xv.rows() == 0) {
        throw ShapeError("mean_row_sqnorm: empty batch");
    }
    const double inv_n = 1.0 / static_cast<double>(xv.rows());
    double total = 0.0;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        double s = 0.0;
        for (double v : xv.row(r)) {
            s += v * v;
        }
        total += s;
    }
    const auto xid = x.id();
    return t.record(Matrix(1, 1, total * inv_n), {x}, [xid, inv_n](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)(0, 0) * 2.0 * inv_n;
        const auto xs = tp.value(xid).values();
        auto gx = tp.grad(xid).values();
        for (std::size_t i = 0; i < xs.size(); ++i) {
            gx[i] += g * xs[i];
        }
    });
}

Var quadratic_form(Var x, const Matrix& q)
{
    Tape& t = tape_of(x, "quadratic_form");
    const Matrix& xv = x.value();
    if (q.rows() != xv.cols() || q.cols() != xv.cols()) {
        throw ShapeError("quadratic_form: weight matrix must be " + std::to_string(xv.cols()) + " square");
    }
    Matrix qx;
    kernels::serial::affine(xv, q, {}, qx);
    double total = 0.0;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        for (std::size_t c = 0; c < xv.cols(); ++c) {
            total += xv(r, c) * qx(r, c);
        }
    }
    const auto xid = x.id();
    return t.record(Matrix(1, 1, total), {x}, [xid, qx = std::move(qx)](Tape& tp, std::size_t self) {
        const double g = 2.0 * tp.grad(self)(0, 0);
        const auto q2 = qx.values();
        auto gx = tp.grad(xid).values();
        for (std::size_t i = 0; i < q2.size(); ++i) {
            gx[i] += g * q2[i];
        }
    });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    Tape& t = tape_of(parts[0], "concat_cols");
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    std::vector<Var> parents;
    std::vector<std::size_t> ids, offsets;
    for (const Var& v : parts) {
        t.check_owned(v, "concat_cols");
        if (v.rows() != rows) {
            throw ShapeError("concat_cols: row counts differ");
        }
        parents.push_back(v);
        ids.push_back(v.id());
        offsets.push_back(cols);
        cols += v.cols();
    }
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Matrix& pv = parts[i].value();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pv.cols(); ++c) {
                out(r, offsets[i] + c) = pv(r, c);
            }
        }
    }
    return t.record(std::move(out), parents, [ids, offsets](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!tp.needs_grad(ids[i])) {
                continue;
            }
            Matrix& gi = tp.grad(ids[i]);
            for (std::size_t r = 0; r < gi.rows(); ++r) {
                for (std::size_t c = 0; c < gi.cols(); ++c) {
                    gi(r, c) += g(r, offsets[i] + c);
                }
            }
        }
    });
}

Var kld_standard_normal(Var mean, Var log_sigma)
{
    Tape& t = tape_of(mean, "kld_standard_normal");
    t.check_owned(log_sigma, "kld_standard_normal");
    require_same_shape(mean.value(), log_sigma.value(), "kld_standard_normal");
    const Matrix& mu = mean.value();
    const Matrix& ls = log_sigma.value();
    if (mu.rows() == 0) {
        throw ShapeError("kld_standard_normal: empty batch");
    }
    const double inv_n = 1.0 / static_cast<double>(mu.rows());
    double total = 0.0;
    const auto m = mu.values();
    const auto l = ls.values();
    for (std::size_t i = 0; i < m.size(); ++i) {
        total += 0.5 * (std::exp(2.0 * l[i]) + m[i] * m[i] - 1.0 - 2.0 * l[i]);
    }
    const auto mid = mean.id(), lid = log_sigma.id();
    return t.record(Matrix(1, 1, total * inv_n), {mean, log_sigma}, [mid, lid, inv_n](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)(0, 0) * inv_n;
        if (tp.needs_grad(mid)) {
            const auto mv = tp.value(mid).values();
            auto gm = tp.grad(mid).values();
            for (std::size_t i = 0; i < mv.size(); ++i) {
                gm[i] += g * mv[i];
            }
        }
        if (tp.needs_grad(lid)) {
            const auto lv = tp.value(lid).values();
            auto gl = tp.grad(lid).values();
            for (std::size_t i = 0; i < lv.size(); ++i) {
                gl[i] += g * (std::exp(2.0 * lv[i]) - 1.0);
            }
        }
    });
}

Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights)
{
    if (scalars.empty() || scalars.size() != weights.size()) {
        throw ShapeError("weighted_sum: need one weight per scalar");
    }
    Tape& t = tape_of(scalars.front(), "weighted_sum");
    double total = 0.0;
    std::vector<Var> parents(scalars.begin(), scalars.end());
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        total += weights[i] * scalars[i].scalar();
        ids.push_back(scalars[i].id());
    }
    std::vector<double> w(weights.begin(), weights.end());
    return t.record(Matrix(1, 1, total), parents, [ids, w](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)(0, 0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (tp.needs_grad(ids[i])) {
                tp.grad(ids[i])(0, 0) += g * w[i];
            }
        }
    });
}

} // namespace mmsqc::nn::ops
