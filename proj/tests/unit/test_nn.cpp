#include "gradcheck.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/kernels.hpp"
#include "mmsqc/nn/layers.hpp"
#include "mmsqc/nn/ops.hpp"
#include "mmsqc/nn/optimizer.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace mmsqc;
using namespace mmsqc::nn;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (auto& v : m.values()) v = n(rng);
    return m;
}

} // namespace

TEST_CASE("dense_forward identity and zero-weight cases")
{
    DenseLayer l(2, 2, Activation::identity, "l");
    l.weight().value = Matrix::identity(2);
    const double x[] = {3.0, -1.0};
    CHECK(dense_forward(l, x) == Vector{3.0, -1.0});

    l.weight().value.fill(0.0);
    l.bias().value = Matrix{{5.0, 5.0}};
    CHECK(dense_forward(l, x) == Vector{5.0, 5.0});
}

TEST_CASE("dense_forward relu clips negative pre-activations")
{
    DenseLayer l(2, 2, Activation::relu, "l");
    l.weight().value = Matrix{{1, 2}, {3, 4}};
    const double x[] = {1.0, -1.0};
    // W x = [1-2, 3-4] = [-1, -1]
    CHECK(dense_forward(l, x) == Vector{0.0, 0.0});
}

TEST_CASE("dense_forward rejects wrong input width")
{
    DenseLayer l(3, 2, Activation::identity, "l");
    const double x[] = {1.0, 2.0};
    CHECK_THROWS_AS(dense_forward(l, x), ShapeError);
    Tape tape;
    CHECK_THROWS_AS(l.forward(tape, tape.constant(Matrix(1, 2))), ShapeError);
}

TEST_CASE("identity layer is affine: f(x+y) + f(0) = f(x) + f(y)")
{
    std::mt19937_64 rng(11);
    DenseLayer l(5, 4, Activation::identity, "l");
    l.initialize(rng);
    l.bias().value = random_matrix(1, 4, rng);
    const auto x = random_matrix(1, 5, rng);
    const auto y = random_matrix(1, 5, rng);
    Vector s(5);
    for (std::size_t i = 0; i < 5; ++i) s[i] = x.values()[i] + y.values()[i];
    const Vector zero(5, 0.0);
    const auto fxy = dense_forward(l, s);
    const auto f0 = dense_forward(l, zero);
    const auto fx = dense_forward(l, x.values());
    const auto fy = dense_forward(l, y.values());
    for (std::size_t o = 0; o < 4; ++o) {
        CHECK(fxy[o] + f0[o] == doctest::Approx(fx[o] + fy[o]).epsilon(1e-13));
    }
}

TEST_CASE("backward of p^2 at 3 is 6")
{
    Parameter p("p", Matrix{{3.0}});
    Tape tape;
    auto v = tape.parameter(p);
    tape.backward(ops::mul(v, v));
    CHECK(p.grad(0, 0) == 6.0);
}

TEST_CASE("backward through inactive relu is zero")
{
    Parameter p("p", Matrix{{-1.0}});
    Tape tape;
    tape.backward(ops::relu(tape.parameter(p)));
    CHECK(p.grad(0, 0) == 0.0);
}

TEST_CASE("backward lifecycle errors")
{
    Tape empty;
    CHECK_THROWS_AS(empty.backward(Var{}), StateError);

    Tape tape;
    auto x = tape.input(Matrix{{1.0, 2.0}});
    CHECK_THROWS_AS(x.grad(), StateError);
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
    auto loss = ops::mean_row_sqnorm(x);
    tape.backward(loss);
    CHECK(x.grad() == Matrix{{2.0, 4.0}});
    CHECK_THROWS_AS(tape.backward(loss), StateError);
}

TEST_CASE("parameters outside the loss get exactly zero gradient")
{
    Parameter used("used", Matrix{{1.5, -2.0}});
    Parameter unused("unused", Matrix{{7.0}});
    Tape tape;
    tape.parameter(unused);
    auto loss = ops::mean_row_sqnorm(tape.parameter(used));
    tape.backward(loss);
    CHECK(unused.grad == Matrix{{0.0}});
    CHECK(used.grad == Matrix{{3.0, -4.0}});
}

TEST_CASE("frozen parameters receive no gradient")
{
    Parameter p("p", Matrix{{2.0}});
    Tape tape;
    tape.set_frozen_parameters(true);
    auto x = tape.input(Matrix{{1.0}});
    tape.backward(ops::mul(x, tape.parameter(p)));
    CHECK(p.grad(0, 0) == 0.0);
    CHECK(x.grad()(0, 0) == 2.0);
}

TEST_CASE("two-layer network gradients match finite differences for every activation")
{
    for (auto act : {Activation::relu, Activation::softplus, Activation::identity}) {
        CAPTURE(to_string(act));
        std::mt19937_64 rng(5);
        const std::size_t widths[] = {4, 7, 3};
        Mlp net(widths, act, Activation::softplus, "net");
        net.initialize(rng);
        for (auto& l : net.layers()) l.bias().value = random_matrix(1, l.out_features(), rng, 0.3);
        const auto x = random_matrix(6, 4, rng);
        const auto target = random_matrix(6, 3, rng);
        std::vector<Parameter*> params;
        net.collect_parameters(params);
        auto res = testing::check_gradients(
            params,
            [&](Tape& t) {
                auto y = net.forward(t, t.constant(x));
                return ops::mean_row_sqnorm(ops::sub(y, t.constant(target)));
            },
            30, rng);
        CHECK(res.samples >= 100);
        CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
    }
}

TEST_CASE("elementwise and reduction ops gradients match finite differences")
{
    std::mt19937_64 rng(17);
    Parameter a("a", random_matrix(3, 4, rng));
    Parameter b("b", random_matrix(3, 4, rng));
    Parameter w("w", random_matrix(2, 4, rng));
    Parameter c("c", random_matrix(1, 2, rng));
    Matrix q = random_matrix(2, 2, rng);
    q = Matrix{{q(0, 0) * q(0, 0) + 1.0, q(0, 1)}, {q(0, 1), q(1, 1) * q(1, 1) + 1.0}};
    std::vector<Parameter*> params{&a, &b, &w, &c};
    auto res = testing::check_gradients(
        params,
        [&](Tape& t) {
            auto va = t.parameter(a);
            auto vb = t.parameter(b);
            auto prod = ops::mul(ops::softplus(va), ops::exp(ops::scale(vb, 0.3)));
            auto lin = ops::affine(ops::sub(prod, va), t.parameter(w), t.parameter(c));
            auto terms = std::vector<Var>{ops::quadratic_form(lin, q), ops::kld_standard_normal(va, ops::scale(vb, 0.5)),
                                          ops::mean_row_sqnorm(ops::add(va, vb))};
            const double weights[] = {0.7, 1.3, 0.2};
            return ops::weighted_sum(terms, weights);
        },
        25, rng);
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("sgd step is exact")
{
    Parameter p("p", Matrix{{1.0}});
    p.grad = Matrix{{1.0}};
    Optimizer opt({OptimizerKind::sgd, 0.1}, {&p});
    opt.step();
    CHECK(p.value(0, 0) == 1.0 - 0.1 * 1.0);
    CHECK(opt.step_count() == 1);
}

TEST_CASE("zero gradient leaves parameters unchanged for every optimizer")
{
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
        Parameter p("p", Matrix{{0.25, -4.0}});
        Optimizer opt({kind}, {&p});
        p.zero_grad();
        opt.step();
        opt.step();
        CHECK(p.value == Matrix{{0.25, -4.0}});
        CHECK(opt.step_count() == 2);
    }
}

TEST_CASE("adam with g = 1 decreases p on consecutive steps")
{
    Parameter p("p", Matrix{{0.0}});
    Optimizer opt({OptimizerKind::adam}, {&p});
    // reference recurrence: m̂ = 1, v̂ = 1 on every step, so p drops by lr/(1+eps)
    const double expected_step = 1e-3 / (1.0 + 1e-8);
    double prev = p.value(0, 0);
    for (int s = 0; s < 2; ++s) {
        p.grad = Matrix{{1.0}};
        opt.step();
        CHECK(p.value(0, 0) < prev);
        CHECK(prev - p.value(0, 0) == doctest::Approx(expected_step).epsilon(1e-12));
        prev = p.value(0, 0);
    }
}

TEST_CASE("non-finite gradient raises divergence naming the parameter")
{
    Parameter ok("good", Matrix{{1.0}});
    Parameter bad("enc.weight", Matrix{{1.0}});
    ok.grad = Matrix{{1.0}};
    bad.grad = Matrix{{std::numeric_limits<double>::quiet_NaN()}};
    Optimizer opt({OptimizerKind::sgd, 0.1}, {&ok, &bad});
    try {
        opt.step();
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(std::string(e.what()).find("enc.weight") != std::string::npos);
    }
    CHECK(ok.value(0, 0) == 1.0);
    CHECK(opt.step_count() == 0);
}

TEST_CASE("optimizer config validation")
{
    OptimizerConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(optimizer_kind_from_string("sgd-momentum") == OptimizerKind::sgd_momentum);
    CHECK_THROWS_AS(optimizer_kind_from_string("lbfgs"), ConfigError);
}

TEST_CASE("seeded initialization is bitwise reproducible")
{
    const std::size_t widths[] = {3, 64, 2};
    Mlp a(widths, Activation::relu, Activation::identity, "m");
    Mlp b(widths, Activation::relu, Activation::identity, "m");
    std::mt19937_64 ra(99), rb(99);
    a.initialize(ra);
    b.initialize(rb);
    for (std::size_t i = 0; i < a.layers().size(); ++i) {
        CHECK(a.layers()[i].weight().value == b.layers()[i].weight().value);
    }
    // Kaiming bound for the relu layer
    const double bound = std::sqrt(6.0 / 3.0);
    for (double v : a.layers()[0].weight().value.values()) CHECK(std::abs(v) <= bound);
}

TEST_CASE("serial and parallel kernels agree bitwise")
{
    std::mt19937_64 rng(3);
    const int saved = kernels::thread_count();
    for (int threads : {1, 2, 3, 4}) {
        kernels::set_thread_count(threads);
        for (auto [n, in, out] : {std::tuple{1, 1, 1}, {5, 7, 3}, {64, 40, 64}, {257, 33, 19}}) {
            const auto x = random_matrix(n, in, rng);
            const auto w = random_matrix(out, in, rng);
            const auto bias = random_matrix(1, out, rng);
            const auto dy = random_matrix(n, out, rng);
            Matrix ys, yp;
            kernels::serial::affine(x, w, bias.values(), ys);
            kernels::parallel::affine(x, w, bias.values(), yp);
            CHECK(ys == yp);
            Matrix dxs(n, in, 0.5), dxp(n, in, 0.5);
            kernels::serial::affine_grad_input(dy, w, dxs);
            kernels::parallel::affine_grad_input(dy, w, dxp);
            CHECK(dxs == dxp);
            Matrix dws(out, in, -1.0), dwp(out, in, -1.0);
            kernels::serial::affine_grad_weight(dy, x, dws);
            kernels::parallel::affine_grad_weight(dy, x, dwp);
            CHECK(dws == dwp);
            Vector dbs(out, 0.25), dbp(out, 0.25);
            kernels::serial::column_sums(dy, dbs);
            kernels::parallel::column_sums(dy, dbp);
            CHECK(dbs == dbp);
        }
    }
    kernels::set_thread_count(saved);
    CHECK_THROWS_AS(kernels::set_thread_count(0), UsageError);
}

TEST_CASE("affine kernel matches a hand product")
{
    const Matrix x{{1, 2}, {3, 4}};
    const Matrix w{{1, 0}, {2, -1}, {0.5, 0.5}};
    const double b[] = {1, 0, -1};
    Matrix y;
    kernels::affine(x, w, b, y);
    CHECK(y == Matrix{{2, 0, 0.5}, {4, 2, 2.5}});
    Matrix bad(2, 3);
    CHECK_THROWS_AS(kernels::affine(bad, w, b, y), ShapeError);
}
