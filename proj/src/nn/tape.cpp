#include "mmsqc/nn/tape.hpp"

#include "mmsqc/errors.hpp"

namespace mmsqc::nn {

const Matrix& Var::value() const
{
    if (!tape_) {
        throw StateError("value() on an unbound Var");
    }
    return tape_->value(id_);
}

const Matrix& Var::grad() const
{
    if (!tape_) {
        throw StateError("grad() on an unbound Var");
    }
    if (!tape_->backward_done()) {
        throw StateError("grad() requested before backward()");
    }
    return tape_->grad(id_);
}

double Var::scalar() const
{
    const auto& v = value();
    if (v.size() != 1) {
        throw ShapeError("scalar() on a non-scalar node");
    }
    return v(0, 0);
}

Var Tape::push(Node node)
{
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value)
{
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::input(Matrix value)
{
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    return push(std::move(n));
}

Var Tape::parameter(Parameter& p)
{
    Node n;
    n.external = &p.value;
    if (!frozen_) {
        n.parameter = &p;
        n.needs_grad = true;
    }
    return push(std::move(n));
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn fn)
{
    Node n;
    n.value = std::move(value);
    for (const auto& p : parents) {
        check_owned(p, "record");
        n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    if (n.needs_grad) {
        n.backward = std::move(fn);
    }
    return push(std::move(n));
}

const Matrix& Tape::value(std::size_t id) const
{
    const auto& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
}

Matrix& Tape::grad(std::size_t id)
{
    auto& n = nodes_.at(id);
    if (n.grad.empty() && !value(id).empty()) {
        n.grad = Matrix(value(id).rows(), value(id).cols());
    }
    return n.grad;
}

void Tape::check_owned(const Var& v, const char* op) const
{
    if (v.tape() != this) {
        throw StateError(std::string(op) + ": variable belongs to a different tape");
    }
}

void Tape::backward(Var loss)
{
    if (nodes_.empty() || !loss.valid()) {
        throw StateError("backward() called before any forward computation");
    }
    check_owned(loss, "backward");
    if (backward_done_) {
        throw StateError("backward() already ran on this tape; record a new forward pass");
    }
    if (value(loss.id()).size() != 1) {
        throw ShapeError("backward() target must be a scalar");
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].needs_grad) {
        return;
    }
    grad(loss.id())(0, 0) = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.needs_grad && n.backward && !n.grad.empty()) {
            n.backward(*this, i);
        }
    }
    for (auto& n : nodes_) {
        if (n.parameter && !n.grad.empty()) {
            auto& pg = n.parameter->grad;
            if (pg.empty()) {
                pg = Matrix(n.grad.rows(), n.grad.cols());
            }
            auto dst = pg.values();
            auto src = n.grad.values();
            for (std::size_t k = 0; k < dst.size(); ++k) {
                dst[k] += src[k];
            }
        }
    }
}

void Tape::clear()
{
    nodes_.clear();
    backward_done_ = false;
}

} // namespace mmsqc::nn
