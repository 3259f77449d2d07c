#pragma once

// Define-by-run reverse-mode differentiation over batched matrices. A Tape is
// filled by calling ops during a forward pass and consumed by one backward()
// call. Build a fresh tape (or clear() it) for every forward pass.

#include "mmsqc/nn/matrix.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace mmsqc::nn {

/// Trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols())
    {
    }

    void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    /// Gradient of the backward() target w.r.t. this node. Only meaningful
    /// after backward() and only for nodes that required a gradient.
    const Matrix& grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double scalar() const;

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Matrix value);
    /// Leaf whose gradient is kept and readable through Var::grad().
    Var input(Matrix value);
    /// Leaf bound to a Parameter. After backward() the node gradient is added
    /// into Parameter::grad. The parameter must outlive the tape.
    Var parameter(Parameter& p);

    /// When frozen, parameter() leaves behave like constants (no gradient work).
    void set_frozen_parameters(bool frozen) noexcept { frozen_ = frozen; }
    bool frozen_parameters() const noexcept { return frozen_; }

    /// Reverse sweep from a 1×1 node.
    void backward(Var loss);
    void clear();
    std::size_t size() const noexcept { return nodes_.size(); }
    bool backward_done() const noexcept { return backward_done_; }

    // Op-author interface.
    Var record(Matrix value, const std::vector<Var>& parents, BackwardFn fn);
    const Matrix& value(std::size_t id) const;
    Matrix& grad(std::size_t id);
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    void check_owned(const Var& v, const char* op) const;

private:
    struct Node {
        Matrix value;
        const Matrix* external = nullptr;
        Matrix grad;
        BackwardFn backward;
        Parameter* parameter = nullptr;
        bool needs_grad = false;
    };

    Var push(Node node);

    std::deque<Node> nodes_;
    bool frozen_ = false;
    bool backward_done_ = false;
};

} // namespace mmsqc::nn
