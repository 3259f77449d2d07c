#include "mmsqc/nn/optimizer.hpp"

#include "mmsqc/errors.hpp"

#include <cmath>
#include <string>

namespace mmsqc::nn {

std::string_view to_string(OptimizerKind k) noexcept
{
    switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adam: return "adam";
    }
    return "sgd";
}

OptimizerKind optimizer_kind_from_string(std::string_view name)
{
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "sgd-momentum") return OptimizerKind::sgd_momentum;
    if (name == "adam") return OptimizerKind::adam;
    throw ConfigError("unknown optimizer kind '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning rate must be > 0");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("adam epsilon must be > 0");
    }
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Parameter*> params)
    : config_(config), params_(std::move(params))
{
    config_.validate();
    for (auto* p : params_) {
        first_.emplace_back(config_.kind == OptimizerKind::sgd ? 0 : p->value.size(), 0.0);
        second_.emplace_back(config_.kind == OptimizerKind::adam ? p->value.size() : 0, 0.0);
    }
}

void Optimizer::step()
{
    for (auto* p : params_) {
        if (p->grad.size() != p->value.size()) {
            throw ShapeError("optimizer: gradient of '" + p->name + "' is not aligned with its value");
        }
        if (!p->grad.all_finite()) {
            throw DivergenceError("non-finite gradient in parameter '" + p->name + "'");
        }
    }
    ++steps_;
    const double lr = config_.learning_rate;
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto w = params_[k]->value.values();
        const auto g = params_[k]->grad.values();
        switch (config_.kind) {
        case OptimizerKind::sgd:
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] -= lr * g[i];
            }
            break;
        case OptimizerKind::sgd_momentum: {
            auto& v = first_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = config_.momentum * v[i] + g[i];
                w[i] -= lr * v[i];
            }
            break;
        }
        case OptimizerKind::adam: {
            auto& m = first_[k];
            auto& s = second_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
                s[i] = config_.beta2 * s[i] + (1.0 - config_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double shat = s[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(shat) + config_.epsilon);
            }
            break;
        }
        }
    }
}

void Optimizer::set_learning_rate(double lr)
{
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("learning rate must be positive and finite");
    }
    config_.learning_rate = lr;
}

} // namespace mmsqc::nn
