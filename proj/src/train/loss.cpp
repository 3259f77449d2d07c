#include "mmsqc/train/loss.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/ops.hpp"

#include <cmath>

namespace mmsqc::train {

LossWeights LossWeights::defaults(std::size_t stages)
{
    LossWeights w;
    for (std::size_t k = 0; k < stages; ++k) {
        w.rho.push_back(k == 0 ? 1.0 : 10.0);
        w.theta.push_back(0.01);
        w.omega.push_back(5e-7);
    }
    return w;
}

void LossWeights::validate(std::size_t stages) const
{
    for (const auto* v : {&rho, &theta, &omega}) {
        if (v->size() != stages) {
            throw ConfigError("loss weights need one entry per stage (" + std::to_string(stages) + ")");
        }
        for (double x : *v) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("loss weights must be finite and >= 0");
        }
    }
}

namespace {

double mean_sq_dist(const nn::Matrix& a, const nn::Matrix& b, const char* what)
{
    nn::require_same_shape(a, b, what);
    if (a.rows() == 0) throw ShapeError(std::string(what) + ": empty batch");
    double total = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) {
            const double d = b(r, c) - a(r, c);
            s += d * d;
        }
        total += s;
    }
    return total * (1.0 / static_cast<double>(a.rows()));
}

} // namespace

double pred_loss(const nn::Matrix& y, const nn::Matrix& y_hat) { return mean_sq_dist(y, y_hat, "pred_loss"); }

double recon_loss(const nn::Matrix& x, const nn::Matrix& x_hat) { return mean_sq_dist(x, x_hat, "recon_loss"); }

double kld_loss(const nn::Matrix& mean, const nn::Matrix& log_std)
{
    nn::require_same_shape(mean, log_std, "kld_loss");
    if (mean.rows() == 0) throw ShapeError("kld_loss: empty batch");
    double total = 0.0;
    const auto m = mean.values();
    const auto l = log_std.values();
    for (std::size_t i = 0; i < m.size(); ++i) {
        total += 0.5 * (std::exp(2.0 * l[i]) + m[i] * m[i] - 1.0 - 2.0 * l[i]);
    }
    return total * (1.0 / static_cast<double>(mean.rows()));
}

LossComponents combine_losses(nn::Vector pred, nn::Vector recon, nn::Vector kld, const LossWeights& w)
{
    w.validate(pred.size());
    if (recon.size() != pred.size() || kld.size() != pred.size()) {
        throw ShapeError("combine_losses: component vectors differ in length");
    }
    LossComponents c{std::move(pred), std::move(recon), std::move(kld), 0.0};
    for (std::size_t k = 0; k < c.pred.size(); ++k) {
        c.total += w.rho[k] * c.pred[k];
        c.total += w.theta[k] * c.recon[k];
        c.total += w.omega[k] * c.kld[k];
    }
    return c;
}

LossComponents total_loss(std::span<const StageBatch> out, std::span<const nn::Matrix> x,
                          std::span<const nn::Matrix> y, const LossWeights& w)
{
    if (x.size() != out.size() || y.size() != out.size()) {
        throw ShapeError("total_loss: stage counts differ");
    }
    nn::Vector pred, recon, kld;
    for (std::size_t k = 0; k < out.size(); ++k) {
        pred.push_back(pred_loss(y[k], out[k].quality));
        recon.push_back(recon_loss(x[k], out[k].reconstruction));
        kld.push_back(kld_loss(out[k].local_mean, out[k].local_log_std));
    }
    return combine_losses(std::move(pred), std::move(recon), std::move(kld), w);
}

LossComponents TapedLoss::values() const
{
    LossComponents c;
    for (const auto& v : pred) c.pred.push_back(v.scalar());
    for (const auto& v : recon) c.recon.push_back(v.scalar());
    for (const auto& v : kld) c.kld.push_back(v.scalar());
    c.total = total.scalar();
    return c;
}

TapedLoss total_loss(std::span<const sdk::TapedStage> out, std::span<const nn::Var> x, std::span<const nn::Var> y,
                     const LossWeights& w)
{
    w.validate(out.size());
    if (x.size() != out.size() || y.size() != out.size()) {
        throw ShapeError("total_loss: stage counts differ");
    }
    TapedLoss loss;
    std::vector<nn::Var> terms;
    std::vector<double> weights;
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (!out[k].reconstruction.valid()) {
            throw UsageError("total_loss needs the reconstruction of every stage");
        }
        loss.pred.push_back(nn::ops::mean_row_sqnorm(nn::ops::sub(out[k].quality, y[k])));
        loss.recon.push_back(nn::ops::mean_row_sqnorm(nn::ops::sub(out[k].reconstruction, x[k])));
        loss.kld.push_back(nn::ops::kld_standard_normal(out[k].local_mean, out[k].local_log_std));
        terms.insert(terms.end(), {loss.pred.back(), loss.recon.back(), loss.kld.back()});
        weights.insert(weights.end(), {w.rho[k], w.theta[k], w.omega[k]});
    }
    loss.total = nn::ops::weighted_sum(terms, weights);
    return loss;
}

} // namespace mmsqc::train
