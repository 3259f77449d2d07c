#pragma once

// Minibatch loop shared by the SDK trainer and the baseline.

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/optimizer.hpp"
#include "mmsqc/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mmsqc::train::detail {

struct FitHooks {
    std::function<void(std::mt19937_64&)> begin_epoch;
    /// Records one batch and returns its loss; fills the components.
    std::function<nn::Var(nn::Tape&, std::span<const std::size_t>, LossComponents&)> batch_loss;
    std::function<double()> validation;
    /// Added to reported epoch numbers, so resumed runs keep counting.
    std::size_t epoch_base = 0;
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    bool stopped_early = false;
};

inline void clip_gradients(const std::vector<nn::Parameter*>& params, double max_norm)
{
    double sq = 0.0;
    for (const auto* p : params)
        for (double g : p->grad.values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!(norm > max_norm)) return; // also leaves NaN for the optimizer to report
    const double f = max_norm / norm;
    for (auto* p : params)
        for (double& g : p->grad.values()) g *= f;
}

inline FitResult fit(std::vector<nn::Parameter*> params, std::size_t rows, const TrainConfig& cfg, const FitHooks& hooks)
{
    FitResult res;
    if (cfg.epochs == 0) return res;
    nn::Optimizer opt(cfg.optimizer, params);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<nn::Matrix> best;
    std::size_t last_change = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        if (hooks.begin_epoch) hooks.begin_epoch(rng);
        EpochRecord rec;
        rec.epoch = hooks.epoch_base + epoch;
        rec.learning_rate = opt.config().learning_rate;
        for (std::size_t start = 0; start < rows; start += cfg.batch_size) {
            const std::size_t end = std::min(rows, start + cfg.batch_size);
            const std::span<const std::size_t> batch(order.data() + start, end - start);
            for (auto* p : params) p->zero_grad();
            nn::Tape tape;
            LossComponents c;
            auto loss = hooks.batch_loss(tape, batch, c);
            if (!std::isfinite(loss.scalar())) {
                throw DivergenceError("non-finite training loss in epoch " + std::to_string(epoch));
            }
            tape.backward(loss);
            if (cfg.clip_norm > 0.0) clip_gradients(params, cfg.clip_norm);
            try {
                opt.step();
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")");
            }
            const double wgt = double(batch.size()) / double(rows);
            auto acc = [wgt](nn::Vector& dst, const nn::Vector& src) {
                if (dst.size() < src.size()) dst.resize(src.size(), 0.0);
                for (std::size_t i = 0; i < src.size(); ++i) dst[i] += wgt * src[i];
            };
            acc(rec.train.pred, c.pred);
            acc(rec.train.recon, c.recon);
            acc(rec.train.kld, c.kld);
            rec.train.total += wgt * c.total;
        }
        rec.val_pred = hooks.validation();
        if (!std::isfinite(rec.val_pred)) {
            throw DivergenceError("non-finite validation loss in epoch " + std::to_string(epoch));
        }
        if (res.best_epoch == 0 || rec.val_pred < res.best_val) {
            rec.improved = true;
            res.best_val = rec.val_pred;
            res.best_epoch = epoch;
            best.clear();
            for (auto* p : params) best.push_back(p->value);
            last_change = epoch;
        } else if (cfg.decay_patience > 0 && epoch - last_change >= cfg.decay_patience) {
            opt.set_learning_rate(opt.config().learning_rate * cfg.lr_decay);
            last_change = epoch;
        }
        res.history.push_back(rec);
        if (cfg.on_epoch) cfg.on_epoch(rec);
        if (cfg.patience > 0 && epoch - res.best_epoch >= cfg.patience) {
            res.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value = best[i];
        params[i]->zero_grad();
    }
    res.best_epoch += hooks.epoch_base;
    return res;
}

inline nn::Matrix gather_rows(const nn::Matrix& m, std::span<const std::size_t> rows)
{
    nn::Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
    }
    return out;
}

} // namespace mmsqc::train::detail
