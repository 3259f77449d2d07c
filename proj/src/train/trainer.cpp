#include "mmsqc/train/trainer.hpp"

#include "fit.hpp"
#include "mmsqc/errors.hpp"
#include "mmsqc/nn/ops.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <sstream>

namespace mmsqc::train {

using nlohmann::json;

void TrainConfig::validate() const
{
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
    optimizer.validate();
}

namespace {

std::vector<nn::Matrix> normalize_x(const sdk::NormStats& s, std::span<const nn::Matrix> x)
{
    std::vector<nn::Matrix> out;
    for (std::size_t k = 0; k < x.size(); ++k) out.push_back(s.normalize_x(k, x[k]));
    return out;
}

std::vector<nn::Matrix> normalize_targets(const sdk::NormStats& s, std::span<const nn::Matrix> y,
                                          std::span<const std::size_t> relative)
{
    const auto t = to_model_targets(y, relative);
    std::vector<nn::Matrix> out;
    for (std::size_t k = 0; k < t.size(); ++k) out.push_back(s.normalize_y(k, t[k]));
    return out;
}

double weighted_pred(const std::vector<nn::Matrix>& y, const std::vector<nn::Matrix>& pred, const LossWeights& w)
{
    double v = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) v += w.rho[k] * pred_loss(y[k], pred[k]);
    return v;
}

json rmse_json(const std::map<std::string, StageRmse>& r)
{
    json j = json::object();
    for (const auto& [split, v] : r) j[split] = v;
    return j;
}

} // namespace

std::string TrainReport::history_csv() const
{
    std::ostringstream out;
    const std::size_t stages = history.empty() ? 0 : history.front().train.pred.size();
    out << "epoch,total";
    for (const char* name : {"pred", "recon", "kld"}) {
        for (std::size_t k = 0; k < stages; ++k) out << ',' << name << k + 1;
    }
    out << ",val_pred\n";
    out.precision(17);
    for (const auto& r : history) {
        out << r.epoch << ',' << r.train.total;
        for (const auto* v : {&r.train.pred, &r.train.recon, &r.train.kld}) {
            for (double x : *v) out << ',' << x;
        }
        out << ',' << r.val_pred << '\n';
    }
    return out.str();
}

std::string TrainReport::to_json(bool with_timing) const
{
    json j;
    j["seed"] = seed;
    j["epochs_run"] = epochs_run;
    j["best_epoch"] = best_epoch;
    j["best_val_pred"] = best_val;
    j["stopped_early"] = stopped_early;
    j["rmse"] = rmse_json(rmse);
    json hist = json::array();
    for (const auto& r : history) {
        hist.push_back({{"epoch", r.epoch},
                        {"total", r.train.total},
                        {"pred", r.train.pred},
                        {"recon", r.train.recon},
                        {"kld", r.train.kld},
                        {"val_pred", r.val_pred}});
    }
    j["history"] = hist;
    if (with_timing) j["wall_seconds"] = wall_seconds;
    return j.dump(2);
}

TrainReport train(sdk::SdkModel& model, const Dataset& data, const TrainConfig& config)
{
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n_stages = model.stage_count();
    if (data.specs.size() != n_stages) throw ShapeError("model and dataset stage counts differ");
    for (std::size_t k = 0; k < n_stages; ++k) {
        if (data.specs[k].inputs != model.stages()[k].inputs || data.specs[k].outputs != model.stages()[k].outputs) {
            throw ShapeError("model and dataset dimensions differ at stage " + std::to_string(k + 1));
        }
    }
    const auto weights = config.weights.value_or(LossWeights::defaults(n_stages));
    weights.validate(n_stages);

    model.norm_stats() = data.stats;
    model.metadata().x_names = data.x_names;
    model.metadata().y_names = data.y_names;
    model.metadata().relative_quality = data.relative_quality;

    const auto xs = normalize_x(data.stats, data.train.x);
    const auto ys = normalize_targets(data.stats, data.train.y, data.relative_quality);
    const bool has_val = data.val.rows() > 0;
    const auto xv = has_val ? normalize_x(data.stats, data.val.x) : std::vector<nn::Matrix>{};
    const auto yv = has_val ? normalize_targets(data.stats, data.val.y, data.relative_quality) : std::vector<nn::Matrix>{};
    const std::size_t n = data.n();
    const std::size_t d = model.latent_dim();

    std::vector<nn::Matrix> eps(n_stages);
    double last_train_pred = 0.0;
    detail::FitHooks hooks;
    hooks.begin_epoch = [&](std::mt19937_64& rng) {
        std::normal_distribution<double> g(0.0, 1.0);
        for (auto& e : eps) {
            e = nn::Matrix(n, d);
            for (auto& v : e.values()) v = g(rng);
        }
        last_train_pred = 0.0;
    };
    hooks.batch_loss = [&](nn::Tape& tape, std::span<const std::size_t> rows, LossComponents& c) {
        std::vector<nn::Var> xb, yb;
        std::vector<nn::Matrix> eb;
        for (std::size_t k = 0; k < n_stages; ++k) {
            xb.push_back(tape.constant(detail::gather_rows(xs[k], rows)));
            yb.push_back(tape.constant(detail::gather_rows(ys[k], rows)));
            eb.push_back(detail::gather_rows(eps[k], rows));
        }
        const auto out = model.forward(tape, xb, eb, true);
        auto loss = total_loss(out, xb, yb, weights);
        c = loss.values();
        for (std::size_t k = 0; k < n_stages; ++k) {
            last_train_pred += weights.rho[k] * c.pred[k] * double(rows.size()) / double(n);
        }
        return loss.total;
    };
    hooks.validation = [&] {
        if (!has_val) return last_train_pred;
        return weighted_pred(yv, model.predict_batch(xv), weights);
    };

    hooks.epoch_base = model.metadata().epochs_completed;
    const auto fitted = detail::fit(model.parameters(), n, config, hooks);

    TrainReport report;
    report.seed = config.seed;
    report.epochs_run = fitted.history.size();
    report.best_epoch = fitted.best_epoch;
    report.best_val = fitted.best_val;
    report.stopped_early = fitted.stopped_early;
    report.history = fitted.history;
    model.metadata().epochs_completed += report.epochs_run;
    for (auto s : {Split::train, Split::val, Split::test}) {
        if (data.split(s).rows() > 0) report.rmse[std::string(to_string(s))] = evaluate_rmse(model, data.split(s));
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::vector<nn::Matrix> predict_targets(const sdk::SdkModel& model, std::span<const nn::Matrix> x)
{
    const auto& s = model.norm_stats();
    auto pred = model.predict_batch(normalize_x(s, x));
    for (std::size_t k = 0; k < pred.size(); ++k) pred[k] = s.denormalize_y(k, pred[k]);
    return pred;
}

std::vector<nn::Matrix> predict_absolute(const sdk::SdkModel& model, std::span<const nn::Matrix> x)
{
    return to_absolute(predict_targets(model, x), model.metadata().relative_quality);
}

StageRmse rmse(std::span<const nn::Matrix> truth, std::span<const nn::Matrix> prediction)
{
    if (truth.size() != prediction.size()) throw ShapeError("rmse: stage counts differ");
    StageRmse out;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        nn::require_same_shape(truth[k], prediction[k], "rmse");
        if (truth[k].rows() == 0) throw UsageError("rmse over an empty split");
        nn::Vector r(truth[k].cols(), 0.0);
        for (std::size_t c = 0; c < truth[k].cols(); ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < truth[k].rows(); ++i) {
                const double e = prediction[k](i, c) - truth[k](i, c);
                s += e * e;
            }
            r[c] = std::sqrt(s / double(truth[k].rows()));
        }
        out.push_back(std::move(r));
    }
    return out;
}

StageRmse evaluate_rmse(const sdk::SdkModel& model, const SplitData& split)
{
    if (split.rows() == 0) throw UsageError("evaluate_rmse: the split is empty");
    return rmse(to_model_targets(split.y, model.metadata().relative_quality), predict_targets(model, split.x));
}

namespace {

nn::Matrix cumulative_inputs(std::span<const nn::Matrix> x, std::size_t stage)
{
    std::size_t cols = 0;
    for (std::size_t k = 0; k <= stage; ++k) cols += x[k].cols();
    const std::size_t rows = x[0].rows();
    nn::Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t c = 0;
        for (std::size_t k = 0; k <= stage; ++k) {
            for (double v : x[k].row(r)) out(r, c++) = v;
        }
    }
    return out;
}

nn::Matrix zscore(const nn::Matrix& m, const nn::Vector& mean, const nn::Vector& sd)
{
    nn::Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = (m(r, c) - mean[c]) / sd[c];
    }
    return out;
}

} // namespace

nn::Matrix BaselineModel::predict(std::span<const nn::Matrix> x) const
{
    if (x.size() <= stage) throw UsageError("baseline needs inputs up to its stage");
    auto y = net.forward(zscore(cumulative_inputs(x, stage), x_mean, x_std));
    for (std::size_t r = 0; r < y.rows(); ++r) {
        for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) = y(r, c) * y_std[c] + y_mean[c];
    }
    return y;
}

BaselineResult train_baseline_ann(const Dataset& data, std::size_t stage, const TrainConfig& config)
{
    config.validate();
    if (stage >= data.specs.size()) throw UsageError("baseline stage out of range");
    BaselineResult res;
    auto& m = res.model;
    m.stage = stage;
    const auto xin = cumulative_inputs(data.train.x, stage);
    const auto target = [&](const SplitData& sp) { return to_model_targets(sp.y, data.relative_quality)[stage]; };
    const auto y_train = target(data.train);
    {
        std::vector<nn::Vector> mu, sd;
        column_stats(std::span(&xin, 1), mu, sd);
        m.x_mean = mu[0];
        m.x_std = sd[0];
        column_stats(std::span(&y_train, 1), mu, sd);
        m.y_mean = mu[0];
        m.y_std = sd[0];
    }
    const std::size_t widths[] = {xin.cols(), 64, data.specs[stage].outputs};
    m.net = nn::Mlp(widths, nn::Activation::relu, nn::Activation::identity, "ann" + std::to_string(stage + 1));
    std::mt19937_64 init(config.seed);
    m.net.initialize(init);

    const auto xs = zscore(xin, m.x_mean, m.x_std);
    const auto ys = zscore(y_train, m.y_mean, m.y_std);
    const bool has_val = data.val.rows() > 0;
    const auto xv = has_val ? zscore(cumulative_inputs(data.val.x, stage), m.x_mean, m.x_std) : nn::Matrix{};
    const auto yv = has_val ? zscore(target(data.val), m.y_mean, m.y_std) : nn::Matrix{};
    const std::size_t n = data.n();
    double last_train = 0.0;

    detail::FitHooks hooks;
    hooks.begin_epoch = [&](std::mt19937_64&) { last_train = 0.0; };
    hooks.batch_loss = [&](nn::Tape& tape, std::span<const std::size_t> rows, LossComponents& c) {
        auto out = m.net.forward(tape, tape.constant(detail::gather_rows(xs, rows)));
        auto loss = nn::ops::mean_row_sqnorm(nn::ops::sub(out, tape.constant(detail::gather_rows(ys, rows))));
        c.pred = {loss.scalar()};
        c.total = loss.scalar();
        last_train += c.total * double(rows.size()) / double(n);
        return loss;
    };
    hooks.validation = [&] { return has_val ? pred_loss(yv, m.net.forward(xv)) : last_train; };

    std::vector<nn::Parameter*> params;
    m.net.collect_parameters(params);
    auto cfg = config;
    cfg.on_epoch = nullptr;
    const auto fitted = detail::fit(params, n, cfg, hooks);
    for (const auto& r : fitted.history) res.val_history.push_back(r.val_pred);
    for (auto s : {Split::train, Split::val, Split::test}) {
        const auto& sp = data.split(s);
        if (sp.rows() == 0) continue;
        const auto pred = m.predict(sp.x);
        const auto truth = target(sp);
        res.rmse[std::string(to_string(s))] = rmse(std::span(&truth, 1), std::span(&pred, 1))[0];
    }
    return res;
}

} // namespace mmsqc::train
