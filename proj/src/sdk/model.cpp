#include "mmsqc/sdk/model.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/kernels.hpp"
#include "mmsqc/nn/ops.hpp"

#include <cmath>
#include <random>
#include <string>

namespace mmsqc::sdk {

namespace {

void require_len(std::size_t got, std::size_t want, const char* what)
{
    if (got != want) {
        throw ShapeError(std::string(what) + ": expected length " + std::to_string(want) + ", got " +
                         std::to_string(got));
    }
}

nn::Vector to_vector(const nn::Matrix& m)
{
    return nn::Vector(m.values().begin(), m.values().end());
}

// K·v computed with the same kernel the taped path uses.
nn::Vector koopman_apply(const nn::Parameter& k, std::span<const double> v)
{
    nn::Matrix y;
    nn::kernels::affine(nn::Matrix::row_vector(v), k.value, {}, y);
    return to_vector(y);
}

} // namespace

NormStats NormStats::identity(std::span<const StageSpec> stages)
{
    NormStats s;
    for (const auto& st : stages) {
        s.x_mean.emplace_back(st.inputs, 0.0);
        s.x_std.emplace_back(st.inputs, 1.0);
        s.y_mean.emplace_back(st.outputs, 0.0);
        s.y_std.emplace_back(st.outputs, 1.0);
    }
    return s;
}

nn::Vector NormStats::normalize_x(std::size_t k, std::span<const double> x) const
{
    require_len(x.size(), x_mean.at(k).size(), "normalize_x");
    nn::Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = (x[i] - x_mean[k][i]) / x_std[k][i];
    }
    return out;
}

nn::Vector NormStats::normalize_y(std::size_t k, std::span<const double> y) const
{
    require_len(y.size(), y_mean.at(k).size(), "normalize_y");
    nn::Vector out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        out[i] = (y[i] - y_mean[k][i]) / y_std[k][i];
    }
    return out;
}

nn::Vector NormStats::denormalize_y(std::size_t k, std::span<const double> y) const
{
    require_len(y.size(), y_mean.at(k).size(), "denormalize_y");
    nn::Vector out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        out[i] = y[i] * y_std[k][i] + y_mean[k][i];
    }
    return out;
}

namespace {

nn::Matrix map_rows(const nn::Matrix& m, const nn::Vector& mean, const nn::Vector& std, bool forward)
{
    require_len(m.cols(), mean.size(), "normalization");
    nn::Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out(r, c) = forward ? (m(r, c) - mean[c]) / std[c] : m(r, c) * std[c] + mean[c];
        }
    }
    return out;
}

} // namespace

nn::Matrix NormStats::normalize_x(std::size_t k, const nn::Matrix& x) const
{
    return map_rows(x, x_mean.at(k), x_std.at(k), true);
}

nn::Matrix NormStats::normalize_y(std::size_t k, const nn::Matrix& y) const
{
    return map_rows(y, y_mean.at(k), y_std.at(k), true);
}

nn::Matrix NormStats::denormalize_y(std::size_t k, const nn::Matrix& y) const
{
    return map_rows(y, y_mean.at(k), y_std.at(k), false);
}

LatentState propagate(const KoopmanPair& pair, const LatentState& prev, const LatentState& local)
{
    const std::size_t d = pair.mean.value.rows();
    require_len(prev.mean.size(), d, "propagate(prev mean)");
    require_len(prev.log_std.size(), d, "propagate(prev log_std)");
    require_len(local.mean.size(), d, "propagate(local mean)");
    require_len(local.log_std.size(), d, "propagate(local log_std)");
    const auto km = koopman_apply(pair.mean, prev.mean);
    const auto ks = koopman_apply(pair.log_std, prev.log_std);
    LatentState out{nn::Vector(d), nn::Vector(d)};
    for (std::size_t i = 0; i < d; ++i) {
        out.mean[i] = local.mean[i] + km[i];
        out.log_std[i] = local.log_std[i] + ks[i];
    }
    return out;
}

nn::Vector sample_latent(const LatentState& state, std::span<const double> eps)
{
    require_len(state.log_std.size(), state.mean.size(), "sample_latent(log_std)");
    require_len(eps.size(), state.mean.size(), "sample_latent(eps)");
    nn::Vector h(state.mean.size());
    for (std::size_t i = 0; i < h.size(); ++i) {
        h[i] = state.mean[i] + eps[i] * std::exp(state.log_std[i]);
    }
    return h;
}

SdkModel::SdkModel(std::vector<StageSpec> stages, ModelConfig config, std::uint64_t seed)
    : specs_(std::move(stages)), config_(config), seed_(seed)
{
    if (specs_.size() < 2) {
        throw ShapeError("an SDK model needs at least two stages");
    }
    if (config_.latent_dim == 0 || config_.hidden == 0) {
        throw ShapeError("latent and hidden widths must be >= 1");
    }
    if (!std::isfinite(config_.initial_log_std)) throw ConfigError("initial_log_std must be finite");
    const std::size_t d = config_.latent_dim;
    const std::size_t hdim = config_.hidden;
    const auto act = config_.hidden_activation;
    std::mt19937_64 rng(seed_);
    for (std::size_t k = 0; k < specs_.size(); ++k) {
        const auto& s = specs_[k];
        if (s.inputs == 0 || s.outputs == 0) {
            throw ShapeError("stage " + std::to_string(k) + " needs at least one input and one output");
        }
        const std::string base = "stage" + std::to_string(k);
        StageModel m;
        m.encoder.hidden = nn::DenseLayer(s.inputs, hdim, act, base + ".enc.hidden");
        m.encoder.mean = nn::DenseLayer(hdim, d, nn::Activation::identity, base + ".enc.mean");
        m.encoder.log_std = nn::DenseLayer(hdim, d, nn::Activation::identity, base + ".enc.log_std");
        const std::size_t dec[] = {d, hdim, s.inputs};
        m.decoder = nn::Mlp(dec, act, nn::Activation::identity, base + ".dec");
        const std::size_t head[] = {d, hdim, s.outputs};
        m.head = nn::Mlp(head, act, nn::Activation::identity, base + ".head");
        m.encoder.hidden.initialize(rng);
        m.encoder.mean.initialize(rng);
        m.encoder.log_std.initialize(rng);
        // start near unit spread; outlying inputs would otherwise give exp(ln σ̂) overflow
        for (auto& v : m.encoder.log_std.weight().value.values()) v *= 0.01;
        m.encoder.log_std.bias().value.fill(config_.initial_log_std);
        m.decoder.initialize(rng);
        m.head.initialize(rng);
        stages_.push_back(std::move(m));
    }
    const double bound = 0.5 / std::sqrt(static_cast<double>(d));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t k = 1; k < specs_.size(); ++k) {
        const std::string base = "koopman" + std::to_string(k);
        KoopmanPair pair{nn::Parameter(base + ".mean", nn::Matrix(d, d)),
                         nn::Parameter(base + ".log_std", nn::Matrix(d, d))};
        for (auto& v : pair.mean.value.values()) v = dist(rng);
        for (auto& v : pair.log_std.value.values()) v = dist(rng);
        koopman_.push_back(std::move(pair));
    }
    stats_ = NormStats::identity(specs_);
}

void SdkModel::check_stage(std::size_t k) const
{
    if (k >= specs_.size()) {
        throw UsageError("stage index " + std::to_string(k) + " out of range");
    }
}

StageModel& SdkModel::stage(std::size_t k)
{
    check_stage(k);
    return stages_[k];
}

const StageModel& SdkModel::stage(std::size_t k) const
{
    check_stage(k);
    return stages_[k];
}

KoopmanPair& SdkModel::koopman(std::size_t k)
{
    check_stage(k);
    if (k == 0) {
        throw UsageError("the first stage has no incoming Koopman transition");
    }
    return koopman_[k - 1];
}

const KoopmanPair& SdkModel::koopman(std::size_t k) const
{
    check_stage(k);
    if (k == 0) {
        throw UsageError("the first stage has no incoming Koopman transition");
    }
    return koopman_[k - 1];
}

LatentState SdkModel::encode_stage(std::size_t k, std::span<const double> x) const
{
    check_stage(k);
    require_len(x.size(), specs_[k].inputs, "encode_stage");
    const auto& enc = stages_[k].encoder;
    const auto hidden = enc.hidden.forward(nn::Matrix::row_vector(x));
    return {to_vector(enc.mean.forward(hidden)), to_vector(enc.log_std.forward(hidden))};
}

nn::Vector SdkModel::decode_stage(std::size_t k, std::span<const double> h) const
{
    check_stage(k);
    require_len(h.size(), latent_dim(), "decode_stage");
    return to_vector(stages_[k].decoder.forward(nn::Matrix::row_vector(h)));
}

nn::Vector SdkModel::predict_quality(std::size_t k, std::span<const double> h) const
{
    check_stage(k);
    require_len(h.size(), latent_dim(), "predict_quality");
    return to_vector(stages_[k].head.forward(nn::Matrix::row_vector(h)));
}

std::vector<StageOutput> SdkModel::forward_chain(std::span<const nn::Vector> x, EpsilonPolicy eps) const
{
    if (x.size() != specs_.size()) {
        throw UsageError("forward_chain needs inputs for all " + std::to_string(specs_.size()) + " stages, got " +
                         std::to_string(x.size()));
    }
    std::mt19937_64 rng(eps.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<StageOutput> out;
    for (std::size_t k = 0; k < specs_.size(); ++k) {
        StageOutput s;
        s.local = encode_stage(k, x[k]);
        s.state = k == 0 ? s.local : propagate(koopman_[k - 1], out.back().state, s.local);
        nn::Vector e(latent_dim(), 0.0);
        if (eps.kind == EpsilonPolicy::Kind::sample) {
            for (auto& v : e) v = normal(rng);
        }
        s.h = sample_latent(s.state, e);
        s.quality = predict_quality(k, s.h);
        s.reconstruction = decode_stage(k, sample_latent(s.local, e));
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<nn::Matrix> SdkModel::predict_batch(std::span<const nn::Matrix> x) const
{
    if (x.size() != specs_.size()) {
        throw UsageError("predict_batch needs inputs for every stage");
    }
    std::vector<nn::Matrix> quality;
    nn::Matrix prev_mean;
    for (std::size_t k = 0; k < specs_.size(); ++k) {
        if (x[k].cols() != specs_[k].inputs) {
            throw ShapeError("predict_batch: stage " + std::to_string(k) + " input width mismatch");
        }
        const auto& enc = stages_[k].encoder;
        nn::Matrix mean = enc.mean.forward(enc.hidden.forward(x[k]));
        if (k > 0) {
            nn::Matrix carried;
            nn::kernels::affine(prev_mean, koopman_[k - 1].mean.value, {}, carried);
            auto mv = mean.values();
            const auto cv = carried.values();
            for (std::size_t i = 0; i < mv.size(); ++i) {
                mv[i] = mv[i] + cv[i];
            }
        }
        quality.push_back(stages_[k].head.forward(mean));
        prev_mean = std::move(mean);
    }
    return quality;
}

TapedStage SdkModel::forward_stage(nn::Tape& tape, std::size_t k, nn::Var x, nn::Var prev_mean,
                                   nn::Var prev_log_std, nn::Var eps, bool reconstruct)
{
    check_stage(k);
    auto& st = stages_[k];
    TapedStage out;
    auto hidden = st.encoder.hidden.forward(tape, x);
    out.local_mean = st.encoder.mean.forward(tape, hidden);
    out.local_log_std = st.encoder.log_std.forward(tape, hidden);
    if (k == 0) {
        out.mean = out.local_mean;
        out.log_std = out.local_log_std;
    } else {
        if (!prev_mean.valid() || !prev_log_std.valid()) {
            throw UsageError("stage " + std::to_string(k) + " needs the upstream latent state");
        }
        auto& kp = koopman_[k - 1];
        out.mean = nn::ops::add(out.local_mean, nn::ops::linear(prev_mean, tape.parameter(kp.mean)));
        out.log_std = nn::ops::add(out.local_log_std, nn::ops::linear(prev_log_std, tape.parameter(kp.log_std)));
    }
    if (eps.valid()) {
        out.h = nn::ops::add(out.mean, nn::ops::mul(eps, nn::ops::exp(out.log_std)));
    } else {
        out.h = out.mean;
    }
    out.quality = st.head.forward(tape, out.h);
    if (reconstruct) {
        auto local_h = eps.valid() ? nn::ops::add(out.local_mean, nn::ops::mul(eps, nn::ops::exp(out.local_log_std)))
                                   : out.local_mean;
        out.reconstruction = st.decoder.forward(tape, local_h);
    }
    return out;
}

std::vector<TapedStage> SdkModel::forward(nn::Tape& tape, std::span<const nn::Var> x, std::span<const nn::Matrix> eps,
                                          bool reconstruct)
{
    if (x.size() != specs_.size()) {
        throw UsageError("forward needs inputs for every stage");
    }
    if (!eps.empty() && eps.size() != specs_.size()) {
        throw UsageError("forward needs one epsilon matrix per stage");
    }
    std::vector<TapedStage> out;
    for (std::size_t k = 0; k < specs_.size(); ++k) {
        nn::Var e;
        if (!eps.empty()) {
            e = tape.constant(eps[k]);
        }
        nn::Var pm, pl;
        if (k > 0) {
            pm = out.back().mean;
            pl = out.back().log_std;
        }
        out.push_back(forward_stage(tape, k, x[k], pm, pl, e, reconstruct));
    }
    return out;
}

std::vector<nn::Parameter*> SdkModel::parameters()
{
    std::vector<nn::Parameter*> out;
    for (auto& s : stages_) {
        out.push_back(&s.encoder.hidden.weight());
        out.push_back(&s.encoder.hidden.bias());
        out.push_back(&s.encoder.mean.weight());
        out.push_back(&s.encoder.mean.bias());
        out.push_back(&s.encoder.log_std.weight());
        out.push_back(&s.encoder.log_std.bias());
        s.decoder.collect_parameters(out);
        s.head.collect_parameters(out);
    }
    for (auto& k : koopman_) {
        out.push_back(&k.mean);
        out.push_back(&k.log_std);
    }
    return out;
}

std::vector<const nn::Parameter*> SdkModel::parameters() const
{
    auto mut = const_cast<SdkModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

} // namespace mmsqc::sdk
