#include "mmsqc/sdk/checkpoint.hpp"

#include "mmsqc/errors.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace mmsqc::sdk {

using nlohmann::json;

namespace {

json matrix_json(const nn::Matrix& m)
{
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

nn::Matrix matrix_from(const json& j, std::size_t rows, std::size_t cols, const std::string& what)
{
    if (j.at("rows").get<std::size_t>() != rows || j.at("cols").get<std::size_t>() != cols) {
        throw LoadError(what + ": stored shape does not match the declared dimensions");
    }
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) {
        throw LoadError(what + ": data length does not match its shape");
    }
    nn::Matrix m(rows, cols, std::move(data));
    if (!m.all_finite()) {
        throw LoadError(what + ": non-finite entries");
    }
    return m;
}

void write_layer(json& out, const nn::DenseLayer& l)
{
    out[l.weight().name] = matrix_json(l.weight().value);
    out[l.bias().name] = matrix_json(l.bias().value);
}

void read_layer(const json& in, nn::DenseLayer& l)
{
    auto& w = l.weight();
    auto& b = l.bias();
    if (!in.contains(w.name) || !in.contains(b.name)) {
        throw LoadError("missing parameters for layer " + w.name);
    }
    w.value = matrix_from(in.at(w.name), w.value.rows(), w.value.cols(), w.name);
    b.value = matrix_from(in.at(b.name), b.value.rows(), b.value.cols(), b.name);
    w.zero_grad();
    b.zero_grad();
}

template <class F>
void for_each_layer(StageModel& s, F&& f)
{
    f(s.encoder.hidden);
    f(s.encoder.mean);
    f(s.encoder.log_std);
    for (auto& l : s.decoder.layers()) f(l);
    for (auto& l : s.head.layers()) f(l);
}

template <class F>
void for_each_layer(const StageModel& s, F&& f)
{
    for_each_layer(const_cast<StageModel&>(s), [&](nn::DenseLayer& l) { f(static_cast<const nn::DenseLayer&>(l)); });
}

using Table = std::vector<nn::Vector>;

void check_table(const Table& t, const std::vector<StageSpec>& specs, bool inputs, const char* what)
{
    if (t.size() != specs.size()) {
        throw LoadError(std::string("norm_stats.") + what + ": wrong stage count");
    }
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto want = inputs ? specs[k].inputs : specs[k].outputs;
        if (t[k].size() != want) {
            throw LoadError(std::string("norm_stats.") + what + ": wrong width at stage " + std::to_string(k));
        }
    }
}

} // namespace

std::string checkpoint_to_string(const SdkModel& model)
{
    json j;
    j["schema_version"] = checkpoint_schema_version;
    j["d_h"] = model.latent_dim();
    j["hidden"] = model.config().hidden;
    j["hidden_activation"] = std::string(nn::to_string(model.config().hidden_activation));
    j["seed"] = model.seed();
    json stages = json::array();
    for (std::size_t k = 0; k < model.stage_count(); ++k) {
        json params = json::object();
        for_each_layer(model.stage(k), [&](const nn::DenseLayer& l) { write_layer(params, l); });
        stages.push_back(
            {{"inputs", model.stages()[k].inputs}, {"outputs", model.stages()[k].outputs}, {"parameters", params}});
    }
    j["stages"] = stages;
    json koop = json::array();
    for (std::size_t k = 1; k < model.stage_count(); ++k) {
        const auto& p = model.koopman(k);
        koop.push_back({{"mean", matrix_json(p.mean.value)}, {"log_std", matrix_json(p.log_std.value)}});
    }
    j["koopman"] = koop;
    const auto& s = model.norm_stats();
    j["norm_stats"] = {{"x_mean", s.x_mean}, {"x_std", s.x_std}, {"y_mean", s.y_mean}, {"y_std", s.y_std}};
    const auto& m = model.metadata();
    j["metadata"] = {{"x_names", m.x_names},
                     {"y_names", m.y_names},
                     {"relative_quality", m.relative_quality},
                     {"epochs_completed", m.epochs_completed}};
    return j.dump(1);
}

SdkModel checkpoint_from_string(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw LoadError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        if (!j.contains("schema_version") || j.at("schema_version").get<int>() != checkpoint_schema_version) {
            throw LoadError("unsupported checkpoint schema version");
        }
        ModelConfig cfg;
        cfg.latent_dim = j.at("d_h").get<std::size_t>();
        cfg.hidden = j.at("hidden").get<std::size_t>();
        cfg.hidden_activation = nn::activation_from_string(j.at("hidden_activation").get<std::string>());
        const auto seed = j.at("seed").get<std::uint64_t>();
        std::vector<StageSpec> specs;
        for (const auto& s : j.at("stages")) {
            specs.push_back({s.at("inputs").get<std::size_t>(), s.at("outputs").get<std::size_t>()});
        }
        if (j.at("koopman").size() + 1 != specs.size()) {
            throw LoadError("koopman[] must hold one entry per stage transition");
        }
        SdkModel model(specs, cfg, seed);
        for (std::size_t k = 0; k < specs.size(); ++k) {
            const auto& params = j.at("stages")[k].at("parameters");
            for_each_layer(model.stage(k), [&](nn::DenseLayer& l) { read_layer(params, l); });
        }
        const std::size_t d = cfg.latent_dim;
        for (std::size_t k = 1; k < specs.size(); ++k) {
            const auto& kj = j.at("koopman")[k - 1];
            auto& p = model.koopman(k);
            p.mean.value = matrix_from(kj.at("mean"), d, d, p.mean.name);
            p.log_std.value = matrix_from(kj.at("log_std"), d, d, p.log_std.name);
            p.mean.zero_grad();
            p.log_std.zero_grad();
        }
        auto& stats = model.norm_stats();
        const auto& ns = j.at("norm_stats");
        stats.x_mean = ns.at("x_mean").get<Table>();
        stats.x_std = ns.at("x_std").get<Table>();
        stats.y_mean = ns.at("y_mean").get<Table>();
        stats.y_std = ns.at("y_std").get<Table>();
        check_table(stats.x_mean, specs, true, "x_mean");
        check_table(stats.x_std, specs, true, "x_std");
        check_table(stats.y_mean, specs, false, "y_mean");
        check_table(stats.y_std, specs, false, "y_std");
        for (const auto* t : {&stats.x_std, &stats.y_std}) {
            for (const auto& row : *t) {
                for (double v : row) {
                    if (!(v > 0.0)) throw LoadError("norm_stats: standard deviations must be positive");
                }
            }
        }
        if (j.contains("metadata")) {
            const auto& mj = j.at("metadata");
            auto& m = model.metadata();
            m.x_names = mj.value("x_names", std::vector<std::vector<std::string>>{});
            m.y_names = mj.value("y_names", std::vector<std::vector<std::string>>{});
            m.relative_quality = mj.value("relative_quality", std::vector<std::size_t>{});
            m.epochs_completed = mj.value("epochs_completed", std::size_t{0});
            for (auto q : m.relative_quality) {
                for (const auto& s : specs) {
                    if (q >= s.outputs) throw LoadError("metadata.relative_quality index out of range");
                }
            }
        }
        return model;
    } catch (const json::exception& e) {
        throw LoadError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ShapeError& e) {
        throw LoadError(std::string("inconsistent checkpoint dimensions: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("invalid checkpoint field: ") + e.what());
    }
}

void save_checkpoint(const SdkModel& model, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write checkpoint " + path.string());
    }
    out << checkpoint_to_string(model) << '\n';
    if (!out) {
        throw Error("failed writing checkpoint " + path.string());
    }
}

SdkModel load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_string(ss.str());
}

} // namespace mmsqc::sdk
