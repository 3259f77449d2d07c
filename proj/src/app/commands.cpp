#include "mmsqc/app/commands.hpp"

#include "mmsqc/errors.hpp"
#include "mmsqc/nn/kernels.hpp"
#include "mmsqc/sdk/checkpoint.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace mmsqc::app {

namespace fs = std::filesystem;

namespace {

std::string num(double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
    if (!f) throw Error("failed writing " + path.string());
}

void write_manifest(const fs::path& dir, const char* command, const Json& doc, std::uint64_t seed, Json inputs,
                    std::vector<std::string> outputs)
{
    fs::create_directories(dir);
    write_text(dir / "config.json", doc.dump(2) + "\n");
    Json m;
    m["command"] = command;
    m["config_sha256"] = config_hash(doc);
    m["seed"] = seed;
    m["inputs"] = std::move(inputs);
    outputs.insert(outputs.begin(), "config.json");
    m["outputs"] = outputs;
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

struct MeanStd {
    double mean = 0.0, std = 0.0;
};

// Sample standard deviation; a single run reports 0.
MeanStd mean_std(const std::vector<double>& v)
{
    MeanStd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= double(v.size());
    if (v.size() > 1) {
        for (double x : v) r.std += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(r.std / double(v.size() - 1));
    }
    return r;
}

std::string quality_label(const train::Dataset& ds, std::size_t k, std::size_t j)
{
    std::string name = k < ds.y_names.size() && j < ds.y_names[k].size()
                           ? ds.y_names[k][j]
                           : "stage" + std::to_string(k + 1) + "_y" + std::to_string(j + 1);
    const auto& rel = ds.relative_quality;
    if (k > 0 && std::find(rel.begin(), rel.end(), j) != rel.end()) {
        const std::string base = j < ds.y_names[0].size() ? ds.y_names[0][j] : "stage1";
        name += "-" + base;
    }
    return name;
}

std::string csv_quote(std::string s)
{
    std::replace(s.begin(), s.end(), '"', '\'');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

sdk::SdkModel load_model(const fs::path& path)
{
    if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
    return sdk::load_checkpoint(path);
}

} // namespace

int exit_code_for(const std::exception& e) noexcept
{
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const LoadError*>(&e) ||
        dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ShapeError*>(&e)) {
        return exit_config;
    }
    if (dynamic_cast<const SimulationError*>(&e)) return exit_simulation;
    if (dynamic_cast<const DivergenceError*>(&e)) return exit_divergence;
    if (dynamic_cast<const SolverError*>(&e)) return exit_solver;
    return exit_failure;
}

void apply_thread_limit()
{
    const char* v = std::getenv("MMSQC_THREADS");
    if (!v || !*v) return;
    int n = 0;
    const auto res = std::from_chars(v, v + std::strlen(v), n);
    if (res.ec != std::errc() || *res.ptr != '\0' || n < 1) {
        throw ConfigError(std::string("MMSQC_THREADS must be a positive integer, got '") + v + "'");
    }
    nn::kernels::set_thread_count(std::min(n, nn::kernels::thread_count()));
}

void cmd_simulate(const SimulateRun& run, const Json& doc, std::ostream& out)
{
    const auto data = sim::generate_dataset(run.generate);
    sim::write_dataset(data, run.output);
    std::vector<std::string> files{"index.json"};
    std::size_t n_test = 0;
    for (std::size_t i = 0; i < data.trials.size(); ++i) {
        files.push_back(data.trials[i].id + ".csv");
        n_test += data.splits[i] == train::Split::test;
    }
    write_manifest(run.output, "simulate", doc, run.generate.seed, Json::object(), files);
    out << "simulated " << data.trials.size() << " trials (" << n_test << " test) into " << run.output.string()
        << "\n";
}

void cmd_train(const TrainRun& run, const Json& doc, std::ostream& out)
{
    const auto data = train::load_dataset(run.data, run.dataset);
    std::optional<sdk::SdkModel> model;
    if (run.resume) {
        model = load_model(*run.resume);
        out << "resuming " << run.resume->string() << " after epoch " << model->metadata().epochs_completed << "\n";
    } else {
        model.emplace(data.specs, run.model, run.seed);
    }
    const std::size_t stages = model->stage_count();
    out << "rows: train " << data.train.rows() << ", val " << data.val.rows() << ", test " << data.test.rows() << "\n";
    out << std::setw(6) << "epoch" << std::setw(13) << "total";
    for (std::size_t k = 0; k < stages; ++k) out << std::setw(12) << ("pred" + std::to_string(k + 1));
    out << std::setw(13) << "val_pred" << std::setw(10) << "lr" << "\n";

    auto cfg = run.train;
    cfg.on_epoch = [&](const train::EpochRecord& r) {
        out << std::setw(6) << r.epoch << std::setw(13) << std::setprecision(5) << r.train.total;
        for (double p : r.train.pred) out << std::setw(12) << std::setprecision(4) << p;
        out << std::setw(13) << std::setprecision(5) << r.val_pred << std::setw(10) << std::setprecision(3)
            << r.learning_rate << (r.improved ? " *" : "") << "\n";
    };
    const auto report = train::train(*model, data, cfg);

    fs::create_directories(run.output);
    sdk::save_checkpoint(*model, run.output / "checkpoint.json");
    write_text(run.output / "report.json", report.to_json(false) + "\n");
    write_text(run.output / "history.csv", report.history_csv());
    Json inputs{{"data", run.data.string()}};
    if (run.resume) inputs["resume"] = run.resume->string();
    write_manifest(run.output, "train", doc, run.seed, inputs, {"checkpoint.json", "report.json", "history.csv"});
    out << "best epoch " << report.best_epoch << " (val_pred " << report.best_val << ") after " << report.epochs_run
        << " epochs, " << std::setprecision(3) << report.wall_seconds << " s\n";
    if (auto it = report.rmse.find("test"); it != report.rmse.end()) {
        for (std::size_t k = 0; k < it->second.size(); ++k) {
            for (std::size_t j = 0; j < it->second[k].size(); ++j) {
                out << "  test rmse " << quality_label(data, k, j) << ": " << std::setprecision(4) << it->second[k][j]
                    << "\n";
            }
        }
    }
}

void cmd_evaluate(const EvaluateRun& run, const Json& doc, std::ostream& out)
{
    std::vector<sdk::SdkModel> models;
    for (const auto& p : run.checkpoints) models.push_back(load_model(p));
    auto opts = run.dataset;
    opts.relative_quality = models.front().metadata().relative_quality;
    for (const auto& m : models) {
        if (m.metadata().relative_quality != opts.relative_quality) {
            throw ConfigError("checkpoints disagree on which quality indices are relative");
        }
    }
    const auto data = train::load_dataset(run.data, opts);
    const std::size_t stages = data.specs.size();
    for (const auto& m : models) {
        if (m.stage_count() != stages) throw ConfigError("checkpoint and dataset stage counts differ");
    }

    // rmse[k][j] over repetitions
    std::vector<std::vector<std::vector<double>>> sdk_r(stages), ann_r(stages);
    for (std::size_t k = 0; k < stages; ++k) {
        sdk_r[k].resize(data.specs[k].outputs);
        ann_r[k].resize(data.specs[k].outputs);
    }
    std::string runs = "model,run,stage,index,name,rmse\n";
    for (std::size_t i = 0; i < models.size(); ++i) {
        const auto r = train::evaluate_rmse(models[i], data.test);
        for (std::size_t k = 0; k < stages; ++k)
            for (std::size_t j = 0; j < r[k].size(); ++j) {
                sdk_r[k][j].push_back(r[k][j]);
                runs += "sdk," + std::to_string(i) + "," + std::to_string(k + 1) + "," + std::to_string(j + 1) + "," +
                        quality_label(data, k, j) + "," + num(r[k][j]) + "\n";
            }
    }
    for (std::size_t rep = 0; rep < run.repeats; ++rep) {
        auto cfg = run.baseline;
        cfg.seed = sim::mix_seed(run.seed, rep);
        for (std::size_t k = 0; k < stages; ++k) {
            const auto b = train::train_baseline_ann(data, k, cfg);
            const auto& r = b.rmse.at("test");
            for (std::size_t j = 0; j < r.size(); ++j) {
                ann_r[k][j].push_back(r[j]);
                runs += "ann," + std::to_string(rep) + "," + std::to_string(k + 1) + "," + std::to_string(j + 1) + "," +
                        quality_label(data, k, j) + "," + num(r[j]) + "\n";
            }
        }
        out << "baseline repeat " << rep + 1 << "/" << run.repeats << " done\n";
    }

    std::string csv = "stage,index,name,sdk_mean,sdk_std,sdk_runs,ann_mean,ann_std,ann_runs,sdk_over_ann\n";
    Json metrics = Json::array();
    out << std::left << std::setw(10) << "output" << std::right << std::setw(26) << "SDK rmse" << std::setw(26)
        << "ANN rmse" << std::setw(9) << "ratio" << "\n";
    for (std::size_t k = 0; k < stages; ++k) {
        for (std::size_t j = 0; j < sdk_r[k].size(); ++j) {
            const auto s = mean_std(sdk_r[k][j]);
            const auto a = mean_std(ann_r[k][j]);
            const double ratio = ann_r[k][j].empty() || a.mean == 0.0 ? std::nan("") : s.mean / a.mean;
            const auto name = quality_label(data, k, j);
            csv += std::to_string(k + 1) + "," + std::to_string(j + 1) + "," + name + "," + num(s.mean) + "," +
                   num(s.std) + "," + std::to_string(sdk_r[k][j].size()) + "," + num(a.mean) + "," + num(a.std) + "," +
                   std::to_string(ann_r[k][j].size()) + "," + num(ratio) + "\n";
            metrics.push_back({{"stage", k + 1},
                               {"index", j + 1},
                               {"name", name},
                               {"sdk_mean", s.mean},
                               {"sdk_std", s.std},
                               {"ann_mean", a.mean},
                               {"ann_std", a.std}});
            std::ostringstream sdk_txt, ann_txt;
            sdk_txt << std::setprecision(4) << s.mean << " ± " << s.std;
            ann_txt << std::setprecision(4) << a.mean << " ± " << a.std;
            out << std::left << std::setw(10) << name << std::right << std::setw(26) << sdk_txt.str() << std::setw(26)
                << ann_txt.str() << std::setw(9) << std::setprecision(3) << ratio << "\n";
        }
    }
    fs::create_directories(run.output);
    write_text(run.output / "metrics.csv", csv);
    write_text(run.output / "runs.csv", runs);
    write_text(run.output / "metrics.json", metrics.dump(2) + "\n");
    Json cps = Json::array();
    for (const auto& p : run.checkpoints) cps.push_back(p.string());
    write_manifest(run.output, "evaluate", doc, run.seed, {{"data", run.data.string()}, {"checkpoints", cps}},
                   {"metrics.csv", "metrics.json", "runs.csv"});
}

void cmd_control(const ControlRun& run, const Json& doc, std::ostream& out)
{
    const auto model = load_model(run.checkpoint);
    fs::create_directories(run.output);
    std::vector<std::string> files;
    std::string summary =
        "trial,max_21_off,max_21_on,reduction_21,mean_21_off,mean_21_on,max_31_off,max_31_on,reduction_31,"
        "mean_31_off,mean_31_on,cycles,solved\n";
    std::string cycles = "trial,t,solved,iterations,converged,objective,objective_at_zero,solve_ms,error\n";
    Json js = Json::array();
    const auto um = [](double m) { return m * 1e6; };
    const auto reduction = [](double off, double on) { return off > 0.0 ? 100.0 * (1.0 - on / off) : 0.0; };
    for (const auto& t : run.trials) {
        auto cfg = run.loop;
        cfg.trial.schedule = t.schedule;
        cfg.trial.seed = t.seed;
        cfg.trial.id = t.id;
        cfg.enabled = false;
        const auto off = control::run_closed_loop(model, cfg);
        cfg.enabled = run.loop.enabled;
        const auto on = control::run_closed_loop(model, cfg);
        write_text(run.output / (t.id + "_off.csv"), off.to_csv(false));
        write_text(run.output / (t.id + "_on.csv"), on.to_csv(false));
        files.push_back(t.id + "_off.csv");
        files.push_back(t.id + "_on.csv");

        out << "trial " << t.id << "\n";
        std::size_t solved = 0;
        for (const auto& c : on.cycles) {
            solved += c.solved;
            out << "  t " << std::setw(6) << std::fixed << std::setprecision(1) << c.time << " s  solve "
                << std::setw(8) << std::setprecision(2) << c.solution.solve_ms << " ms  it " << std::setw(3)
                << c.solution.iterations << std::defaultfloat << "  J " << std::setprecision(4) << c.solution.objective
                << " (from " << c.solution.objective_at_zero << ")" << (c.solved ? "" : "  FAILED: " + c.error) << "\n";
            cycles += t.id + "," + num(c.time) + "," + (c.solved ? "1" : "0") + "," +
                      std::to_string(c.solution.iterations) + "," + (c.solution.converged ? "1" : "0") + "," +
                      num(c.solution.objective) + "," + num(c.solution.objective_at_zero) + "," +
                      num(c.solution.solve_ms) + ",\"" + csv_quote(c.error) + "\"\n";
        }
        const auto a = control::summarize(off), b = control::summarize(on);
        summary += t.id + "," + num(um(a.max_21)) + "," + num(um(b.max_21)) + "," + num(reduction(a.max_21, b.max_21)) +
                   "," + num(um(a.mean_21)) + "," + num(um(b.mean_21)) + "," + num(um(a.max_31)) + "," +
                   num(um(b.max_31)) + "," + num(reduction(a.max_31, b.max_31)) + "," + num(um(a.mean_31)) + "," +
                   num(um(b.mean_31)) + "," + std::to_string(on.cycles.size()) + "," + std::to_string(solved) + "\n";
        js.push_back({{"trial", t.id},
                      {"seed", t.seed},
                      {"off", {{"max_21_um", um(a.max_21)}, {"mean_21_um", um(a.mean_21)},
                               {"max_31_um", um(a.max_31)}, {"mean_31_um", um(a.mean_31)}}},
                      {"on", {{"max_21_um", um(b.max_21)}, {"mean_21_um", um(b.mean_21)},
                              {"max_31_um", um(b.max_31)}, {"mean_31_um", um(b.mean_31)}}},
                      {"reduction_21_pct", reduction(a.max_21, b.max_21)},
                      {"reduction_31_pct", reduction(a.max_31, b.max_31)}});
        out << std::fixed << std::setprecision(1) << "  max |l2-l1| " << um(a.max_21) << " -> " << um(b.max_21)
            << " um (" << reduction(a.max_21, b.max_21) << "%), max |l3-l1| " << um(a.max_31) << " -> "
            << um(b.max_31) << " um (" << reduction(a.max_31, b.max_31) << "%)\n"
            << std::defaultfloat;
    }
    write_text(run.output / "summary.csv", summary);
    write_text(run.output / "summary.json", js.dump(2) + "\n");
    write_text(run.output / "cycles.csv", cycles);
    files.insert(files.end(), {"summary.csv", "summary.json", "cycles.csv"});
    write_manifest(run.output, "control", doc, run.seed, {{"checkpoint", run.checkpoint.string()}}, files);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multistage quality modelling and feedforward control on a simulated roll-to-roll line", "mmsqc"};
    app.require_subcommand(1);
    struct Common {
        std::string config;
        std::vector<std::string> sets;
        std::optional<std::uint64_t> seed;
    };
    Common common;
    for (const auto* name : {"simulate", "train", "evaluate", "control"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", common.config, "JSON run configuration")->required();
        sub->add_option("--set", common.sets, "override a config value, key.path=value (repeatable)");
        sub->add_option("--seed", common.seed, "override the config's seed");
    }
    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << "mmsqc: " << e.what() << "\n";
        return exit_config;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        apply_thread_limit();
        Json doc = read_config_file(common.config);
        for (const auto& s : common.sets) apply_override(doc, s);
        if (common.seed) doc["seed"] = *common.seed;
        if (command == "simulate") {
            cmd_simulate(parse_simulate(doc), doc, out);
        } else if (command == "train") {
            cmd_train(parse_train(doc), doc, out);
        } else if (command == "evaluate") {
            cmd_evaluate(parse_evaluate(doc), doc, out);
        } else {
            cmd_control(parse_control(doc), doc, out);
        }
    } catch (const std::exception& e) {
        err << "mmsqc " << command << ": " << e.what() << "\n";
        return exit_code_for(e);
    }
    return exit_ok;
}

} // namespace mmsqc::app
