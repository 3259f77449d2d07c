#include "mmsqc/app/commands.hpp"
#include "mmsqc/errors.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace mmsqc;
using namespace mmsqc::app;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("mmsqc_cli_" + name + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

fs::path write_json(const fs::path& p, const Json& j)
{
    std::ofstream(p) << j.dump();
    return p;
}

struct Result {
    int code;
    std::string out, err;
};

Result cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

Json tiny_sim(const fs::path& out, std::size_t trials = 1)
{
    return {{"output", out.string()}, {"seed", 3}, {"trials", trials}, {"duration", 6}, {"test_fraction", 0.5}};
}

Json tiny_train(const fs::path& data, const fs::path& out)
{
    return {{"data", data.string()},
            {"output", out.string()},
            {"seed", 2},
            {"model", {{"latent_dim", 4}, {"hidden", 8}}},
            {"epochs", 3},
            {"batch_size", 16}};
}

} // namespace

TEST_CASE("apply_override")
{
    Json d = {{"a", {{"b", 1}}}};
    apply_override(d, "a.b=2.5");
    CHECK(d["a"]["b"] == 2.5);
    apply_override(d, "a.c.d=[1,2]");
    CHECK(d["a"]["c"]["d"] == Json::array({1, 2}));
    apply_override(d, "name=plain text");
    CHECK(d["name"] == "plain text");
    apply_override(d, "flag=true");
    CHECK(d["flag"] == true);
    CHECK_THROWS_AS(apply_override(d, "novalue"), ConfigError);
    CHECK_THROWS_AS(apply_override(d, "=3"), ConfigError);
    CHECK_THROWS_AS(apply_override(d, "a..b=3"), ConfigError);
    CHECK_THROWS_AS(apply_override(d, "flag.x=3"), ConfigError);
}

TEST_CASE("config parsing is strict")
{
    CHECK_NOTHROW(parse_simulate(Json::object()));
    CHECK_THROWS_AS(parse_simulate({{"trails", 3}}), ConfigError);
    CHECK_THROWS_AS(parse_simulate({{"plant", {{"dt", 1e-3}, {"nosie", 0.1}}}}), ConfigError);
    CHECK_THROWS_AS(parse_simulate({{"trials", "many"}}), ConfigError);
    CHECK_THROWS_AS(parse_simulate({{"nominal", {{"gamma", {300, 300}}}}}), ConfigError);
    CHECK_THROWS_AS(parse_simulate({{"plant", {{"dt", -1.0}}}}), ConfigError);
    CHECK_THROWS_AS(parse_train({{"optimizer", {{"kind", "rmsprop"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_train({{"model", {{"activation", "tanh"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_train({{"loss", {{"rho", {1, -1, 1}}}}}), ConfigError);
    CHECK_THROWS_AS(parse_evaluate(Json::object()), ConfigError); // no checkpoints
    CHECK_THROWS_AS(parse_evaluate({{"checkpoints", {"a"}}, {"dataset", {{"relative_quality", {1}}}}}), ConfigError);
    CHECK_THROWS_AS(parse_control(Json::object()), ConfigError); // no trials

    const auto t = parse_train({{"seed", 9}, {"loss", {{"rho", {10, 10, 10}}}}, {"clip_norm", 1.0}});
    CHECK(t.train.seed == 9);
    CHECK(t.dataset.seed == 9);
    REQUIRE(t.train.weights);
    CHECK(t.train.weights->theta[2] == 0.01);
    CHECK(t.train.clip_norm == 1.0);
    CHECK(t.dataset.relative_quality == std::vector<std::size_t>{1});

    const Json ctl = {{"controller", {{"actuators", {"dv3"}}, {"bounds", {{-0.1, 0.1}}}}},
                      {"trials",
                       {{{"id", "a"},
                         {"disturbances",
                          {{{"channel", "gamma1"}, {"time", 5}, {"value", 10}},
                           {{"channel", "gamma1"}, {"time", 9}, {"value", 0}, {"ramp", true}}}}}}}};
    const auto c = parse_control(ctl);
    REQUIRE(c.trials.size() == 1);
    CHECK(c.trials[0].schedule.offset(sim::Channel::gamma1, 7.0) == doctest::Approx(5.0));
    CHECK(c.loop.actuators == std::vector<sim::Channel>{sim::Channel::dv3});
    CHECK(c.loop.trial.duration == 300.0);
    auto dup = ctl;
    dup["trials"].push_back(dup["trials"][0]);
    CHECK_THROWS_AS(parse_control(dup), ConfigError);
    auto badch = ctl;
    badch["controller"]["actuators"] = {"dv9"};
    CHECK_THROWS_AS(parse_control(badch), ConfigError);
    auto order = ctl;
    order["trials"][0]["disturbances"][1]["time"] = 2;
    CHECK_THROWS_AS(parse_control(order), ConfigError);
}

TEST_CASE("config hash is key-order independent and content sensitive")
{
    const Json a = Json::parse(R"({"x": 1, "y": {"b": 2, "a": 3}})");
    const Json b = Json::parse(R"({"y": {"a": 3, "b": 2}, "x": 1})");
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 64);
    CHECK(config_hash(a) != config_hash(Json::parse(R"({"x": 2, "y": {"b": 2, "a": 3}})")));
    CHECK(config_hash(Json::object()) == "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a");
}

TEST_CASE("exit codes")
{
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(LoadError("x")) == 2);
    CHECK(exit_code_for(SimulationError("x")) == 3);
    CHECK(exit_code_for(DivergenceError("x")) == 4);
    CHECK(exit_code_for(SolverError("x")) == 5);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);

    TempDir tmp("exit");
    CHECK(cli({}).code == 2);
    CHECK(cli({"fly", "--config", "x"}).code == 2);
    CHECK(cli({"simulate"}).code == 2);
    CHECK(cli({"simulate", "--config", (tmp.path / "absent.json").string()}).code == 2);
    std::ofstream(tmp.path / "broken.json") << "{ not json";
    CHECK(cli({"simulate", "--config", (tmp.path / "broken.json").string()}).code == 2);
    const auto unknown = write_json(tmp.path / "u.json", {{"bogus", 1}});
    const auto r = cli({"simulate", "--config", unknown.string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("bogus") != std::string::npos);

    const auto ev = write_json(tmp.path / "ev.json", {{"checkpoints", {(tmp.path / "none.json").string()}},
                                                      {"data", tmp.path.string()},
                                                      {"output", (tmp.path / "ev").string()}});
    CHECK(cli({"evaluate", "--config", ev.string()}).code == 2);
    const auto ctl = write_json(tmp.path / "ctl.json", {{"checkpoint", (tmp.path / "none.json").string()},
                                                        {"output", (tmp.path / "ctl").string()},
                                                        {"trials", {{{"id", "a"}}}}});
    CHECK(cli({"control", "--config", ctl.string()}).code == 2);

    ::setenv("MMSQC_THREADS", "zero", 1);
    CHECK(cli({"simulate", "--config", unknown.string()}).code == 2);
    ::unsetenv("MMSQC_THREADS");
}

TEST_CASE("simulate: smoke run, manifest and byte-identical rerun")
{
    TempDir tmp("sim");
    const auto cfg = write_json(tmp.path / "sim.json", tiny_sim(tmp.path / "a"));
    REQUIRE(cli({"simulate", "--config", cfg.string()}).code == 0);
    REQUIRE(cli({"simulate", "--config", cfg.string(), "--set", "output=" + (tmp.path / "b").string()}).code == 0);
    CHECK(slurp(tmp.path / "a" / "trial_000.csv") == slurp(tmp.path / "b" / "trial_000.csv"));
    CHECK(slurp(tmp.path / "a" / "index.json") == slurp(tmp.path / "b" / "index.json"));

    const auto manifest = Json::parse(slurp(tmp.path / "a" / "manifest.json"));
    const auto used = Json::parse(slurp(tmp.path / "a" / "config.json"));
    CHECK(manifest["command"] == "simulate");
    CHECK(manifest["seed"] == 3);
    CHECK(manifest["config_sha256"] == config_hash(used));
    CHECK(used["output"] == (tmp.path / "a").string());

    REQUIRE(cli({"simulate", "--config", cfg.string(), "--seed", "4", "--set", "output=" + (tmp.path / "c").string()})
                .code == 0);
    CHECK(Json::parse(slurp(tmp.path / "c" / "manifest.json"))["seed"] == 4);
    CHECK(slurp(tmp.path / "a" / "trial_000.csv") != slurp(tmp.path / "c" / "trial_000.csv"));
}

TEST_CASE("train: determinism, resume continues the epoch count, divergence exit")
{
    TempDir tmp("train");
    REQUIRE(cli({"simulate", "--config", write_json(tmp.path / "s.json", tiny_sim(tmp.path / "d", 2)).string()}).code ==
            0);
    const auto cfg = write_json(tmp.path / "t.json", tiny_train(tmp.path / "d", tmp.path / "a"));
    const auto ra = cli({"train", "--config", cfg.string()});
    REQUIRE(ra.code == 0);
    CHECK(ra.out.find("val_pred") != std::string::npos);
    REQUIRE(cli({"train", "--config", cfg.string(), "--set", "output=" + (tmp.path / "b").string()}).code == 0);
    CHECK(slurp(tmp.path / "a" / "checkpoint.json") == slurp(tmp.path / "b" / "checkpoint.json"));
    CHECK(slurp(tmp.path / "a" / "report.json") == slurp(tmp.path / "b" / "report.json"));

    const auto rc = cli({"train", "--config", cfg.string(), "--set", "output=" + (tmp.path / "c").string(), "--set",
                         "resume=" + (tmp.path / "a" / "checkpoint.json").string(), "--set", "epochs=2"});
    REQUIRE(rc.code == 0);
    const auto hist = slurp(tmp.path / "c" / "history.csv");
    CHECK(hist.find("\n4,") != std::string::npos);
    CHECK(hist.find("\n1,") == std::string::npos);
    CHECK(Json::parse(slurp(tmp.path / "c" / "checkpoint.json"))["metadata"]["epochs_completed"] == 5);

    const auto rd = cli({"train", "--config", cfg.string(), "--set", "output=" + (tmp.path / "e").string(), "--set",
                         "optimizer.kind=sgd", "--set", "optimizer.learning_rate=1e200"});
    CHECK(rd.code == 4);
}

TEST_CASE("evaluate: mean and std over repetitions")
{
    TempDir tmp("eval");
    REQUIRE(cli({"simulate", "--config", write_json(tmp.path / "s.json", tiny_sim(tmp.path / "d", 2)).string()}).code ==
            0);
    REQUIRE(cli({"train", "--config",
                 write_json(tmp.path / "t.json", tiny_train(tmp.path / "d", tmp.path / "m")).string()})
                .code == 0);
    const auto cp = (tmp.path / "m" / "checkpoint.json").string();
    const Json ev = {{"data", (tmp.path / "d").string()},
                     {"output", (tmp.path / "e").string()},
                     {"checkpoints", {cp, cp}},
                     {"repeats", 3},
                     {"baseline", {{"epochs", 1}}}};
    REQUIRE(cli({"evaluate", "--config", write_json(tmp.path / "e.json", ev).string()}).code == 0);
    const auto csv = slurp(tmp.path / "e" / "metrics.csv");
    CHECK(csv.rfind("stage,index,name,sdk_mean,sdk_std,sdk_runs,ann_mean,ann_std,ann_runs,sdk_over_ann\n", 0) == 0);
    const auto metrics = Json::parse(slurp(tmp.path / "e" / "metrics.json"));
    REQUIRE(metrics.size() == 6);
    for (const auto& m : metrics) {
        CHECK(m["sdk_std"] == 0.0); // same checkpoint twice
        CHECK(m["ann_std"].get<double>() >= 0.0);
    }
    CHECK(csv.find(",2,") != std::string::npos);
    CHECK(csv.find(",3,") != std::string::npos);
    CHECK(csv.find("l2-l1") != std::string::npos);
}

TEST_CASE("control: disabled controller gives identical paired runs")
{
    TempDir tmp("ctl");
    REQUIRE(cli({"simulate", "--config", write_json(tmp.path / "s.json", tiny_sim(tmp.path / "d", 2)).string()}).code ==
            0);
    REQUIRE(cli({"train", "--config",
                 write_json(tmp.path / "t.json", tiny_train(tmp.path / "d", tmp.path / "m")).string()})
                .code == 0);
    Json c = {{"checkpoint", (tmp.path / "m" / "checkpoint.json").string()},
              {"output", (tmp.path / "off").string()},
              {"duration", 30},
              {"controller", {{"enabled", false}}},
              {"trials", {{{"id", "g"}, {"disturbances", {{{"channel", "gamma1"}, {"time", 5}, {"value", 30}}}}}}}};
    REQUIRE(cli({"control", "--config", write_json(tmp.path / "c.json", c).string()}).code == 0);
    CHECK(slurp(tmp.path / "off" / "g_off.csv") == slurp(tmp.path / "off" / "g_on.csv"));

    c["controller"]["enabled"] = true;
    c["output"] = (tmp.path / "on").string();
    const auto r = cli({"control", "--config", write_json(tmp.path / "c2.json", c).string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("solve") != std::string::npos);
    const auto on = slurp(tmp.path / "on" / "g_on.csv");
    CHECK(on.find("solve_ms") == std::string::npos);
    CHECK(slurp(tmp.path / "on" / "cycles.csv").find("solve_ms") != std::string::npos);
    c["output"] = (tmp.path / "on2").string();
    REQUIRE(cli({"control", "--config", write_json(tmp.path / "c3.json", c).string()}).code == 0);
    CHECK(slurp(tmp.path / "on2" / "g_on.csv") == on);
    CHECK(slurp(tmp.path / "on2" / "summary.csv") == slurp(tmp.path / "on" / "summary.csv"));
}
