#include "mmsqc/app/config.hpp"

#include "mmsqc/errors.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <set>
#include <sstream>

namespace mmsqc::app {

namespace {

// Strict view of one JSON object: every key read is ticked off and finish()
// rejects whatever is left.
class Reader {
public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError(where() + "must be an object");
    }

    template <class T>
    bool read(const char* key, T& dst)
    {
        const Json* v = find(key);
        if (!v) return false;
        try {
            dst = v->get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where(key) + "has the wrong type");
        }
        return true;
    }

    bool read_path(const char* key, std::filesystem::path& dst)
    {
        std::string s;
        if (!read(key, s)) return false;
        if (s.empty()) throw ConfigError(where(key) + "must not be empty");
        dst = s;
        return true;
    }

    std::optional<Reader> child(const char* key)
    {
        const Json* v = find(key);
        if (!v) return std::nullopt;
        return Reader(*v, path_ + key + ".");
    }

    const Json* find(const char* key)
    {
        const auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }

    std::string where(const char* key = nullptr) const
    {
        return "config " + (path_.empty() && !key ? std::string("root") : path_ + (key ? key : "")) + ": ";
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("config: unknown key " + path_ + k);
        }
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_range(Reader& r, const char* key, sim::Range& dst)
{
    std::vector<double> v;
    if (!r.read(key, v)) return;
    if (v.size() != 2) throw ConfigError(r.where(key) + "needs [lo, hi]");
    dst = {v[0], v[1]};
}

template <std::size_t N>
void read_array(Reader& r, const char* key, std::array<double, N>& dst)
{
    std::vector<double> v;
    if (!r.read(key, v)) return;
    if (v.size() != N) throw ConfigError(r.where(key) + "needs " + std::to_string(N) + " entries");
    std::copy(v.begin(), v.end(), dst.begin());
}

void read_gains(Reader r, sim::PiGains& g)
{
    r.read("kp", g.kp);
    r.read("ki", g.ki);
    r.read("integral_limit", g.integral_limit);
    r.finish();
}

void read_plant(Reader r, sim::PlantConfig& p)
{
    if (auto c = r.child("constants")) {
        auto& k = p.constants;
        c->read("l0", k.l0);
        c->read("gamma0", k.gamma0);
        c->read("area", k.area);
        c->read("modulus", k.modulus);
        c->read("alpha", k.alpha);
        c->read("span_length", k.span_length);
        c->read("inertia", k.inertia);
        c->read("radius", k.radius);
        c->read("friction", k.friction);
        c->read("tau_gamma", k.tau_gamma);
        c->finish();
    }
    r.read("line_speed", p.line_speed);
    r.read("unwind_tension", p.unwind_tension);
    r.read("dt", p.dt);
    r.read("noise", p.noise);
    if (auto g = r.child("speed_gains")) read_gains(*g, p.speed);
    if (auto g = r.child("tension_gains")) read_gains(*g, p.tension);
    r.read("tension_damping", p.tension_damping);
    r.read("torque_limit", p.torque_limit);
    r.finish();
}

void read_setpoints(Reader r, sim::Setpoints& s)
{
    r.read("tension1", s.tension1);
    read_array(r, "speed_dev", s.speed_dev);
    read_array(r, "gamma", s.gamma);
    r.read("rewind_tension", s.rewind_tension);
    read_array(r, "torque_offset", s.torque_offset);
    r.finish();
}

sim::Channel read_channel(Reader& r, const char* key)
{
    std::string name;
    if (!r.read(key, name)) throw ConfigError(r.where(key) + "is required");
    try {
        return sim::channel_from_string(name);
    } catch (const Error&) {
        throw ConfigError(r.where(key) + "unknown channel '" + name + "'");
    }
}

sim::DisturbanceProfile read_disturbances(const Json& list, const std::string& path)
{
    if (!list.is_array()) throw ConfigError("config " + path + ": must be an array");
    std::map<sim::Channel, std::vector<sim::DisturbanceProfile::Knot>> knots;
    for (std::size_t i = 0; i < list.size(); ++i) {
        Reader e(list[i], path + "[" + std::to_string(i) + "].");
        const auto c = read_channel(e, "channel");
        sim::DisturbanceProfile::Knot k;
        if (!e.read("time", k.time)) throw ConfigError(e.where("time") + "is required");
        if (!e.read("value", k.value)) throw ConfigError(e.where("value") + "is required");
        e.read("ramp", k.ramp);
        e.finish();
        knots[c].push_back(k);
    }
    sim::DisturbanceProfile p;
    for (auto& [c, ks] : knots) p.set(c, std::move(ks));
    return p;
}

void read_dataset(Reader r, train::DatasetOptions& o, bool allow_relative)
{
    r.read("val_fraction", o.val_fraction);
    if (allow_relative) r.read("relative_quality", o.relative_quality);
    r.read("filter_window", o.filter_window);
    r.read("row_stride", o.row_stride);
    r.finish();
    if (!(o.val_fraction >= 0.0 && o.val_fraction < 1.0)) throw ConfigError("config dataset.val_fraction must lie in [0, 1)");
    if (o.filter_window == 0 || o.row_stride == 0) throw ConfigError("config dataset: window and stride must be >= 1");
}

void read_optimizer(Reader r, nn::OptimizerConfig& o)
{
    std::string kind;
    if (r.read("kind", kind)) {
        try {
            o.kind = nn::optimizer_kind_from_string(kind);
        } catch (const Error&) {
            throw ConfigError(r.where("kind") + "unknown optimizer '" + kind + "'");
        }
    }
    r.read("learning_rate", o.learning_rate);
    r.read("momentum", o.momentum);
    r.read("beta1", o.beta1);
    r.read("beta2", o.beta2);
    r.read("epsilon", o.epsilon);
    r.finish();
}

void read_loss(Reader r, std::optional<train::LossWeights>& dst)
{
    std::vector<double> rho, theta, omega;
    r.read("rho", rho);
    r.read("theta", theta);
    r.read("omega", omega);
    r.finish();
    const std::size_t n = std::max({rho.size(), theta.size(), omega.size()});
    if (n == 0) return;
    auto w = train::LossWeights::defaults(n);
    if (!rho.empty()) w.rho = rho;
    if (!theta.empty()) w.theta = theta;
    if (!omega.empty()) w.omega = omega;
    w.validate(n);
    dst = w;
}

// Fields shared by train and the evaluate baseline.
void read_fit(Reader& r, train::TrainConfig& t)
{
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("patience", t.patience);
    r.read("decay_patience", t.decay_patience);
    r.read("lr_decay", t.lr_decay);
    r.read("clip_norm", t.clip_norm);
    if (auto o = r.child("optimizer")) read_optimizer(*o, t.optimizer);
}

void read_solver(Reader r, control::SolverConfig& s)
{
    r.read("max_iterations", s.max_iterations);
    r.read("tolerance", s.tolerance);
    r.read("armijo", s.armijo);
    r.read("max_backtracks", s.max_backtracks);
    r.read("mc_samples", s.mc_samples);
    r.read("mc_seed", s.mc_seed);
    r.finish();
}

void read_controller(Reader r, control::ClosedLoopConfig& c)
{
    r.read("enabled", c.enabled);
    r.read("cadence", c.cadence);
    r.read("average_window", c.average_window);
    r.read("stage", c.stage);
    if (const Json* a = r.find("actuators")) {
        if (!a->is_array()) throw ConfigError(r.where("actuators") + "must be an array of channel names");
        c.actuators.clear();
        for (const auto& e : *a) {
            if (!e.is_string()) throw ConfigError(r.where("actuators") + "must be an array of channel names");
            try {
                c.actuators.push_back(sim::channel_from_string(e.get<std::string>()));
            } catch (const Error&) {
                throw ConfigError(r.where("actuators") + "unknown channel '" + e.get<std::string>() + "'");
            }
        }
    }
    r.read("quality_weights", c.quality_weights);
    r.read("r_weight", c.r_weight);
    r.read("bound_fraction", c.bound_fraction);
    if (const Json* b = r.find("bounds")) {
        if (!b->is_array()) throw ConfigError(r.where("bounds") + "must be an array of [lo, hi]");
        c.bounds.clear();
        for (const auto& e : *b) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
                throw ConfigError(r.where("bounds") + "must be an array of [lo, hi]");
            }
            c.bounds.push_back({e[0].get<double>(), e[1].get<double>()});
        }
    }
    r.read("reencode_observed", c.reencode_observed);
    r.read("failsafe_budget", c.failsafe_budget);
    if (auto s = r.child("solver")) read_solver(*s, c.solver);
    r.finish();
}

} // namespace

Json read_config_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

void apply_override(Json& doc, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("--set expects key=value, got '" + std::string(assignment) + "'");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    Json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("--set key '" + key + "' has an empty component");
        if (!node->is_object()) throw ConfigError("--set key '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = std::move(value);
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = Json::object();
        start = dot + 1;
    }
}

std::string config_hash(const Json& doc)
{
    const std::string text = doc.dump(); // nlohmann objects keep keys sorted
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

SimulateRun parse_simulate(const Json& doc)
{
    SimulateRun run;
    Reader r(doc, "");
    auto& g = run.generate;
    r.read_path("output", run.output);
    r.read("seed", g.seed);
    r.read("trials", g.n_trials);
    r.read("duration", g.duration);
    r.read("log_period", g.log_period);
    r.read("test_fraction", g.test_fraction);
    if (auto p = r.child("plant")) read_plant(*p, g.plant);
    if (auto s = r.child("nominal")) read_setpoints(*s, g.nominal);
    if (auto q = r.child("ranges")) {
        read_range(*q, "tension1", g.ranges.tension1);
        read_range(*q, "speed_dev", g.ranges.speed_dev);
        read_range(*q, "gamma", g.ranges.gamma);
        read_range(*q, "rewind_tension", g.ranges.rewind_tension);
        read_range(*q, "event_interval", g.ranges.event_interval);
        q->finish();
    }
    r.finish();
    g.validate();
    return run;
}

TrainRun parse_train(const Json& doc)
{
    TrainRun run;
    Reader r(doc, "");
    r.read_path("data", run.data);
    r.read_path("output", run.output);
    std::filesystem::path resume;
    if (r.read_path("resume", resume)) run.resume = resume;
    r.read("seed", run.seed);
    run.dataset.relative_quality = {1};
    if (auto d = r.child("dataset")) read_dataset(*d, run.dataset, true);
    if (auto m = r.child("model")) {
        m->read("latent_dim", run.model.latent_dim);
        m->read("hidden", run.model.hidden);
        std::string act;
        if (m->read("activation", act)) {
            try {
                run.model.hidden_activation = nn::activation_from_string(act);
            } catch (const Error&) {
                throw ConfigError(m->where("activation") + "unknown activation '" + act + "'");
            }
        }
        m->read("initial_log_std", run.model.initial_log_std);
        m->finish();
        if (run.model.latent_dim == 0 || run.model.hidden == 0) throw ConfigError("config model: widths must be >= 1");
    }
    if (auto l = r.child("loss")) read_loss(*l, run.train.weights);
    read_fit(r, run.train);
    r.finish();
    run.dataset.seed = run.seed;
    run.train.seed = run.seed;
    run.train.validate();
    return run;
}

EvaluateRun parse_evaluate(const Json& doc)
{
    EvaluateRun run;
    Reader r(doc, "");
    r.read_path("data", run.data);
    r.read_path("output", run.output);
    std::vector<std::string> cps;
    if (r.read("checkpoints", cps)) {
        for (const auto& c : cps) run.checkpoints.emplace_back(c);
    }
    r.read("seed", run.seed);
    r.read("repeats", run.repeats);
    if (auto d = r.child("dataset")) read_dataset(*d, run.dataset, false);
    if (auto b = r.child("baseline")) {
        read_fit(*b, run.baseline);
        b->finish();
    }
    r.finish();
    if (run.checkpoints.empty()) throw ConfigError("config: checkpoints must list at least one model");
    run.dataset.seed = run.seed;
    run.baseline.validate();
    return run;
}

ControlRun parse_control(const Json& doc)
{
    ControlRun run;
    Reader r(doc, "");
    r.read_path("checkpoint", run.checkpoint);
    r.read_path("output", run.output);
    r.read("seed", run.seed);
    auto& trial = run.loop.trial;
    trial.duration = 300.0;
    r.read("duration", trial.duration);
    r.read("log_period", trial.log_period);
    if (auto p = r.child("plant")) read_plant(*p, trial.plant);
    if (auto s = r.child("nominal")) read_setpoints(*s, trial.base);
    if (auto c = r.child("controller")) read_controller(*c, run.loop);
    if (const Json* list = r.find("trials")) {
        if (!list->is_array()) throw ConfigError("config trials: must be an array");
        for (std::size_t i = 0; i < list->size(); ++i) {
            const std::string path = "trials[" + std::to_string(i) + "].";
            Reader t((*list)[i], path);
            ControlTrial ct;
            if (!t.read("id", ct.id) || ct.id.empty()) throw ConfigError(t.where("id") + "is required");
            if (ct.id.find_first_of("/\\") != std::string::npos) throw ConfigError(t.where("id") + "must be a plain name");
            ct.seed = sim::mix_seed(run.seed, i);
            t.read("seed", ct.seed);
            if (const Json* d = t.find("disturbances")) ct.schedule = read_disturbances(*d, path + "disturbances");
            t.finish();
            for (const auto& other : run.trials) {
                if (other.id == ct.id) throw ConfigError("config trials: duplicate id '" + ct.id + "'");
            }
            run.trials.push_back(std::move(ct));
        }
    }
    r.finish();
    if (run.trials.empty()) throw ConfigError("config: trials must hold at least one entry");
    if (!(trial.duration > 0.0) || !(trial.log_period > 0.0)) throw ConfigError("config: duration and log_period must be > 0");
    run.loop.validate();
    return run;
}

} // namespace mmsqc::app
