#include "mmsqc/train/dataset.hpp"

#include "mmsqc/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace mmsqc::train {

using nlohmann::json;

std::vector<sdk::StageSpec> Trial::specs() const
{
    std::vector<sdk::StageSpec> s;
    for (std::size_t k = 0; k < x.size(); ++k) s.push_back({x[k].cols(), y.at(k).cols()});
    return s;
}

void Trial::validate() const
{
    if (x.size() != y.size() || x.empty()) {
        throw ShapeError("trial " + id + ": stage counts of X and Y differ or are zero");
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (x[k].rows() != t.size() || y[k].rows() != t.size()) {
            throw ShapeError("trial " + id + ": stage " + std::to_string(k + 1) + " series length differs from time axis");
        }
        if (!x[k].all_finite() || !y[k].all_finite()) {
            throw Error("trial " + id + ": non-finite sample at stage " + std::to_string(k + 1));
        }
    }
}

std::string_view to_string(Split s) noexcept
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(std::string_view s)
{
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(s) + "'");
}

namespace {

void append_number(std::string& out, double v)
{
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

double parse_number(std::string_view s, const std::string& where)
{
    double v = 0.0;
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw Error("cannot parse number '" + std::string(s) + "' in " + where);
    }
    return v;
}

std::vector<std::string_view> split_csv(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') {
        out.back().remove_suffix(1);
    }
    return out;
}

// "stage3_y2" → (2, 'y', 1), zero-based
bool parse_column(std::string_view name, std::size_t& stage, char& kind, std::size_t& index)
{
    if (name.substr(0, 5) != "stage") return false;
    name.remove_prefix(5);
    const auto us = name.find('_');
    if (us == std::string_view::npos || us + 2 >= name.size() + 1) return false;
    std::size_t s = 0, i = 0;
    if (std::from_chars(name.data(), name.data() + us, s).ptr != name.data() + us) return false;
    kind = name[us + 1];
    const auto rest = name.substr(us + 2);
    if (std::from_chars(rest.data(), rest.data() + rest.size(), i).ptr != rest.data() + rest.size()) return false;
    if (s == 0 || i == 0 || (kind != 'x' && kind != 'y')) return false;
    stage = s - 1;
    index = i - 1;
    return true;
}

} // namespace

void write_trial_csv(const Trial& trial, const std::filesystem::path& path)
{
    trial.validate();
    std::string out = "t";
    for (std::size_t k = 0; k < trial.stage_count(); ++k) {
        for (std::size_t i = 0; i < trial.x[k].cols(); ++i) {
            out += ",stage" + std::to_string(k + 1) + "_x" + std::to_string(i + 1);
        }
    }
    for (std::size_t k = 0; k < trial.stage_count(); ++k) {
        for (std::size_t j = 0; j < trial.y[k].cols(); ++j) {
            out += ",stage" + std::to_string(k + 1) + "_y" + std::to_string(j + 1);
        }
    }
    out += '\n';
    for (std::size_t r = 0; r < trial.rows(); ++r) {
        append_number(out, trial.t[r]);
        for (const auto& m : trial.x) {
            for (double v : m.row(r)) {
                out += ',';
                append_number(out, v);
            }
        }
        for (const auto& m : trial.y) {
            for (double v : m.row(r)) {
                out += ',';
                append_number(out, v);
            }
        }
        out += '\n';
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << out;
    if (!f) throw Error("failed writing " + path.string());
}

Trial read_trial_csv(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open trial file " + path.string());
    std::string header;
    if (!std::getline(f, header)) throw Error(path.string() + ": empty file");
    const auto cols = split_csv(header);
    if (cols.empty() || cols[0] != "t") throw Error(path.string() + ": first column must be 't'");

    struct Slot {
        std::size_t stage;
        char kind;
        std::size_t index;
    };
    std::vector<Slot> slots;
    std::vector<std::size_t> px, py;
    for (std::size_t c = 1; c < cols.size(); ++c) {
        Slot s{};
        if (!parse_column(cols[c], s.stage, s.kind, s.index)) {
            throw Error(path.string() + ": unrecognized column '" + std::string(cols[c]) + "'");
        }
        auto& dims = s.kind == 'x' ? px : py;
        if (dims.size() <= s.stage) dims.resize(s.stage + 1, 0);
        dims[s.stage] = std::max(dims[s.stage], s.index + 1);
        slots.push_back(s);
    }
    if (px.size() != py.size() || px.empty()) throw Error(path.string() + ": every stage needs x and y columns");

    Trial trial;
    trial.id = path.stem().string();
    std::vector<std::vector<double>> xd(px.size()), yd(py.size());
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (fields.size() != cols.size()) throw Error(where + ": wrong field count");
        trial.t.push_back(parse_number(fields[0], where));
        for (std::size_t k = 0; k < px.size(); ++k) {
            xd[k].resize(xd[k].size() + px[k]);
            yd[k].resize(yd[k].size() + py[k]);
        }
        for (std::size_t c = 1; c < fields.size(); ++c) {
            const auto& s = slots[c - 1];
            const double v = parse_number(fields[c], where);
            if (s.kind == 'x') {
                xd[s.stage][xd[s.stage].size() - px[s.stage] + s.index] = v;
            } else {
                yd[s.stage][yd[s.stage].size() - py[s.stage] + s.index] = v;
            }
        }
    }
    const auto n = trial.t.size();
    for (std::size_t k = 0; k < px.size(); ++k) {
        if (px[k] == 0 || py[k] == 0) throw Error(path.string() + ": stage " + std::to_string(k + 1) + " lacks columns");
        trial.x.emplace_back(n, px[k], std::move(xd[k]));
        trial.y.emplace_back(n, py[k], std::move(yd[k]));
    }
    trial.validate();
    return trial;
}

void write_index(const DatasetIndex& index, const std::filesystem::path& dir)
{
    json j;
    j["sample_period"] = index.sample_period;
    j["seed"] = index.seed;
    j["x_names"] = index.x_names;
    j["y_names"] = index.y_names;
    json trials = json::array();
    for (const auto& e : index.trials) trials.push_back({{"file", e.file}, {"split", std::string(to_string(e.split))}});
    j["trials"] = trials;
    std::ofstream f(dir / "index.json", std::ios::binary);
    if (!f) throw Error("cannot write " + (dir / "index.json").string());
    f << j.dump(2) << '\n';
}

DatasetIndex read_index(const std::filesystem::path& dir)
{
    const auto path = dir / "index.json";
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open dataset index " + path.string());
    try {
        const auto j = json::parse(f);
        DatasetIndex idx;
        idx.sample_period = j.at("sample_period").get<double>();
        idx.seed = j.value("seed", std::uint64_t{0});
        idx.x_names = j.value("x_names", std::vector<std::vector<std::string>>{});
        idx.y_names = j.value("y_names", std::vector<std::vector<std::string>>{});
        for (const auto& t : j.at("trials")) {
            idx.trials.push_back({t.at("file").get<std::string>(), split_from_string(t.at("split").get<std::string>())});
        }
        return idx;
    } catch (const json::exception& e) {
        throw Error("malformed dataset index " + path.string() + ": " + e.what());
    }
}

const SplitData& Dataset::split(Split s) const
{
    switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
    }
    return train;
}

std::vector<nn::Matrix> to_model_targets(std::span<const nn::Matrix> y, std::span<const std::size_t> relative)
{
    std::vector<nn::Matrix> out(y.begin(), y.end());
    for (std::size_t k = 1; k < out.size(); ++k) {
        for (auto q : relative) {
            for (std::size_t r = 0; r < out[k].rows(); ++r) out[k](r, q) -= y[0](r, q);
        }
    }
    return out;
}

std::vector<nn::Matrix> to_absolute(std::span<const nn::Matrix> y, std::span<const std::size_t> relative)
{
    std::vector<nn::Matrix> out(y.begin(), y.end());
    for (std::size_t k = 1; k < out.size(); ++k) {
        for (auto q : relative) {
            for (std::size_t r = 0; r < out[k].rows(); ++r) out[k](r, q) += y[0](r, q);
        }
    }
    return out;
}

void column_stats(std::span<const nn::Matrix> m, std::vector<nn::Vector>& mean, std::vector<nn::Vector>& stdev)
{
    mean.clear();
    stdev.clear();
    for (const auto& mat : m) {
        nn::Vector mu(mat.cols(), 0.0), sd(mat.cols(), 0.0);
        const double n = static_cast<double>(mat.rows());
        for (std::size_t c = 0; c < mat.cols(); ++c) {
            double s = 0.0;
            for (std::size_t r = 0; r < mat.rows(); ++r) s += mat(r, c);
            mu[c] = mat.rows() ? s / n : 0.0;
            double v = 0.0;
            for (std::size_t r = 0; r < mat.rows(); ++r) v += (mat(r, c) - mu[c]) * (mat(r, c) - mu[c]);
            sd[c] = mat.rows() ? std::sqrt(v / n) : 1.0;
            if (!(sd[c] > 1e-12 * std::max(1.0, std::abs(mu[c])))) sd[c] = 1.0;
        }
        mean.push_back(std::move(mu));
        stdev.push_back(std::move(sd));
    }
}

std::vector<double> moving_average_filter(std::span<const double> series, std::size_t window)
{
    if (window == 0 || window % 2 == 0) throw UsageError("moving-average window must be odd and >= 1");
    if (window > series.size()) throw UsageError("moving-average window exceeds series length");
    const std::size_t half = window / 2;
    const std::size_t n = series.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + half);
        double s = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) s += series[j];
        out[i] = s / static_cast<double>(hi - lo + 1);
    }
    return out;
}

namespace {

Trial prepared(const Trial& in, const DatasetOptions& opt)
{
    Trial t = in;
    if (opt.filter_window > 1) {
        for (auto& m : t.x) {
            std::vector<double> col(m.rows());
            for (std::size_t c = 0; c < m.cols(); ++c) {
                for (std::size_t r = 0; r < m.rows(); ++r) col[r] = m(r, c);
                const auto f = moving_average_filter(col, opt.filter_window);
                for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = f[r];
            }
        }
    }
    return t;
}

void append_rows(SplitData& dst, const Trial& t, std::span<const std::size_t> rows)
{
    if (dst.x.empty()) {
        for (std::size_t k = 0; k < t.stage_count(); ++k) {
            dst.x.emplace_back(0, t.x[k].cols());
            dst.y.emplace_back(0, t.y[k].cols());
        }
    }
    for (std::size_t k = 0; k < t.stage_count(); ++k) {
        auto grow = [&](nn::Matrix& m, const nn::Matrix& src) {
            std::vector<double> data(m.values().begin(), m.values().end());
            for (auto r : rows) data.insert(data.end(), src.row(r).begin(), src.row(r).end());
            m = nn::Matrix(m.rows() + rows.size(), src.cols(), std::move(data));
        };
        grow(dst.x[k], t.x[k]);
        grow(dst.y[k], t.y[k]);
    }
}

SplitData take_rows(const SplitData& src, std::span<const std::size_t> rows)
{
    SplitData out;
    for (std::size_t k = 0; k < src.x.size(); ++k) {
        nn::Matrix x(rows.size(), src.x[k].cols()), y(rows.size(), src.y[k].cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy(src.x[k].row(rows[i]).begin(), src.x[k].row(rows[i]).end(), x.row(i).begin());
            std::copy(src.y[k].row(rows[i]).begin(), src.y[k].row(rows[i]).end(), y.row(i).begin());
        }
        out.x.push_back(std::move(x));
        out.y.push_back(std::move(y));
    }
    return out;
}

} // namespace

Dataset build_dataset(std::span<const Trial> trials, std::span<const Split> splits, const DatasetOptions& options)
{
    if (trials.empty()) throw UsageError("dataset needs at least one trial");
    if (splits.size() != trials.size()) throw UsageError("one split assignment per trial required");
    if (!(options.val_fraction >= 0.0 && options.val_fraction < 1.0)) {
        throw ConfigError("val_fraction must lie in [0, 1)");
    }
    if (options.row_stride == 0) throw ConfigError("row_stride must be >= 1");
    Dataset ds;
    ds.specs = trials[0].specs();
    for (auto q : options.relative_quality) {
        for (const auto& s : ds.specs) {
            if (q >= s.outputs) throw ConfigError("relative_quality index " + std::to_string(q) + " out of range");
        }
    }
    ds.relative_quality = options.relative_quality;

    SplitData pool;
    for (std::size_t i = 0; i < trials.size(); ++i) {
        trials[i].validate();
        const auto sp = trials[i].specs();
        for (std::size_t k = 0; k < sp.size() || k < ds.specs.size(); ++k) {
            if (sp.size() != ds.specs.size() || sp[k].inputs != ds.specs[k].inputs || sp[k].outputs != ds.specs[k].outputs) {
                throw ShapeError("trial " + trials[i].id + " has a different stage layout");
            }
        }
        const auto t = prepared(trials[i], options);
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < t.rows(); r += options.row_stride) rows.push_back(r);
        if (splits[i] == Split::test) {
            append_rows(ds.test, t, rows);
        } else if (splits[i] == Split::val) {
            append_rows(ds.val, t, rows);
        } else {
            append_rows(pool, t, rows);
        }
    }

    if (pool.rows() > 0) {
        std::vector<std::size_t> order(pool.rows());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(options.seed);
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_val = static_cast<std::size_t>(std::llround(options.val_fraction * double(order.size())));
        std::vector<std::size_t> val_rows(order.begin(), order.begin() + n_val);
        std::vector<std::size_t> train_rows(order.begin() + n_val, order.end());
        std::sort(train_rows.begin(), train_rows.end());
        std::sort(val_rows.begin(), val_rows.end());
        auto extra_val = take_rows(pool, val_rows);
        if (ds.val.rows() == 0) {
            ds.val = std::move(extra_val);
        } else if (extra_val.rows() > 0) {
            // merge explicit validation trials with the carved rows
            SplitData merged;
            for (std::size_t k = 0; k < ds.val.x.size(); ++k) {
                auto cat = [](const nn::Matrix& a, const nn::Matrix& b) {
                    std::vector<double> d(a.values().begin(), a.values().end());
                    d.insert(d.end(), b.values().begin(), b.values().end());
                    return nn::Matrix(a.rows() + b.rows(), a.cols(), std::move(d));
                };
                merged.x.push_back(cat(ds.val.x[k], extra_val.x[k]));
                merged.y.push_back(cat(ds.val.y[k], extra_val.y[k]));
            }
            ds.val = std::move(merged);
        }
        ds.train = take_rows(pool, train_rows);
    }
    if (ds.train.rows() == 0) throw UsageError("dataset has no training rows");

    column_stats(ds.train.x, ds.stats.x_mean, ds.stats.x_std);
    const auto targets = to_model_targets(ds.train.y, ds.relative_quality);
    column_stats(targets, ds.stats.y_mean, ds.stats.y_std);
    return ds;
}

Dataset load_dataset(const std::filesystem::path& dir, const DatasetOptions& options)
{
    const auto idx = read_index(dir);
    std::vector<Trial> trials;
    std::vector<Split> splits;
    for (const auto& e : idx.trials) {
        trials.push_back(read_trial_csv(dir / e.file));
        splits.push_back(e.split);
    }
    auto ds = build_dataset(trials, splits, options);
    ds.x_names = idx.x_names;
    ds.y_names = idx.y_names;
    return ds;
}

} // namespace mmsqc::train
