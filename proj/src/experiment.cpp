#include "relubridge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "relubridge/random.hpp"
#include "relubridge/stats.hpp"

#ifndef RELUBRIDGE_VERSION
#define RELUBRIDGE_VERSION "dev"
#endif

namespace relubridge {

namespace {

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::NodeCount, "node-count"},
    {ExperimentKind::GapDeviation, "gap-deviation"},
    {ExperimentKind::Deflection, "deflection"},
    {ExperimentKind::BridgeSim, "bridge-sim"},
    {ExperimentKind::TrainSweep, "train-sweep"},
    {ExperimentKind::MarginFluctuation, "margin-fluctuation"},
};

const std::set<std::string, std::less<>> kKnownKeys = {
    "kind",    "name",      "arch",         "sweep",       "dataset",     "images",       "labels",
    "path",    "limit",     "holdout",      "nets",        "pairs",       "pair_mode",    "pair_source",
    "scaling", "max_nodes", "seed",         "lr",          "momentum",    "batch",        "epochs",
    "eval_every", "bridge_steps", "bridge_trials", "bridge_sigma",
};

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    for (;;) {
        const auto pos = s.find(sep);
        out.push_back(trim(s.substr(0, pos)));
        if (pos == std::string_view::npos) return out;
        s.remove_prefix(pos + 1);
    }
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end || text.empty())
        fail(ErrorKind::Config, fmt::format("invalid value '{}' for key '{}'", text, key));
    return value;
}

class Entries {
public:
    explicit Entries(const std::map<std::string, std::string>& map) : map_(map) {}

    bool has(const std::string& key) const { return map_.count(key) != 0; }
    const std::string& required(const std::string& key) const {
        const auto it = map_.find(key);
        if (it == map_.end()) fail(ErrorKind::Config, "missing required key '" + key + "'");
        return it->second;
    }
    std::string text(const std::string& key, std::string fallback) const {
        const auto it = map_.find(key);
        return it == map_.end() ? fallback : it->second;
    }
    template <class T>
    T number(const std::string& key, T fallback) const {
        const auto it = map_.find(key);
        return it == map_.end() ? fallback : parse_number<T>(key, it->second);
    }

private:
    const std::map<std::string, std::string>& map_;
};

bool is_training_kind(ExperimentKind kind) {
    return kind == ExperimentKind::TrainSweep || kind == ExperimentKind::MarginFluctuation;
}

void build_config(ExperimentConfig& cfg, const std::filesystem::path& base_dir) {
    const Entries e(cfg.entries);
    cfg.kind = parse_experiment_kind(e.required("kind"));
    cfg.name = e.text("name", std::string(to_string(cfg.kind)));
    cfg.seed = e.number<std::uint64_t>("seed", 0);
    require(e.has("seed"), ErrorKind::Config, "missing required key 'seed'");

    if (cfg.kind == ExperimentKind::BridgeSim) {
        cfg.bridge_steps = e.number<std::size_t>("bridge_steps", 100);
        cfg.bridge_trials = e.number<std::size_t>("bridge_trials", 100'000);
        cfg.bridge_sigma = e.number<double>("bridge_sigma", 1.0);
        require(cfg.bridge_steps >= 1, ErrorKind::Config, "bridge_steps must be >= 1");
        require(cfg.bridge_trials >= 2, ErrorKind::Config, "bridge_trials must be >= 2");
        require(cfg.bridge_sigma > 0.0 && std::isfinite(cfg.bridge_sigma), ErrorKind::Config,
                "bridge_sigma must be positive");
        return;
    }

    const std::string arch = e.required("arch");
    cfg.architectures.clear();
    cfg.xs.clear();
    if (e.has("sweep")) {
        require(arch.find("{x}") != std::string::npos, ErrorKind::Config, "'sweep' needs an arch containing {x}");
        for (auto token : split(e.required("sweep"), ',')) {
            std::string text = arch;
            for (auto pos = text.find("{x}"); pos != std::string::npos; pos = text.find("{x}"))
                text.replace(pos, 3, token);
            cfg.architectures.push_back(parse_architecture(text));
            cfg.xs.push_back(parse_number<double>("sweep", token));
        }
    } else {
        for (auto alt : split(arch, '|')) {
            cfg.architectures.push_back(parse_architecture(alt));
            cfg.xs.push_back(static_cast<double>(cfg.architectures.back().layers.size()));
        }
    }
    if (is_training_kind(cfg.kind))
        require(cfg.architectures.size() == 1, ErrorKind::Config, "training experiments take a single arch");

    auto& d = cfg.dataset;
    d.source = e.text("dataset", "gaussian");
    const auto resolve = [&](const std::string& key) {
        std::filesystem::path p = e.required(key);
        return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    };
    if (d.source == "idx") {
        d.images = resolve("images");
        d.labels = resolve("labels");
    } else if (d.source == "cifar10" || d.source == "cache") {
        d.path = resolve("path");
    } else {
        require(d.source == "gaussian", ErrorKind::Config, "unknown dataset '" + d.source + "'");
        require(!is_training_kind(cfg.kind), ErrorKind::Config, "training experiments need a labeled dataset");
    }
    d.limit = e.number<std::size_t>("limit", 0);
    d.holdout = e.number<std::size_t>("holdout", 0);

    cfg.nets = e.number<std::size_t>("nets", 1);
    cfg.pairs = e.number<std::size_t>("pairs", 1);
    require(cfg.nets >= 1 && cfg.pairs >= 1, ErrorKind::Config, "nets and pairs must be >= 1");

    const std::string mode = e.text("pair_mode", "any");
    require(mode == "any" || mode == "within-class", ErrorKind::Config, "pair_mode must be any or within-class");
    cfg.pair_mode = mode == "any" ? PairMode::Any : PairMode::WithinClass;
    const std::string source = e.text("pair_source", "train");
    require(source == "train" || source == "holdout", ErrorKind::Config, "pair_source must be train or holdout");
    cfg.pairs_from_holdout = source == "holdout";
    require(!cfg.pairs_from_holdout || d.holdout >= 2, ErrorKind::Config, "pair_source = holdout needs holdout >= 2");

    const std::string scaling = e.text("scaling", "per-pair");
    require(scaling == "per-pair" || scaling == "none", ErrorKind::Config, "scaling must be per-pair or none");
    cfg.scaling = scaling == "none" ? OutputScaling::None : OutputScaling::PerPair;
    cfg.max_nodes = e.number<std::size_t>("max_nodes", 1'000'000);

    cfg.train.learning_rate = e.number<double>("lr", 0.1);
    cfg.train.momentum = e.number<double>("momentum", 0.0);
    cfg.train.batch_size = e.number<std::size_t>("batch", 64);
    cfg.train.epochs = e.number<std::size_t>("epochs", 1);
    cfg.train.eval_every = e.number<std::size_t>("eval_every", 0);
    cfg.train.validate();
}

template <class F>
void parallel_for(std::size_t count, std::size_t threads, F&& fn) {
    threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    // The lowest failing index wins, independent of scheduling.
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::uint64_t pair_seed(const ExperimentConfig& cfg, std::size_t point, std::size_t net) {
    return derive_seed(derive_seed(cfg.seed, point), 2 * net + 1);
}

// Inputs the pairs are drawn from, plus the training set.
struct DataSplit {
    Dataset train;
    Dataset pool;
};

DataSplit split_dataset(const ExperimentConfig& cfg) {
    Dataset all = load_dataset(cfg.dataset);
    validate(all);
    const std::size_t h = cfg.dataset.holdout;
    if (h == 0) return {all, all};
    require(h < all.size(), ErrorKind::Config, "holdout must be smaller than the dataset");
    DataSplit split;
    const auto n_train = static_cast<Eigen::Index>(all.size() - h);
    split.train = take(all, all.size() - h);
    split.pool.inputs = all.inputs.bottomRows(static_cast<Eigen::Index>(h));
    split.pool.labels.assign(all.labels.begin() + n_train, all.labels.end());
    split.pool.classes = all.classes;
    split.pool.provenance = all.provenance + "[holdout]";
    if (!cfg.pairs_from_holdout) split.pool = split.train;
    return split;
}

struct PairInput {
    Vector x0;
    Vector x1;
    std::optional<std::uint32_t> y0;
    std::optional<std::uint32_t> y1;
};

std::vector<PairInput> draw_pairs(const ExperimentConfig& cfg, const std::optional<DataSplit>& data,
                                  std::size_t dim, std::uint64_t seed) {
    std::vector<PairInput> out;
    if (!data) {
        Rng rng(seed);
        for (std::size_t p = 0; p < cfg.pairs; ++p) {
            PairInput in{Vector(static_cast<Eigen::Index>(dim)), Vector(static_cast<Eigen::Index>(dim)), {}, {}};
            for (auto& v : in.x0) v = rng.normal();
            for (auto& v : in.x1) v = rng.normal();
            out.push_back(std::move(in));
        }
        return out;
    }
    for (auto& s : sample_pairs(data->pool, cfg.pairs, seed, cfg.pair_mode))
        out.push_back({std::move(s.xi), std::move(s.xj), data->pool.labels[s.i], data->pool.labels[s.j]});
    return out;
}

void add_margins(const LayerGraph& net, const PairInput& in, const LinearPath& path, ReportRow& row) {
    if (!in.y0 || !in.y1) return;
    const OutputVector u0 = normalize_output(forward(net, in.x0));
    const OutputVector u1 = normalize_output(forward(net, in.x1));
    const OutputVector um = normalize_output(forward(net, path.at(0.5)));
    row.pm = pair_margin(margin(u0, *in.y0), margin(u1, *in.y1));
    row.pf = pair_fluctuation(u0.values, u1.values, um.values);
}

std::vector<ReportRow> analyze_pair(const ExperimentConfig& cfg, const LayerGraph& net, const PairInput& in,
                                    const ReportRow& base) {
    const LinearPath path = make_path(in.x0, in.x1);
    if (cfg.kind == ExperimentKind::MarginFluctuation) {
        ReportRow row = base;
        add_margins(net, in, path, row);
        return {row};
    }
    WalkOptions options;
    options.scaling = cfg.scaling;
    options.max_nodes = cfg.max_nodes;
    const PathProfile profile = walk_path(net, path, options);
    const std::size_t K = profile.node_count();
    if (cfg.kind == ExperimentKind::NodeCount) {
        ReportRow row = base;
        row.K = K;
        return {row};
    }
    ReportRow pair_row = base;
    add_margins(net, in, path, pair_row);
    std::vector<ReportRow> rows;
    for (std::size_t j = 0; j < profile.components(); ++j) {
        ReportRow row = pair_row;
        row.component = static_cast<int>(j);
        row.K = K;
        if (K >= 1) {
            const std::vector<double> gaps = gradient_gaps(profile, j);
            row.sigma_hat = rms(gaps);
            row.gap_dev_mid = bridge_deviation_theory(K / 2, K, *row.sigma_hat);
            row.deflection_mid = deflection_midpoint(profile, j);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string pair_id(std::size_t point, std::size_t net, std::size_t pair) {
    return fmt::format("{}:{}:{}", point, net, pair);
}

// One evaluated network (a fresh init, a loaded net, or a training checkpoint).
struct EvalNet {
    const LayerGraph* net;
    std::size_t point;
    std::size_t index;
    double x;
    std::uint64_t seed;
    const std::vector<PairInput>* pairs;
};

std::vector<ReportRow> evaluate(const ExperimentConfig& cfg, const std::vector<EvalNet>& nets,
                                std::size_t threads) {
    std::vector<std::size_t> first(nets.size() + 1, 0);
    for (std::size_t i = 0; i < nets.size(); ++i) first[i + 1] = first[i] + nets[i].pairs->size();
    std::vector<std::vector<ReportRow>> results(first.back());
    parallel_for(first.back(), threads, [&](std::size_t task) {
        const auto n = static_cast<std::size_t>(std::upper_bound(first.begin(), first.end(), task) - first.begin()) - 1;
        const EvalNet& e = nets[n];
        const std::size_t p = task - first[n];
        ReportRow base;
        base.pair_id = pair_id(e.point, e.index, p);
        base.seed = e.seed;
        base.x = e.x;
        results[task] = analyze_pair(cfg, *e.net, (*e.pairs)[p], base);
    });
    std::vector<ReportRow> rows;
    for (auto& r : results) std::move(r.begin(), r.end(), std::back_inserter(rows));
    return rows;
}

void run_bridge(const ExperimentConfig& cfg, const RunOptions& options, ExperimentReport& report) {
    const BridgeStats stats = bridge_simulate(gaussian_increments(cfg.bridge_sigma), cfg.bridge_steps, {0.0, 0.0},
                                              cfg.bridge_trials, cfg.seed, options.threads);
    for (std::size_t k = 0; k <= stats.K; ++k) {
        const double sd = std::sqrt(stats.empirical_variance[k]);
        const double se_sd = sd > 0.0 ? stats.variance_se[k] / (2.0 * sd) : 0.0;
        report.summary.push_back({"empirical_sd", static_cast<double>(k), sd, se_sd, stats.trials});
    }
    for (std::size_t k = 0; k <= stats.K; ++k)
        report.summary.push_back({"theory_sd", static_cast<double>(k), stats.deviation_profile[k], 0.0, stats.trials});
    report.metadata.emplace_back("endpoints_pinned", stats.endpoints_pinned ? "true" : "false");
}

void run_fixed(const ExperimentConfig& cfg, const RunOptions& options, ExperimentReport& report) {
    std::optional<DataSplit> data;
    if (cfg.dataset.source != "gaussian") {
        data = split_dataset(cfg);
        report.metadata.emplace_back("dataset", data->pool.provenance);
    }
    const std::size_t points = options.net ? 1 : cfg.architectures.size();
    const std::size_t per_point = options.net ? 1 : cfg.nets;

    std::vector<std::optional<LayerGraph>> nets(points * per_point);
    parallel_for(nets.size(), options.threads, [&](std::size_t i) {
        nets[i] = options.net ? *options.net : he_init(cfg.architectures[i / per_point], init_seed(cfg, i / per_point, i % per_point));
    });
    std::vector<std::vector<PairInput>> pairs(nets.size());
    std::vector<EvalNet> evals;
    for (std::size_t i = 0; i < nets.size(); ++i) {
        const std::size_t point = i / per_point, index = i % per_point;
        const LayerGraph& net = *nets[i];
        if (data)
            require(data->pool.dim() == net.input_dim(), ErrorKind::Shape,
                    "dataset dimension does not match network input");
        pairs[i] = draw_pairs(cfg, data, net.input_dim(), pair_seed(cfg, point, index));
        const double x = options.net ? 0.0 : cfg.xs[point];
        evals.push_back({&net, point, index, x, options.net ? 0 : init_seed(cfg, point, index), &pairs[i]});
    }
    if (options.progress) options.progress(fmt::format("analyzing {} networks x {} pairs", nets.size(), cfg.pairs));
    report.rows = evaluate(cfg, evals, options.threads);
}

void run_training(const ExperimentConfig& cfg, const RunOptions& options, ExperimentReport& report) {
    const DataSplit data = split_dataset(cfg);
    report.metadata.emplace_back("dataset", data.train.provenance);
    const std::size_t count = options.net ? 1 : cfg.nets;

    std::vector<std::vector<Checkpoint>> checkpoints(count);
    std::vector<std::vector<PairInput>> pairs(count);
    for (std::size_t n = 0; n < count; ++n) {
        const LayerGraph& ref = options.net ? *options.net : he_init(cfg.architectures.front(), init_seed(cfg, 0, n));
        require(data.train.dim() == ref.input_dim(), ErrorKind::Shape, "dataset dimension does not match network input");
        if (options.net) {
            checkpoints[n].push_back({0, *options.net});
        } else {
            TrainConfig tc = cfg.train;
            tc.seed = derive_seed(init_seed(cfg, 0, n), 1);
            if (options.progress) options.progress(fmt::format("training network {}", n));
            TrainResult result = train(ref, data.train, tc);
            if (n == 0) report.train_log = result.log.steps;
            report.metadata.emplace_back(fmt::format("train_accuracy_net{}", n),
                                         fmt::format("{:.17g}", dataset_accuracy(result.net, data.train)));
            checkpoints[n] = std::move(result.log.checkpoints);
        }
        pairs[n] = draw_pairs(cfg, data, ref.input_dim(), pair_seed(cfg, 0, n));
    }
    std::vector<EvalNet> evals;
    for (std::size_t n = 0; n < count; ++n)
        for (std::size_t c = 0; c < checkpoints[n].size(); ++c)
            evals.push_back({&checkpoints[n][c].net, c, n, static_cast<double>(checkpoints[n][c].step),
                             options.net ? 0 : init_seed(cfg, 0, n), &pairs[n]});
    if (options.progress) options.progress(fmt::format("analyzing {} checkpoints x {} pairs", evals.size(), cfg.pairs));
    report.rows = evaluate(cfg, evals, options.threads);
}

struct Metric {
    std::string name;
    bool per_component;  // false: read from component <= 0 rows only
    bool with_rms;
    std::function<std::optional<double>(const ReportRow&)> value;
};

std::vector<Metric> metrics_for(ExperimentKind kind) {
    const auto K = [](const ReportRow& r) -> std::optional<double> {
        if (!r.K) return std::nullopt;
        return static_cast<double>(*r.K);
    };
    const Metric pm{"pm", false, false, [](const ReportRow& r) { return r.pm; }};
    const Metric pf{"pf", false, false, [](const ReportRow& r) { return r.pf; }};
    switch (kind) {
        case ExperimentKind::NodeCount:
            return {{"K", false, false, K}};
        case ExperimentKind::MarginFluctuation:
            return {pm, pf,
                    {"pm_exceeds_pf", false, false, [](const ReportRow& r) -> std::optional<double> {
                         if (!r.pm || !r.pf) return std::nullopt;
                         return *r.pm > *r.pf ? 1.0 : 0.0;
                     }}};
        case ExperimentKind::BridgeSim:
            return {};
        default:
            return {{"K", false, false, K},
                    {"sigma_hat", true, false, [](const ReportRow& r) { return r.sigma_hat; }},
                    {"gap_dev_mid", true, true, [](const ReportRow& r) { return r.gap_dev_mid; }},
                    {"deflection_mid", true, true, [](const ReportRow& r) { return r.deflection_mid; }},
                    pm,
                    pf};
    }
}

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

template <class T>
std::string optional_field(const std::optional<T>& v) {
    if (!v) return {};
    if constexpr (std::is_floating_point_v<T>)
        return format_double(*v);
    else
        return std::to_string(*v);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Data, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorKind::Data, "write error in " + path.string());
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

std::string series_svg(const std::string& series, std::vector<std::pair<double, double>> points) {
    constexpr double kWidth = 640, kHeight = 400, kMargin = 50;
    std::sort(points.begin(), points.end());
    double x_lo = points.front().first, x_hi = points.back().first;
    double y_lo = points.front().second, y_hi = y_lo;
    for (const auto& [x, y] : points) {
        y_lo = std::min(y_lo, y);
        y_hi = std::max(y_hi, y);
    }
    if (x_hi == x_lo) x_hi = x_lo + 1.0;
    if (y_hi == y_lo) y_hi = y_lo + 1.0;
    const auto px = [&](double x) { return kMargin + (x - x_lo) / (x_hi - x_lo) * (kWidth - 2 * kMargin); };
    const auto py = [&](double y) { return kHeight - kMargin - (y - y_lo) / (y_hi - y_lo) * (kHeight - 2 * kMargin); };

    std::string coords;
    for (const auto& [x, y] : points) {
        if (!std::isfinite(y)) continue;
        if (!coords.empty()) coords += ' ';
        coords += fmt::format("{:.2f},{:.2f}", px(x), py(y));
    }
    std::string svg = fmt::format(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
        "  <rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
        "  <text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{3}</text>\n"
        "  <line x1=\"{2}\" y1=\"{4}\" x2=\"{5}\" y2=\"{4}\" stroke=\"black\"/>\n"
        "  <line x1=\"{2}\" y1=\"{2}\" x2=\"{2}\" y2=\"{4}\" stroke=\"black\"/>\n",
        kWidth, kHeight, kMargin, xml_escape(series), kHeight - kMargin, kWidth - kMargin);
    svg += fmt::format(
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n"
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>\n"
        "  <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n"
        "  <text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
        kMargin, kHeight - kMargin + 16, fmt::format("{:.6g}", x_lo), kWidth - kMargin, kHeight - kMargin + 16,
        fmt::format("{:.6g}", x_hi), kHeight - kMargin, fmt::format("{:.6g}", y_lo), kMargin,
        fmt::format("{:.6g}", y_hi));
    svg += fmt::format("  <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n", coords);
    svg += "</svg>\n";
    return svg;
}

std::string file_stem(std::string_view series) {
    std::string out;
    for (char ch : series) out += std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' ? ch : '_';
    return out.empty() ? "series" : out;
}

}  // namespace

std::string_view to_string(ExperimentKind kind) {
    for (const auto& [k, name] : kKindNames)
        if (k == kind) return name;
    return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view text) {
    for (const auto& [k, name] : kKindNames)
        if (name == text) return k;
    fail(ErrorKind::Config, "unknown experiment kind '" + std::string(text) + "'");
}

void ExperimentConfig::set_seed(std::uint64_t value) {
    seed = value;
    entries["seed"] = std::to_string(value);
}

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
    ExperimentConfig cfg;
    std::size_t line_no = 0;
    for (auto line : split(text, '\n')) {
        ++line_no;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            fail(ErrorKind::Config, fmt::format("line {}: expected 'key = value'", line_no));
        const std::string key(trim(line.substr(0, eq)));
        const std::string value(trim(line.substr(eq + 1)));
        if (!kKnownKeys.count(key)) fail(ErrorKind::Config, fmt::format("line {}: unknown key '{}'", line_no, key));
        if (!cfg.entries.emplace(key, value).second)
            fail(ErrorKind::Config, fmt::format("line {}: duplicate key '{}'", line_no, key));
    }
    build_config(cfg, base_dir);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Config, "cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str(), path.parent_path());
}

std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [key, value] : cfg.entries)
        for (char ch : key + "=" + value + "\n") {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ull;
        }
    return fmt::format("{:016x}", h);
}

std::uint64_t init_seed(const ExperimentConfig& cfg, std::size_t point, std::size_t net) {
    return derive_seed(derive_seed(cfg.seed, point), 2 * net);
}

Dataset load_dataset(const DatasetRef& ref) {
    Dataset data;
    if (ref.source == "idx")
        data = load_idx(ref.images, ref.labels);
    else if (ref.source == "cifar10")
        data = load_cifar10(ref.path);
    else if (ref.source == "cache")
        data = load_cache(ref.path);
    else
        fail(ErrorKind::Config, "dataset '" + ref.source + "' cannot be loaded from files");
    if (ref.limit > 0 && ref.limit < data.size()) data = take(data, ref.limit);
    return data;
}

TrainRun train_from_config(const ExperimentConfig& cfg, const std::optional<LayerGraph>& start) {
    require(cfg.kind != ExperimentKind::BridgeSim, ErrorKind::Config, "bridge-sim configs have no network");
    require(cfg.dataset.source != "gaussian", ErrorKind::Config, "training needs a labeled dataset");
    DataSplit data = split_dataset(cfg);
    const LayerGraph net = start ? *start : he_init(cfg.architectures.front(), init_seed(cfg, 0, 0));
    require(data.train.dim() == net.input_dim(), ErrorKind::Shape, "dataset dimension does not match network input");
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(init_seed(cfg, 0, 0), 1);
    return {train(net, data.train, tc), std::move(data.train)};
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
    ExperimentReport report;
    report.kind = cfg.kind;
    report.metadata = {{"name", cfg.name},
                       {"kind", std::string(to_string(cfg.kind))},
                       {"config_hash", config_hash(cfg)},
                       {"version", RELUBRIDGE_VERSION},
                       {"seed", std::to_string(cfg.seed)}};
    if (options.net) report.metadata.emplace_back("network", "loaded");
    if (cfg.kind == ExperimentKind::BridgeSim)
        run_bridge(cfg, options, report);
    else if (is_training_kind(cfg.kind))
        run_training(cfg, options, report);
    else
        run_fixed(cfg, options, report);
    if (cfg.kind != ExperimentKind::BridgeSim) report.summary = summarize(cfg.kind, report.rows);
    return report;
}

std::vector<SummaryPoint> summarize(ExperimentKind kind, const std::vector<ReportRow>& rows) {
    std::vector<SummaryPoint> out;
    for (const Metric& metric : metrics_for(kind)) {
        std::map<double, std::vector<double>> by_x;
        for (const auto& row : rows) {
            if (!metric.per_component && row.component > 0) continue;
            if (const auto v = metric.value(row)) by_x[row.x].push_back(*v);
        }
        for (const auto& [x, values] : by_x) {
            const auto n = static_cast<double>(values.size());
            double sum = 0.0, sum_sq = 0.0;
            for (double v : values) {
                sum += v;
                sum_sq += v * v;
            }
            const double mean = sum / n;
            double ss = 0.0;
            for (double v : values) ss += (v - mean) * (v - mean);
            const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
            out.push_back({metric.name, x, mean, sd, values.size()});
            if (metric.with_rms) out.push_back({metric.name + "_rms", x, std::sqrt(sum_sq / n), sd, values.size()});
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const SummaryPoint& a, const SummaryPoint& b) {
        return a.series != b.series ? a.series < b.series : a.x < b.x;
    });
    return out;
}

void write_series_svgs(const std::vector<SummaryPoint>& summary, const std::filesystem::path& dir) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    for (const auto& p : summary) series[p.series].emplace_back(p.x, p.mean);
    for (const auto& [name, points] : series) write_text(dir / (file_stem(name) + ".svg"), series_svg(name, points));
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) fail(ErrorKind::Data, "cannot create output directory " + dir.string());

    std::string csv = "pair_id,component,K,sigma_hat,gap_dev_mid,deflection_mid,pm,pf,seed\n";
    for (const auto& r : report.rows)
        csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.pair_id, r.component, optional_field(r.K),
                           optional_field(r.sigma_hat), optional_field(r.gap_dev_mid),
                           optional_field(r.deflection_mid), optional_field(r.pm), optional_field(r.pf), r.seed);
    write_text(dir / "report.csv", csv);

    std::string summary = "series,x,mean,std,n\n";
    for (const auto& p : report.summary)
        summary += fmt::format("{},{},{},{},{}\n", p.series, format_double(p.x), format_double(p.mean),
                               format_double(p.std), p.n);
    write_text(dir / "summary.csv", summary);

    std::string meta;
    for (const auto& [key, value] : report.metadata) meta += key + "=" + value + "\n";
    write_text(dir / "metadata.txt", meta);

    if (!report.train_log.empty()) {
        std::string log = "step,loss,accuracy\n";
        for (const auto& s : report.train_log)
            log += fmt::format("{},{},{}\n", s.step, format_double(s.loss), format_double(s.accuracy));
        write_text(dir / "train_log.csv", log);
    }
    write_series_svgs(report.summary, dir);
}

std::vector<SummaryPoint> read_summary_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Data, "cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    require(trim(line) == "series,x,mean,std,n", ErrorKind::Data, path.string() + ": unexpected header");
    std::vector<SummaryPoint> out;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto f = split(line, ',');
        require(f.size() == 5, ErrorKind::Data, path.string() + ": malformed row");
        try {
            out.push_back({std::string(f[0]), parse_number<double>("x", f[1]), parse_number<double>("mean", f[2]),
                           parse_number<double>("std", f[3]), parse_number<std::size_t>("n", f[4])});
        } catch (const Error& e) {
            fail(ErrorKind::Data, path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace relubridge
