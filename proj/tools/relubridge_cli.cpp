// relubridge: train small ReLU networks and analyze them along input paths.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "relubridge/binary_io.hpp"
#include "relubridge/checkpoint.hpp"
#include "relubridge/experiment.hpp"

namespace fs = std::filesystem;
using namespace relubridge;

namespace {

struct Common {
    std::string config;
    std::string out = ".";
    std::size_t threads = 1;
    std::optional<std::uint64_t> seed;
    std::string net;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config file");
    if (config_required) opt->required();
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
}

ExperimentConfig config_from(const Common& c) {
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.set_seed(*c.seed);
    return cfg;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) fail(ErrorKind::Data, "cannot create output directory " + dir.string());
}

void log(const std::string& msg) { std::cerr << msg << '\n'; }

int cmd_init(const Common& c) {
    const ExperimentConfig cfg = config_from(c);
    require(!cfg.architectures.empty(), ErrorKind::Config, "config has no architecture");
    const LayerGraph net = he_init(cfg.architectures.front(), init_seed(cfg, 0, 0));
    ensure_dir(c.out);
    save_checkpoint(net, fs::path(c.out) / "net.rpln");
    std::cout << fmt::format("{}: {} parameters, {} hidden units -> {}\n", to_string(cfg.architectures.front()),
                             net.parameter_count(), net.hidden_units(), (fs::path(c.out) / "net.rpln").string());
    return 0;
}

int cmd_train(const Common& c) {
    const ExperimentConfig cfg = config_from(c);
    std::optional<LayerGraph> start;
    if (!c.net.empty()) start = load_checkpoint(c.net);
    const fs::path out(c.out);
    ensure_dir(out / "checkpoints");

    std::optional<TrainRun> trained;
    try {
        trained = train_from_config(cfg, start);
    } catch (const DivergenceError& e) {
        save_checkpoint(e.last_good().net, out / "last_good.rpln");
        log(fmt::format("last good checkpoint (step {}) saved to {}", e.last_good().step,
                        (out / "last_good.rpln").string()));
        throw;
    }
    const TrainRun& run = *trained;
    for (const auto& ck : run.result.log.checkpoints)
        save_checkpoint(ck.net, out / "checkpoints" / fmt::format("step_{:08d}.rpln", ck.step));
    save_checkpoint(run.result.net, out / "net.rpln");

    std::string csv = "step,loss,accuracy\n";
    for (const auto& s : run.result.log.steps) csv += fmt::format("{},{:.17g},{:.17g}\n", s.step, s.loss, s.accuracy);
    binary::write_file(out / "train_log.csv", csv);

    std::cout << fmt::format("trained {} steps; loss {:.4f}, train accuracy {:.4f}\n", run.result.log.steps.size(),
                             dataset_loss(run.result.net, run.train_set),
                             dataset_accuracy(run.result.net, run.train_set));
    return 0;
}

void print_summary(const std::vector<SummaryPoint>& summary) {
    for (const auto& p : summary)
        std::cout << fmt::format("{:<20} x={:<10g} mean={:<14.6g} std={:<12.4g} n={}\n", p.series, p.x, p.mean,
                                 p.std, p.n);
}

int cmd_analyze(const Common& c, bool bridge_only) {
    ExperimentConfig cfg = config_from(c);
    if (bridge_only)
        require(cfg.kind == ExperimentKind::BridgeSim, ErrorKind::Config, "bridge-sim needs kind = bridge-sim");
    RunOptions options;
    options.threads = c.threads;
    options.progress = log;
    if (!c.net.empty()) options.net = load_checkpoint(c.net);
    const ExperimentReport report = run_experiment(cfg, options);
    emit_report(report, c.out);
    print_summary(report.summary);
    return 0;
}

int cmd_report(const Common& c) {
    const fs::path dir(c.out);
    const auto summary = read_summary_csv(dir / "summary.csv");
    write_series_svgs(summary, dir);
    print_summary(summary);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exact piecewise-linear analysis of ReLU networks along input paths"};
    app.require_subcommand(1);

    Common init, trainc, analyze, bridge, report;
    add_common(app.add_subcommand("init", "initialize a network and save it as net.rpln"), init);
    auto* train_cmd = app.add_subcommand("train", "train a network; saves net.rpln, checkpoints and train_log.csv");
    add_common(train_cmd, trainc);
    train_cmd->add_option("--net", trainc.net, "start from this checkpoint instead of a fresh init");
    auto* analyze_cmd = app.add_subcommand("analyze", "run an experiment config and write its report");
    add_common(analyze_cmd, analyze);
    analyze_cmd->add_option("--net", analyze.net, "analyze this checkpoint instead of fresh inits");
    add_common(app.add_subcommand("bridge-sim", "simulate random walk bridges"), bridge);
    auto* report_cmd = app.add_subcommand("report", "re-render SVG plots from summary.csv in --out");
    report_cmd->add_option("--out", report.out, "report directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand("init")) return cmd_init(init);
        if (app.got_subcommand("train")) return cmd_train(trainc);
        if (app.got_subcommand("analyze")) return cmd_analyze(analyze, false);
        if (app.got_subcommand("bridge-sim")) return cmd_analyze(bridge, true);
        return cmd_report(report);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}
