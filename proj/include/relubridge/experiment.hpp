#pragma once

// Config-driven experiment runs and their CSV/SVG reports.
//
// A config is a flat "key = value" text file ('#' starts a comment). Every
// random draw is derived from the single `seed` key, so a config fully
// determines its outputs regardless of thread count.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "relubridge/data.hpp"
#include "relubridge/pathwalk.hpp"
#include "relubridge/train.hpp"

namespace relubridge {

enum class ExperimentKind { NodeCount, GapDeviation, Deflection, BridgeSim, TrainSweep, MarginFluctuation };

std::string_view to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(std::string_view text);

struct DatasetRef {
    std::string source;  // gaussian | idx | cifar10 | cache
    std::filesystem::path images;
    std::filesystem::path labels;
    std::filesystem::path path;
    std::size_t limit = 0;    // keep the first `limit` samples; 0 = all
    std::size_t holdout = 0;  // last `holdout` samples are excluded from training
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::NodeCount;
    std::string name;
    std::vector<Architecture> architectures;  // one per sweep point
    std::vector<double> xs;                   // summary x of each sweep point
    DatasetRef dataset;
    std::size_t nets = 1;   // independent initializations per sweep point
    std::size_t pairs = 1;  // pairs per network
    PairMode pair_mode = PairMode::Any;
    bool pairs_from_holdout = false;
    OutputScaling scaling = OutputScaling::PerPair;
    std::size_t max_nodes = 1'000'000;
    std::uint64_t seed = 0;
    TrainConfig train;
    std::size_t bridge_steps = 100;
    std::size_t bridge_trials = 100'000;
    double bridge_sigma = 1.0;

    // Raw key/value entries after overrides; hashed into the report metadata.
    std::map<std::string, std::string> entries;

    void set_seed(std::uint64_t value);
};

// Relative dataset paths are resolved against `base_dir`.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// FNV-1a 64 of the sorted "key=value" lines, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct ReportRow {
    std::string pair_id;  // "<point>:<net>:<pair>"
    int component = -1;   // -1 for rows that do not refer to one output
    std::optional<std::size_t> K;
    std::optional<double> sigma_hat;
    std::optional<double> gap_dev_mid;
    std::optional<double> deflection_mid;
    std::optional<double> pm;
    std::optional<double> pf;
    std::uint64_t seed = 0;  // initialization seed of the network
    double x = 0.0;          // summary x; not written to report.csv
};

struct SummaryPoint {
    std::string series;
    double x = 0.0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 when n = 1
    std::size_t n = 0;
};

struct ExperimentReport {
    ExperimentKind kind = ExperimentKind::NodeCount;
    std::vector<ReportRow> rows;
    std::vector<SummaryPoint> summary;
    std::vector<std::pair<std::string, std::string>> metadata;
    std::vector<TrainStep> train_log;  // empty unless the run trained
};

struct RunOptions {
    std::size_t threads = 1;
    // Analyze this network instead of fresh initializations (one net, no training).
    std::optional<LayerGraph> net;
    std::function<void(const std::string&)> progress;
};

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// Summary series of a set of rows. Non-bridge kinds aggregate every metric
// per x: "<metric>" holds mean/std/n of the row values and, for deviation
// metrics, "<metric>_rms" holds their root mean square in the mean column.
// K is read from component 0 rows (or component -1 rows when count-only).
std::vector<SummaryPoint> summarize(ExperimentKind kind, const std::vector<ReportRow>& rows);

// Writes report.csv, summary.csv, metadata.txt, one <series>.svg per
// summary series and train_log.csv when present. Creates `dir`.
void emit_report(const ExperimentReport& report, const std::filesystem::path& dir);

std::vector<SummaryPoint> read_summary_csv(const std::filesystem::path& path);
void write_series_svgs(const std::vector<SummaryPoint>& summary, const std::filesystem::path& dir);

// Initialization used for sweep point `point`, network `net` of a config.
std::uint64_t init_seed(const ExperimentConfig& cfg, std::size_t point, std::size_t net);

// Dataset named by the config, with `limit` applied.
Dataset load_dataset(const DatasetRef& ref);

struct TrainRun {
    TrainResult result;
    Dataset train_set;  // the samples trained on (holdout removed)
};

// Trains the config's first architecture (initialized as network 0 of
// sweep point 0) or `start`, on the config's dataset.
TrainRun train_from_config(const ExperimentConfig& cfg, const std::optional<LayerGraph>& start = std::nullopt);

}  // namespace relubridge
