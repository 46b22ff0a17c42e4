#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cytodiff/dataset.hpp"
#include "cytodiff/metrics.hpp"
#include "cytodiff/training.hpp"

namespace cytodiff::experiments {

enum class Regime { real_only, synthetic_only, mixed };
enum class BackendChoice { none, stub, service };

std::string_view to_string(Regime regime);
std::string_view to_string(BackendChoice backend);
Regime parse_regime(std::string_view text);
BackendChoice parse_backend(std::string_view text);

struct GenerationSettings {
    int resolution = 512;
    std::uint64_t seed = 1000;
    int steps = 30;
    double guidance_scale = 7.5;
};

struct ExperimentConfig {
    Regime regime = Regime::real_only;
    std::vector<std::string> classes;
    std::filesystem::path real_root;
    std::optional<std::filesystem::path> synthetic_root;  // generated under output_dir when absent
    std::size_t synthetic_per_class = 0;                  // run_regime
    std::vector<std::size_t> schedule;                    // run_scaling_sweep, strictly increasing
    int folds = 5;
    dataset::FoldScheme fold_scheme = dataset::FoldScheme::rotated_disjoint;
    dataset::SplitFractions fractions;
    std::uint64_t seed = 0;
    BackendChoice backend = BackendChoice::none;
    std::optional<std::string> backend_url;  // CYTODIFF_BACKEND_URL when absent
    GenerationSettings generation;
    std::optional<std::filesystem::path> prompts;      // default library when absent
    std::optional<std::filesystem::path> adapter_dir;  // <class>.lora files
    bool synthetic_eval = false;  // put synthetic images into validation/test as well
    int jobs = 1;
    training::ClassifierSpec classifier;
    training::TrainConfig train;
    std::filesystem::path output_dir;

    /// Throws ConfigError on violated invariants. `sweep` selects the
    /// schedule checks instead of the single-count ones.
    void validate(bool sweep = false) const;
};

std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct ReportRow {
    std::string model;
    std::string split;
    std::string dataset;
    metrics::MetricStat accuracy, macro_f1, auc;

    bool operator==(const ReportRow& o) const;
};

struct ReportTable {
    std::vector<ReportRow> rows;
    bool operator==(const ReportTable&) const = default;
};

struct RunManifest {
    std::string kind;  // "regime" or "sweep"
    std::string config_json;
    std::string source_revision;
    std::string dataset_hash;
    std::string synthetic_digest;  // content hash of the synthetic files used, empty when none
    std::map<std::string, std::string> adapter_hashes;
    std::string prompt_version;
    std::vector<std::uint64_t> fold_seeds;
    std::vector<std::string> split_hashes;
    std::string started_at, finished_at;
    std::vector<std::string> outputs;  // relative to the output directory
    bool incomplete = false;
    std::vector<std::string> failures;
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const std::string& text);

/// Called from the worker thread before a fold starts training; an
/// exception thrown here fails that fold.
struct RunHooks {
    std::function<void(std::size_t per_class, int fold)> on_fold_start;
};

struct RegimeResult {
    ReportTable table;
    RunManifest manifest;
    std::vector<metrics::MetricsReport> validation_folds, test_folds;
    metrics::MetricsReport validation, test;  // fold aggregates
};

/// Trains one classifier per fold under the configured regime and
/// aggregates validation and test metrics. Writes fold reports, epoch logs,
/// metrics.csv, table.txt and run_manifest.json into output_dir. A failed
/// fold raises IncompleteRunError after the finished folds were written.
RegimeResult run_regime(const ExperimentConfig& config, const RunHooks& hooks = {});

struct SweepPoint {
    std::size_t per_class = 0;
    metrics::MetricsReport test;  // fold aggregate
    std::vector<metrics::MetricsReport> folds;
};

struct SweepResult {
    std::vector<SweepPoint> points;
    ReportTable table;
    RunManifest manifest;
    std::filesystem::path plot;
};

/// One regime run per schedule point over fixed fold assignments and
/// training seeds. Writes sweep.csv, sweep.svg, metrics.csv and the run
/// manifest. Throws DataError before training when the synthetic corpus
/// cannot cover the largest point.
SweepResult run_scaling_sweep(const ExperimentConfig& config, const RunHooks& hooks = {});

/// The manifest one fold trains on: real records under `split`, synthetic
/// records appended per the regime. In synthetic_only the real train records
/// become unassigned.
dataset::DatasetManifest regime_manifest(const ExperimentConfig& config, const dataset::DatasetManifest& real,
                                         const dataset::DatasetManifest* synthetic,
                                         const dataset::SplitAssignment& split, std::size_t per_class);

enum class Format { csv, text };

/// CSV columns Model,Split,Dataset,Accuracy,F1_macro,AUC followed by their
/// standard deviations. Returns the written paths. Throws DataError for an
/// empty table and for an unwritable directory.
std::vector<std::filesystem::path> emit_report(const ReportTable& table, const std::set<Format>& formats,
                                               const std::filesystem::path& dir, const std::string& stem = "metrics");

std::string table_csv(const ReportTable& table);
ReportTable parse_table_csv(const std::string& text);
std::string table_text(const ReportTable& table);

/// Static SVG line plot of mean test accuracy with +/- one std error bars.
std::string sweep_svg(const std::vector<SweepPoint>& points);

/// Re-executes a run from its manifest into `output_dir`. Throws DataError
/// when the real dataset no longer hashes to the recorded value.
void rerun(const std::filesystem::path& manifest_path, const std::filesystem::path& output_dir);

/// Hash of the source tree the binary was built from, or "unknown".
std::string source_revision();

}  // namespace cytodiff::experiments
