#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bmcl/datasets.hpp"
#include "bmcl/methods.hpp"
#include "bmcl/metrics.hpp"
#include "bmcl/trainer.hpp"

namespace bmcl {

// --- configuration ------------------------------------------------------------

struct DatasetConfig {
  enum class Source { Spurious, Imbalanced, Csv };
  Source source = Source::Spurious;
  SpuriousConfig spurious;
  ImbalanceConfig imbalanced;
  SplitFractions fractions;
  std::uint64_t split_seed = 0;
  /// Generator and split seeds are offset by the run seed, so every seed sees
  /// a fresh draw of the data.
  bool vary_with_seed = false;

  std::filesystem::path csv_dir;  // train.csv, val.csv, test.csv
  std::optional<int> num_labels;
  std::optional<int> num_attributes;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<MethodSpec> methods;
  TrainConfig train;  // method, seed and input/output sizes are filled per run
  std::vector<std::uint64_t> seeds;
  std::vector<double> rho_grid;
  std::vector<double> lambda_grid;
  std::filesystem::path output_dir = "results";
};

/// Parses the JSON config text. Unknown keys, wrong types and invalid values
/// raise ConfigError. Relative paths resolve against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Train/val/test data for one run seed.
DataSplits materialize(const DatasetConfig& config, std::uint64_t run_seed);

// --- result rows --------------------------------------------------------------

/// One line of results.csv. Metrics are test-set values. Baseline rows carry
/// rho = lambda = 0 (no pretraining stage, no CL term).
struct ReportRow {
  std::string method;
  std::uint64_t seed = 0;
  double rho = 0.0;
  double lambda = 0.0;
  GroupMetrics metrics;
  std::optional<RelativeMetrics> relative;  // absent when the same-seed ERM run failed
  std::size_t selected_epoch = 0;
  std::string status = "ok";  // "ok" or "failed"
  std::string error;

  bool ok() const { return status == "ok"; }
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

std::vector<std::string> results_header(int num_groups);
/// One RFC-4180 record including the trailing CRLF.
std::string format_row(const ReportRow& row, int num_groups);
/// Parses results.csv text. Throws ParseError with the 1-based line number.
std::vector<ReportRow> parse_results(const std::string& text);
std::vector<ReportRow> load_results(const std::filesystem::path& path);

/// RFC-4180 helpers.
std::string csv_escape(const std::string& field);
std::vector<std::vector<std::string>> csv_parse(const std::string& text);

// --- commands -----------------------------------------------------------------

struct CommandOptions {
  std::optional<std::filesystem::path> out_dir;  // overrides config.output_dir
  std::size_t workers = 1;
  std::uint64_t seed_offset = 0;
};

struct RunSummary {
  std::filesystem::path results_csv;
  std::size_t rows = 0;
  std::size_t failed = 0;
  bool all_failed() const { return rows > 0 && failed == rows; }
};

/// Writes train.csv, val.csv, test.csv and manifest.json. With vary_with_seed
/// each seed gets its own seed_<s>/ subdirectory.
std::vector<std::filesystem::path> cmd_generate(const ExperimentConfig& config, const CommandOptions& options);

/// Every (seed, method) run, ERM reference first per seed. Writes results.csv,
/// runs/<name>.json (history and partition), runs/<name>.ckpt (selected
/// model) and timings.csv.
RunSummary cmd_run(const ExperimentConfig& config, const CommandOptions& options);

/// rho x lambda grid for every two-stage method in the config, plus the ERM
/// reference per seed. Writes results.csv and ablation_<method>.csv.
RunSummary cmd_ablate(const ExperimentConfig& config, const CommandOptions& options);

struct MethodSummary {
  std::string label;  // method name, with the grid point when several exist
  std::string method;
  double rho = 0.0;
  double lambda = 0.0;
  std::size_t seeds = 0;
  std::map<std::string, MeanStd> fields;
};

/// Aggregates results.csv in `results_dir` into summary.json, table.txt and
/// scatter.csv. LDE/IW are paired per seed with the same-seed ERM row.
std::vector<MethodSummary> cmd_report(const std::filesystem::path& results_dir,
                                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Table text as written to table.txt.
std::string render_table(const std::vector<MethodSummary>& summaries);

}  // namespace bmcl
