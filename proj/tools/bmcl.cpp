// bmcl: dataset generation, training sweeps, reports and ablation grids.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "bmcl/error.hpp"
#include "bmcl/experiments.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

int report_run(const bmcl::RunSummary& s) {
  std::cout << "wrote " << s.rows << " rows to " << s.results_csv.string();
  if (s.failed) std::cout << " (" << s.failed << " failed)";
  std::cout << "\n";
  return s.all_failed() ? kRuntimeError : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage bias mitigation with continual-learning regularizers"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::size_t workers = 1;
  std::uint64_t seed_offset = 0;
  std::string results_dir;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--out", out_dir, "output directory (overrides output_dir in the config)");
    cmd->add_option("--seed-offset", seed_offset, "added to every configured seed");
  };
  auto* generate = app.add_subcommand("generate", "write train/val/test CSVs and a manifest");
  add_common(generate);
  auto* run = app.add_subcommand("run", "train every method for every seed");
  add_common(run);
  run->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);
  auto* ablate = app.add_subcommand("ablate", "rho x lambda grid for the two-stage methods");
  add_common(ablate);
  ablate->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "aggregate results.csv into summary.json, table.txt, scatter.csv");
  report->add_option("results_dir", results_dir, "directory holding results.csv");
  report->add_option("--config", config_path, "take the results directory from this config's output_dir");
  report->add_option("--out", out_dir, "where to write the report files (default: the results directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  bmcl::CommandOptions options;
  if (out_dir) options.out_dir = *out_dir;
  options.workers = workers;
  options.seed_offset = seed_offset;

  try {
    if (report->parsed()) {
      std::filesystem::path dir = results_dir;
      if (dir.empty()) {
        if (config_path.empty()) {
          std::cerr << "error: report needs a results directory or --config\n";
          return kConfigError;
        }
        dir = bmcl::load_config(config_path).output_dir;
      }
      const auto summaries = bmcl::cmd_report(dir, options.out_dir);
      std::cout << bmcl::render_table(summaries);
      return kOk;
    }
    const bmcl::ExperimentConfig config = bmcl::load_config(config_path);
    if (generate->parsed()) {
      for (const auto& dir : bmcl::cmd_generate(config, options)) std::cout << "wrote " << dir.string() << "\n";
      return kOk;
    }
    if (run->parsed()) return report_run(bmcl::cmd_run(config, options));
    return report_run(bmcl::cmd_ablate(config, options));
  } catch (const bmcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
