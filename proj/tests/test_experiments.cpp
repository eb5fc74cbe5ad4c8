#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bmcl/error.hpp"
#include "bmcl/experiments.hpp"

using namespace bmcl;
namespace fs = std::filesystem;

namespace {

/// Fresh, empty scratch directory per call.
fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bmcl_test_experiments_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

/// Small, fast experiment: 400 samples, 4-unit MLP, 4 epochs.
std::string tiny_config(const std::string& methods, const std::string& seeds = "[0, 1, 2]",
                        const std::string& extra = "") {
  return R"({
    "dataset": {"generator": "spurious",
                "params": {"n": 400, "noise_dims": 2, "seed": 5},
                "split_seed": 3, "vary_with_seed": true},
    "methods": )" + methods + R"(,
    "train": {"epochs": 4, "lr": 0.05, "batch_size": 32, "rho": 0.5},
    "model": {"hidden": [4]},
    "seeds": )" + seeds + extra + "}";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BMCL_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ReportRow sample_row(const std::string& method, std::uint64_t seed, const std::vector<double>& acc) {
  ReportRow r;
  r.method = method;
  r.seed = seed;
  r.metrics = metrics_from_group_accuracies(acc, std::vector<std::size_t>(acc.size(), 1000));
  r.selected_epoch = 7;
  return r;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("valid config") {
    const ExperimentConfig c = parse_config(tiny_config(R"(["ERM", {"name": "GroupDRO-LwF", "lambda": 0.5}])"), "/base");
    CHECK(c.methods.size() == 2);
    CHECK(c.methods[1].lambda == 0.5);
    CHECK(c.methods[1].cl == ClKind::LwF);
    CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(c.train.epochs == 4);
    CHECK(c.train.architecture.hidden_widths == std::vector<std::size_t>{4});
    CHECK(c.dataset.spurious.n == 400);
    CHECK(c.dataset.spurious.p_corr == SpuriousConfig{}.p_corr);
    CHECK(c.output_dir == fs::path("/base") / "results");
  }
  SUBCASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["ERM"])", "[0]", R"(, "epochs": 3)")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"([{"name": "GroupDRO", "etaa": 0.1}])")), ConfigError);
    const std::string typo = R"({"dataset": {"generator": "spurious", "params": {"pcorr": 0.9}}, "methods": ["ERM"], "seeds": [0]})";
    try {
      parse_config(typo);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("dataset.params.pcorr") != std::string::npos);
    }
  }
  SUBCASE("invalid values") {
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["ERM", "ERM"])")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["Mixup"])")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"([])")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["ERM"])", "[]")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["ERM"])", "[1, 1]")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"(["ERM"])", "[0]", R"(, "grid": {"rho": [1.5]})")), ConfigError);
    CHECK_THROWS_AS(parse_config(tiny_config(R"([{"name": "GroupDRO-LwF", "temperature": 0}])")), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"dataset": {"generator": "spurious", "split": {"train": 0.5, "val": 0.1, "test": 0.1}},
                                     "methods": ["ERM"], "seeds": [0]})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"dataset": {"generator": "spurious", "csv_dir": "x"}, "methods": ["ERM"], "seeds": [0]})"),
                    ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"dataset": {"generator": "spurious"}, "methods": ["ERM"], "seeds": [0],
                                     "train": {"lr": "fast"}})"),
                    ConfigError);
  }
  SUBCASE("the shipped config loads") {
    const ExperimentConfig c = load_config(fs::path(BMCL_SOURCE_DIR) / "configs" / "synthetic.json");
    CHECK(c.methods.size() == 8);
    CHECK(c.seeds.size() == 5);
    CHECK(c.rho_grid.size() == 3);
    CHECK(c.lambda_grid.size() == 4);
  }
}

TEST_CASE("results rows round trip through CSV") {
  ReportRow a = sample_row("GroupDRO-LwF", 3, {0.986, 0.826, 0.863, 0.932});
  a.rho = 0.2;
  a.lambda = 1.0;
  a.relative = compute_relative(a.metrics, metrics_from_group_accuracies(std::vector<double>{0.995, 0.728, 0.796, 0.945},
                                                                         std::vector<std::size_t>(4, 1000)));
  ReportRow b = sample_row("ERM", 3, {1.0 / 3, 0.1, 0.7, 2.0 / 7});
  ReportRow failed;
  failed.method = "JTT";
  failed.seed = 4;
  failed.status = "failed";
  failed.error = "line 1, \"quoted\"\nand a newline";

  std::string text;
  const auto header = results_header(4);
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += "\r\n" + format_row(a, 4) + format_row(b, 4) + format_row(failed, 4);
  const auto rows = parse_results(text);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == a);
  CHECK(rows[1] == b);
  CHECK(rows[2] == failed);
  CHECK_THROWS_AS(format_row(b, 3), DimensionError);
}

TEST_CASE("CSV parsing") {
  CHECK(csv_parse("a,\"b,c\",\"d\"\"e\"\r\n1,,3\n") ==
        std::vector<std::vector<std::string>>{{"a", "b,c", "d\"e"}, {"1", "", "3"}});
  CHECK(csv_escape("plain") == "plain");
  CHECK(csv_escape("a,b") == "\"a,b\"");
  CHECK(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
  auto error_line = [](const std::string& text) {
    try {
      csv_parse(text);
    } catch (const ParseError& e) {
      return e.position();
    }
    return std::size_t{0};
  };
  CHECK(error_line("a,b\nc\"d,e\n") == 2);
  CHECK(error_line("a,b\n\"c\"x,e\n") == 2);
  CHECK(error_line("a\nb\n\"open\n") == 3);
  CHECK_THROWS_AS(parse_results("method,seed\r\n"), ParseError);
}

TEST_CASE("run writes one row per seed and method, ERM reference first") {
  const fs::path dir = scratch("run");
  ExperimentConfig c = parse_config(tiny_config(R"(["GroupDRO", {"name": "GroupDRO-LwF", "lambda": 1}])"));
  c.output_dir = dir;
  const RunSummary s = cmd_run(c, {});
  CHECK(s.rows == 9);
  CHECK(s.failed == 0);
  const auto rows = load_results(s.results_csv);
  REQUIRE(rows.size() == 9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    CHECK(r.ok());
    CHECK(r.seed == i / 3);
    CHECK(r.method == std::vector<std::string>{"ERM", "GroupDRO", "GroupDRO-LwF"}[i % 3]);
    REQUIRE(r.relative.has_value());
    if (r.method == "ERM") {
      CHECK(r.relative->lde == 0.0);
      CHECK(r.relative->iw == 0.0);
      CHECK(r.rho == 0.0);
    }
    if (r.method == "GroupDRO-LwF") {
      CHECK(r.rho == 0.5);
      CHECK(r.lambda == 1.0);
      CHECK(r.selected_epoch > 2);
    }
  }
  CHECK(fs::exists(dir / "runs" / "ERM_seed0.json"));
  CHECK(fs::exists(dir / "runs" / "GroupDRO_seed2.ckpt"));
  CHECK(fs::exists(dir / "runs" / "GroupDRO-LwF_seed1_rho0.5_lambda1.json"));
  CHECK(count_lines(read_file(dir / "timings.csv")) == 10);
  CHECK(read_file(s.results_csv).find("wall") == std::string::npos);

  SUBCASE("worker count does not change the output") {
    const fs::path par = scratch("run_parallel");
    CommandOptions o;
    o.out_dir = par;
    o.workers = 3;
    cmd_run(c, o);
    CHECK(read_file(par / "results.csv") == read_file(s.results_csv));
    CHECK(read_file(par / "runs" / "GroupDRO-LwF_seed2_rho0.5_lambda1.json") ==
          read_file(dir / "runs" / "GroupDRO-LwF_seed2_rho0.5_lambda1.json"));
  }
  SUBCASE("ERM listed explicitly is not run twice") {
    ExperimentConfig e = parse_config(tiny_config(R"(["ERM", "ReSample"])", "[0]"));
    e.output_dir = scratch("run_erm");
    CHECK(cmd_run(e, {}).rows == 2);
  }
}

TEST_CASE("report from a fixture") {
  const fs::path dir = scratch("report");
  std::string text;
  const auto header = results_header(4);
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += "\r\n";
  text += format_row(sample_row("ERM", 0, {0.995, 0.728, 0.796, 0.945}), 4);
  text += format_row(sample_row("GroupDRO", 0, {0.986, 0.826, 0.863, 0.932}), 4);
  text += format_row(sample_row("ReSample", 0, {0.949, 0.855, 0.873, 0.911}), 4);
  ReportRow failed;
  failed.method = "JTT";
  failed.status = "failed";
  failed.error = "diverged";
  text += format_row(failed, 4);
  write_file(dir / "results.csv", text);

  const auto summaries = cmd_report(dir);
  REQUIRE(summaries.size() == 3);
  CHECK(summaries[1].label == "GroupDRO");
  CHECK(summaries[1].seeds == 1);
  CHECK(format_percent(summaries[1].fields.at("lde").mean) == "0.9");
  CHECK(format_percent(summaries[1].fields.at("iw").mean) == "9.8");
  CHECK(summaries[1].fields.at("iw").std == 0.0);
  CHECK(format_percent(summaries[0].fields.at("balanced_acc").mean) == "86.6");

  const std::string table = read_file(dir / "table.txt");
  CHECK(table.find("0.9 ± 0.0") != std::string::npos);
  CHECK(table.find("9.8 ± 0.0") != std::string::npos);
  CHECK(table.find("JTT") == std::string::npos);
  CHECK(count_lines(read_file(dir / "scatter.csv")) == 3);
  CHECK(read_file(dir / "summary.json").find("\"pairing\"") != std::string::npos);

  const fs::path empty = scratch("report_empty");
  write_file(empty / "results.csv", format_row(failed, 4).insert(0, [&] {
    std::string h;
    for (std::size_t i = 0; i < header.size(); ++i) h += (i ? "," : "") + header[i];
    return h + "\r\n";
  }()));
  CHECK_THROWS_AS(cmd_report(empty), ValidationError);
}

TEST_CASE("report pairs LDE and IW per seed") {
  const fs::path dir = scratch("report_pairs");
  std::string text;
  const auto header = results_header(2);
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += "\r\n";
  // Seed 0: ERM best group 0, seed 1: ERM best group 1.
  text += format_row(sample_row("ERM", 0, {0.9, 0.5}), 2);
  text += format_row(sample_row("ERM", 1, {0.5, 0.9}), 2);
  text += format_row(sample_row("GroupDRO", 0, {0.8, 0.7}), 2);
  text += format_row(sample_row("GroupDRO", 1, {0.7, 0.8}), 2);
  write_file(dir / "results.csv", text);
  const auto s = cmd_report(dir);
  // Per seed: LDE = 0.1, IW = 0.2 in both; seed-averaged accuracies would give 0 and 0.
  CHECK(s[1].fields.at("lde").mean == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s[1].fields.at("iw").mean == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(s[1].fields.at("lde").std == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("ablation grid") {
  const fs::path dir = scratch("ablate");
  ExperimentConfig c = parse_config(
      tiny_config(R"(["GroupDRO-LwF"])", "[0, 1]", R"(, "grid": {"rho": [0.25, 0.5], "lambda": [0, 1]})"));
  c.output_dir = dir;
  const RunSummary s = cmd_ablate(c, {});
  CHECK(s.rows == 2 * (1 + 4));
  CHECK(s.failed == 0);
  const auto grid = csv_parse(read_file(dir / "ablation_GroupDRO-LwF.csv"));
  REQUIRE(grid.size() == 3);
  CHECK(grid[0] == std::vector<std::string>{"rho", "best_lambda_0", "worst_lambda_0", "best_lambda_1", "worst_lambda_1"});
  CHECK(grid[1][0] == "0.25");

  // Each cell is the seed mean of the fixed-identity accuracies in results.csv.
  const auto rows = load_results(s.results_csv);
  double best = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.method == "GroupDRO-LwF" && r.rho == 0.5 && r.lambda == 1.0) {
      best += r.relative->method_acc_at_reference_best;
      ++n;
    }
  }
  REQUIRE(n == 2);
  CHECK(std::stod(grid[2][3]) == doctest::Approx(best / n).epsilon(1e-12));

  ExperimentConfig plain = parse_config(tiny_config(R"(["GroupDRO"])", "[0]", R"(, "grid": {"rho": [0.5], "lambda": [0]})"));
  plain.output_dir = scratch("ablate_plain");
  CHECK_THROWS_AS(cmd_ablate(plain, {}), ConfigError);
  ExperimentConfig no_grid = parse_config(tiny_config(R"(["GroupDRO-EWC"])", "[0]"));
  no_grid.output_dir = plain.output_dir;
  CHECK_THROWS_AS(cmd_ablate(no_grid, {}), ConfigError);
}

TEST_CASE("generate") {
  ExperimentConfig c = parse_config(tiny_config(R"(["ERM"])", "[0, 1]"));
  c.output_dir = scratch("generate");
  const auto dirs = cmd_generate(c, {});
  REQUIRE(dirs.size() == 2);
  std::size_t total = 0;
  for (const char* part : {"train.csv", "val.csv", "test.csv"}) total += count_lines(read_file(dirs[0] / part)) - 1;
  CHECK(total == 400);
  CHECK(fs::exists(dirs[0] / "manifest.json"));
  CHECK(load_csv(dirs[1] / "train.csv") == materialize(c.dataset, 1).train);

  CommandOptions again;
  again.out_dir = scratch("generate_again");
  const auto dirs2 = cmd_generate(c, again);
  CHECK(read_file(dirs2[0] / "train.csv") == read_file(dirs[0] / "train.csv"));
  CHECK_FALSE(read_file(dirs[1] / "train.csv") == read_file(dirs[0] / "train.csv"));

  SUBCASE("csv datasets feed runs") {
    const fs::path cfg_dir = scratch("generate_csv_config");
    write_file(cfg_dir / "config.json",
               R"({"dataset": {"csv_dir": ")" + dirs[0].string() + R"("}, "methods": ["GroupDRO"], "seeds": [0],
                  "train": {"epochs": 2}, "model": {"hidden": [4]}})");
    const ExperimentConfig from_csv = load_config(cfg_dir / "config.json");
    CHECK(from_csv.output_dir == cfg_dir / "results");
    CHECK(cmd_run(from_csv, {}).failed == 0);
  }
}

TEST_CASE("CLI exit codes") {
  const fs::path dir = scratch("cli");
  write_file(dir / "good.json", tiny_config(R"(["GroupDRO"])", "[0]", R"(, "output_dir": "out")"));
  write_file(dir / "bad.json", tiny_config(R"(["GroupDRO"])", "[0]", R"(, "outputdir": "out")"));
  std::string impossible = tiny_config(R"(["GroupDRO"])", "[0]", R"(, "output_dir": "out2")");
  impossible.replace(impossible.find("\"n\": 400"), 8, "\"n\": 0");
  write_file(dir / "impossible.json", impossible);

  CHECK(run_cli("run --config " + (dir / "good.json").string()) == 0);
  CHECK(fs::exists(dir / "out" / "results.csv"));
  CHECK(run_cli("report " + (dir / "out").string()) == 0);
  CHECK(fs::exists(dir / "out" / "table.txt"));
  CHECK(run_cli("report --config " + (dir / "good.json").string() + " --out " + (dir / "rep").string()) == 0);
  CHECK(fs::exists(dir / "rep" / "summary.json"));
  CHECK(run_cli("generate --config " + (dir / "good.json").string() + " --out " + (dir / "gen").string()) == 0);

  CHECK(run_cli("run --config " + (dir / "bad.json").string()) == 1);
  CHECK(run_cli("run --config " + (dir / "missing.json").string()) == 1);
  CHECK(run_cli("run") == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("run --config " + (dir / "impossible.json").string()) == 1);
  CHECK(run_cli("report " + (dir / "nowhere").string()) == 2);
}
