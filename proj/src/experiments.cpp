#include "bmcl/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "bmcl/error.hpp"

namespace bmcl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- number formatting --------------------------------------------------------

/// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

// --- config reading -----------------------------------------------------------

/// JSON object view that records which keys were read, so leftovers can be
/// reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  Section section(const std::string& key) {
    const json* v = raw(key);
    if (!v) throw ConfigError("missing section '" + child(key) + "'");
    return Section(*v, child(key));
  }

  std::optional<double> number(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) throw ConfigError(child(key) + " must be a number");
    return v->get<double>();
  }

  std::optional<std::uint64_t> count(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
      throw ConfigError(child(key) + " must be a nonnegative integer");
    }
    return v->get<std::uint64_t>();
  }

  std::optional<bool> boolean(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_boolean()) throw ConfigError(child(key) + " must be true or false");
    return v->get<bool>();
  }

  std::optional<std::string> string(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) throw ConfigError(child(key) + " must be a string");
    return v->get<std::string>();
  }

  std::optional<std::vector<double>> numbers(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw ConfigError(child(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : *v) {
      if (!e.is_number()) throw ConfigError(child(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::optional<std::vector<std::uint64_t>> counts(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw ConfigError(child(key) + " must be an array of nonnegative integers");
    std::vector<std::uint64_t> out;
    for (const auto& e : *v) {
      if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0)) {
        throw ConfigError(child(key) + " must be an array of nonnegative integers");
      }
      out.push_back(e.get<std::uint64_t>());
    }
    return out;
  }

  /// Throws on any key that was never read.
  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + child(key) + "'");
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class T>
void assign(std::optional<T> v, T& target) {
  if (v) target = *v;
}

template <class T, class U>
void assign_as(std::optional<U> v, T& target) {
  if (v) target = static_cast<T>(*v);
}

SpuriousConfig read_spurious(Section s) {
  SpuriousConfig c;
  assign_as(s.count("n"), c.n);
  assign(s.number("p_corr"), c.p_corr);
  assign(s.number("core_gap"), c.core_gap);
  assign(s.number("spur_gap"), c.spur_gap);
  assign(s.number("sigma"), c.sigma);
  assign_as(s.count("noise_dims"), c.noise_dims);
  assign(s.number("label_balance"), c.label_balance);
  assign(s.count("seed"), c.seed);
  s.finish();
  return c;
}

ImbalanceConfig read_imbalanced(Section s) {
  ImbalanceConfig c;
  assign_as(s.count("n"), c.n);
  assign_as(s.count("num_labels"), c.num_labels);
  assign_as(s.count("num_attributes"), c.num_attributes);
  assign(s.numbers("proportions"), c.proportions);
  assign(s.number("core_gap"), c.core_gap);
  assign(s.number("sigma"), c.sigma);
  assign_as(s.count("noise_dims"), c.noise_dims);
  assign(s.count("seed"), c.seed);
  s.finish();
  return c;
}

DatasetConfig read_dataset(Section s, const fs::path& base_dir) {
  DatasetConfig c;
  const auto generator = s.string("generator");
  const auto csv_dir = s.string("csv_dir");
  if (generator.has_value() == csv_dir.has_value()) {
    throw ConfigError("dataset needs exactly one of 'generator' or 'csv_dir'");
  }
  if (generator) {
    if (*generator == "spurious") {
      c.source = DatasetConfig::Source::Spurious;
      if (s.has("params")) c.spurious = read_spurious(s.section("params"));
    } else if (*generator == "imbalanced") {
      c.source = DatasetConfig::Source::Imbalanced;
      if (!s.has("params")) throw ConfigError("dataset.params is required for the imbalanced generator");
      c.imbalanced = read_imbalanced(s.section("params"));
    } else {
      throw ConfigError("unknown dataset.generator '" + *generator + "' (expected spurious or imbalanced)");
    }
    if (s.has("split")) {
      Section split = s.section("split");
      assign(split.number("train"), c.fractions.train);
      assign(split.number("val"), c.fractions.val);
      assign(split.number("test"), c.fractions.test);
      split.finish();
    }
    assign(s.count("split_seed"), c.split_seed);
    assign(s.boolean("vary_with_seed"), c.vary_with_seed);
  } else {
    c.source = DatasetConfig::Source::Csv;
    c.csv_dir = fs::path(*csv_dir).is_absolute() ? fs::path(*csv_dir) : base_dir / *csv_dir;
    if (const auto v = s.count("num_labels")) c.num_labels = static_cast<int>(*v);
    if (const auto v = s.count("num_attributes")) c.num_attributes = static_cast<int>(*v);
    for (const char* name : {"train.csv", "val.csv", "test.csv"}) {
      if (!fs::exists(c.csv_dir / name)) {
        throw ConfigError("dataset file " + (c.csv_dir / name).string() + " does not exist");
      }
    }
  }
  s.finish();

  const auto& f = c.fractions;
  if (!(f.train > 0 && f.val > 0 && f.test > 0) || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("dataset.split fractions must be positive and sum to 1");
  }
  return c;
}

MethodSpec read_method(const json& entry, std::size_t index) {
  const std::string path = "methods[" + std::to_string(index) + "]";
  try {
    if (entry.is_string()) return parse_method_name(entry.get<std::string>());
    Section s(entry, path);
    const auto name = s.string("name");
    if (!name) throw ConfigError(path + ".name is required");
    MethodSpec m = parse_method_name(*name);
    assign(s.number("eta"), m.eta);
    assign(s.number("lambda_up"), m.lambda_up);
    assign_as(s.count("jtt_id_epochs"), m.jtt_id_epochs);
    assign(s.number("lambda"), m.lambda);
    assign(s.number("temperature"), m.temperature);
    s.finish();
    validate(m);
    return m;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string method_key(const MethodSpec& m) {
  return m.name() + "|" + num(m.eta) + "|" + num(m.lambda_up) + "|" + std::to_string(m.jtt_id_epochs) + "|" +
         num(m.lambda) + "|" + num(m.temperature);
}

bool is_erm_reference(const MethodSpec& m) { return m.bm == BmKind::Erm && m.cl == ClKind::None; }

// --- run execution ------------------------------------------------------------

struct Job {
  MethodSpec method;
  std::uint64_t seed = 0;
  double rho = 0.0;  // 0 for single-stage methods
  std::string run_name;
};

struct Outcome {
  ReportRow row;  // relative metrics filled in by the writer
  double wall_seconds = 0.0;
};

json metrics_json(const GroupMetrics& m) {
  return {{"per_group_acc", m.per_group_acc}, {"group_sizes", m.group_sizes}, {"global_acc", m.global_acc},
          {"balanced_acc", m.balanced_acc},   {"best_group", m.best_group},   {"best_acc", m.best_acc},
          {"worst_group", m.worst_group},     {"worst_acc", m.worst_acc},     {"disparity", m.disparity}};
}

json run_json(const Job& job, const ReportRow& row, const RunResult* result) {
  json j{{"method", job.method.name()},
         {"seed", job.seed},
         {"rho", row.rho},
         {"lambda", row.lambda},
         {"status", row.status},
         {"error", row.error}};
  if (!result) return j;
  j["selected_epoch"] = result->selected_epoch;
  j["stage1_epochs"] = result->stage1_epochs;
  j["stage2_epochs"] = result->stage2_epochs;
  if (result->partition) {
    const auto& p = *result->partition;
    j["partition"] = {{"alpha", p.alpha}, {"tau", p.tau}, {"best", p.best}, {"worst", p.worst}};
  } else {
    j["partition"] = nullptr;
  }
  j["val_metrics"] = metrics_json(result->val_metrics);
  j["test_metrics"] = metrics_json(result->test_metrics);
  json epochs = json::array();
  for (const auto& e : result->history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"stage", e.stage},
                      {"mean_loss", e.mean_loss},
                      {"batch_losses", e.batch_losses},
                      {"val_group_acc", e.val_group_acc},
                      {"val_worst_acc", e.val_worst_acc},
                      {"val_balanced_acc", e.val_balanced_acc}});
  }
  j["history"] = std::move(epochs);
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

using SeedData = std::map<std::uint64_t, std::shared_ptr<const DataSplits>>;

Outcome execute(const Job& job, const ExperimentConfig& config, const SeedData& data,
                const std::map<std::uint64_t, std::string>& data_errors, const fs::path& runs_dir) {
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  ReportRow& row = out.row;
  row.method = job.method.name();
  row.seed = job.seed;
  row.rho = job.rho;
  row.lambda = job.method.cl == ClKind::None ? 0.0 : job.method.lambda;
  std::optional<RunResult> result;
  try {
    if (const auto it = data_errors.find(job.seed); it != data_errors.end()) throw std::runtime_error(it->second);
    const DataSplits& d = *data.at(job.seed);
    TrainConfig tc = config.train;
    tc.architecture.input_dim = d.train.feature_dim();
    tc.architecture.num_classes = static_cast<std::size_t>(d.train.num_labels());
    tc.architecture.init_seed = job.seed;
    tc.method = job.method;
    tc.seed = job.seed;
    if (job.method.cl != ClKind::None) tc.rho = job.rho;
    result = train_method(d, tc);
    save_checkpoint(result->model, runs_dir / (job.run_name + ".ckpt"));
    row.metrics = result->test_metrics;
    row.selected_epoch = result->selected_epoch;
  } catch (const std::exception& e) {
    row.status = "failed";
    row.error = e.what();
    row.metrics = {};
    result.reset();
  }
  write_text(runs_dir / (job.run_name + ".json"), run_json(job, row, result ? &*result : nullptr).dump(1) + "\n");
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Streams rows to results.csv in job order as they complete. Each row is
/// written and flushed whole.
class OrderedWriter {
 public:
  OrderedWriter(const fs::path& path, std::size_t jobs, int num_groups)
      : out_(path, std::ios::binary | std::ios::trunc), pending_(jobs), num_groups_(num_groups) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    std::string header;
    const auto cols = results_header(num_groups);
    for (std::size_t i = 0; i < cols.size(); ++i) header += (i ? "," : "") + cols[i];
    out_ << header << "\r\n";
    out_.flush();
  }

  void complete(std::size_t index, Outcome outcome) {
    std::lock_guard lock(mu_);
    pending_[index] = std::move(outcome);
    while (next_ < pending_.size() && pending_[next_]) {
      Outcome& o = *pending_[next_];
      ReportRow& row = o.row;
      if (row.ok()) {
        if (row.method == "ERM" && !erm_.contains(row.seed)) erm_[row.seed] = row.metrics;
        if (const auto it = erm_.find(row.seed); it != erm_.end()) row.relative = compute_relative(row.metrics, it->second);
      }
      out_ << format_row(row, num_groups_);
      out_.flush();
      done_.push_back(std::move(o));
      ++next_;
    }
  }

  const std::vector<Outcome>& done() const { return done_; }

 private:
  std::mutex mu_;
  std::ofstream out_;
  std::vector<std::optional<Outcome>> pending_;
  std::vector<Outcome> done_;
  std::map<std::uint64_t, GroupMetrics> erm_;
  std::size_t next_ = 0;
  int num_groups_;
};

std::vector<std::uint64_t> effective_seeds(const ExperimentConfig& config, const CommandOptions& options) {
  std::vector<std::uint64_t> seeds;
  for (auto s : config.seeds) seeds.push_back(s + options.seed_offset);
  return seeds;
}

fs::path output_dir(const ExperimentConfig& config, const CommandOptions& options) {
  return options.out_dir ? *options.out_dir : config.output_dir;
}

std::string run_name(const MethodSpec& m, std::uint64_t seed, std::optional<double> rho) {
  std::string name = m.name() + "_seed" + std::to_string(seed);
  if (rho) name += "_rho" + num(*rho) + "_lambda" + num(m.lambda);
  return name;
}

RunSummary execute_jobs(const ExperimentConfig& config, const CommandOptions& options, const std::vector<Job>& jobs,
                        std::vector<Outcome>* outcomes) {
  const fs::path dir = output_dir(config, options);
  fs::create_directories(dir / "runs");

  SeedData data;
  std::map<std::uint64_t, std::string> data_errors;
  int num_groups = 0;
  std::shared_ptr<const DataSplits> shared;
  for (const auto& job : jobs) {
    if (data.contains(job.seed) || data_errors.contains(job.seed)) continue;
    try {
      if (!config.dataset.vary_with_seed && shared) {
        data[job.seed] = shared;
      } else {
        data[job.seed] = std::make_shared<const DataSplits>(materialize(config.dataset, job.seed));
        if (!config.dataset.vary_with_seed) shared = data[job.seed];
      }
      num_groups = data[job.seed]->train.num_groups();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    } catch (const std::exception& e) {
      data_errors[job.seed] = std::string("dataset: ") + e.what();
    }
  }
  if (num_groups == 0) {
    num_groups = config.dataset.source == DatasetConfig::Source::Imbalanced
                     ? config.dataset.imbalanced.num_labels * config.dataset.imbalanced.num_attributes
                     : 4;
  }

  RunSummary summary;
  summary.results_csv = dir / "results.csv";
  OrderedWriter writer(summary.results_csv, jobs.size(), num_groups);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      writer.complete(i, execute(jobs[i], config, data, data_errors, dir / "runs"));
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(1, jobs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  std::string timings = "method,seed,rho,lambda,wall_seconds\r\n";
  for (const auto& o : writer.done()) {
    ++summary.rows;
    if (!o.row.ok()) ++summary.failed;
    timings += csv_escape(o.row.method) + "," + std::to_string(o.row.seed) + "," + num(o.row.rho) + "," +
               num(o.row.lambda) + "," + num(o.wall_seconds) + "\r\n";
  }
  write_text(dir / "timings.csv", timings);
  if (outcomes) *outcomes = writer.done();
  return summary;
}

// --- results parsing ----------------------------------------------------------

struct Record {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

std::vector<Record> csv_records(const std::string& text) {
  std::vector<Record> out;
  Record rec;
  std::string field;
  std::size_t line = 1;
  enum { kStart, kUnquoted, kQuoted, kClosed } state = kStart;
  bool record_open = false;
  auto end_field = [&] {
    rec.fields.push_back(std::move(field));
    field.clear();
    state = kStart;
  };
  auto end_record = [&] {
    end_field();
    out.push_back(std::move(rec));
    rec = Record{};
    record_open = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (!record_open) {
      rec.line = line;
      record_open = true;
    }
    if (state == kQuoted) {
      if (ch != '"') {
        if (ch == '\n') ++line;
        field += ch;
      } else if (i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else {
        state = kClosed;
      }
      continue;
    }
    const bool crlf = ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n';
    if (ch == ',') {
      end_field();
    } else if (ch == '\n' || crlf) {
      if (crlf) ++i;
      end_record();
      ++line;
    } else if (state == kClosed) {
      throw ParseError("text after closing quote on line " + std::to_string(line), line);
    } else if (ch == '"') {
      if (state != kStart) throw ParseError("stray quote in unquoted field on line " + std::to_string(line), line);
      state = kQuoted;
    } else {
      field += ch;
      state = kUnquoted;
    }
  }
  if (state == kQuoted) {
    throw ParseError("unterminated quoted field starting on line " + std::to_string(rec.line), rec.line);
  }
  if (record_open) end_record();
  return out;
}

double parse_double(const std::string& s, const std::string& column, std::size_t line) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line) + ": column " + column + " is not a number: '" + s + "'", line);
  }
  return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& column, std::size_t line) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ParseError("line " + std::to_string(line) + ": column " + column + " is not a nonnegative integer: '" + s + "'",
                     line);
  }
  return v;
}

constexpr const char* kLeadColumns[] = {"method",     "seed",     "rho",         "lambda",    "global_acc", "balanced_acc",
                                        "best_group", "best_acc", "worst_group", "worst_acc", "disparity"};
constexpr const char* kTailColumns[] = {"ref_best_group", "ref_worst_group", "ref_best_acc", "ref_worst_acc", "lde",
                                        "iw",             "selected_epoch",  "status",       "error"};

// --- report -------------------------------------------------------------------

std::string pm(const MeanStd& v) { return format_percent(v.mean) + " ± " + format_percent(v.std); }

}  // namespace

// --- configuration ------------------------------------------------------------

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section s(root, "");
  ExperimentConfig c;
  c.dataset = read_dataset(s.section("dataset"), base_dir);

  const json* methods = s.raw("methods");
  if (!methods || !methods->is_array() || methods->empty()) throw ConfigError("methods must be a nonempty array");
  std::set<std::string> keys;
  for (std::size_t i = 0; i < methods->size(); ++i) {
    MethodSpec m = read_method((*methods)[i], i);
    if (!keys.insert(method_key(m)).second) throw ConfigError("duplicate method '" + m.name() + "'");
    c.methods.push_back(m);
  }

  if (s.has("train")) {
    Section t = s.section("train");
    assign_as(t.count("epochs"), c.train.epochs);
    assign(t.number("lr"), c.train.lr);
    if (const auto v = t.number("stage2_lr")) c.train.stage2_lr = *v;
    assign(t.number("momentum"), c.train.momentum);
    assign(t.number("weight_decay"), c.train.weight_decay);
    assign_as(t.count("batch_size"), c.train.batch_size);
    assign_as(t.count("patience"), c.train.patience);
    assign(t.number("rho"), c.train.rho);
    t.finish();
  }
  if (s.has("model")) {
    Section m = s.section("model");
    if (const auto hidden = m.counts("hidden")) {
      c.train.architecture.hidden_widths.assign(hidden->begin(), hidden->end());
    }
    m.finish();
  }
  for (auto w : c.train.architecture.hidden_widths) {
    if (w == 0) throw ConfigError("model.hidden widths must be positive");
  }
  try {
    TrainConfig probe = c.train;
    probe.architecture.input_dim = 1;
    probe.architecture.num_classes = 2;
    validate(probe);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }

  const auto seeds = s.counts("seeds");
  if (!seeds || seeds->empty()) throw ConfigError("seeds must be a nonempty array of nonnegative integers");
  c.seeds = *seeds;
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }

  if (s.has("grid")) {
    Section g = s.section("grid");
    assign(g.numbers("rho"), c.rho_grid);
    assign(g.numbers("lambda"), c.lambda_grid);
    g.finish();
    for (double r : c.rho_grid) {
      if (!(r > 0.0 && r < 1.0)) throw ConfigError("grid.rho values must lie in (0, 1)");
    }
    for (double l : c.lambda_grid) {
      if (!(l >= 0.0)) throw ConfigError("grid.lambda values must be nonnegative");
    }
  }
  if (const auto out = s.string("output_dir")) {
    c.output_dir = fs::path(*out).is_absolute() ? fs::path(*out) : base_dir / *out;
  } else {
    c.output_dir = base_dir / "results";
  }
  s.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

DataSplits materialize(const DatasetConfig& c, std::uint64_t run_seed) {
  const std::uint64_t shift = c.vary_with_seed ? run_seed : 0;
  auto from = [](DatasetSplit s) { return DataSplits{std::move(s.train), std::move(s.val), std::move(s.test)}; };
  switch (c.source) {
    case DatasetConfig::Source::Spurious: {
      SpuriousConfig g = c.spurious;
      g.seed += shift;
      return from(split(gen_spurious(g), c.fractions, c.split_seed + shift));
    }
    case DatasetConfig::Source::Imbalanced: {
      ImbalanceConfig g = c.imbalanced;
      g.seed += shift;
      return from(split(gen_imbalanced(g), c.fractions, c.split_seed + shift));
    }
    case DatasetConfig::Source::Csv:
      break;
  }
  DataSplits d{load_csv(c.csv_dir / "train.csv", c.num_labels, c.num_attributes),
               load_csv(c.csv_dir / "val.csv", c.num_labels, c.num_attributes),
               load_csv(c.csv_dir / "test.csv", c.num_labels, c.num_attributes)};
  if (d.val.num_groups() != d.train.num_groups() || d.test.num_groups() != d.train.num_groups()) {
    throw ValidationError("train/val/test disagree on the number of groups; set num_labels and num_attributes");
  }
  return d;
}

// --- result rows --------------------------------------------------------------

std::vector<std::string> results_header(int num_groups) {
  std::vector<std::string> cols(std::begin(kLeadColumns), std::end(kLeadColumns));
  for (int g = 0; g < num_groups; ++g) cols.push_back("group_" + std::to_string(g) + "_acc");
  for (int g = 0; g < num_groups; ++g) cols.push_back("group_" + std::to_string(g) + "_n");
  cols.insert(cols.end(), std::begin(kTailColumns), std::end(kTailColumns));
  return cols;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> csv_parse(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  for (auto& r : csv_records(text)) out.push_back(std::move(r.fields));
  return out;
}

std::string format_row(const ReportRow& row, int num_groups) {
  std::vector<std::string> f{csv_escape(row.method), std::to_string(row.seed), num(row.rho), num(row.lambda)};
  const auto groups = static_cast<std::size_t>(num_groups);
  const bool has_metrics = row.ok() && row.metrics.per_group_acc.size() == groups;
  if (row.ok() && !has_metrics) throw DimensionError("row metrics do not cover " + std::to_string(num_groups) + " groups");
  const auto& m = row.metrics;
  if (has_metrics) {
    f.insert(f.end(), {num(m.global_acc), num(m.balanced_acc), std::to_string(m.best_group), num(m.best_acc),
                       std::to_string(m.worst_group), num(m.worst_acc), num(m.disparity)});
    for (double a : m.per_group_acc) f.push_back(num(a));
    for (std::size_t n : m.group_sizes) f.push_back(std::to_string(n));
  } else {
    f.insert(f.end(), 7 + 2 * groups, "");
  }
  if (has_metrics && row.relative) {
    const auto& r = *row.relative;
    f.insert(f.end(), {std::to_string(r.reference_best_group), std::to_string(r.reference_worst_group),
                       num(r.method_acc_at_reference_best), num(r.method_acc_at_reference_worst), num(r.lde),
                       num(r.iw)});
  } else {
    f.insert(f.end(), 6, "");
  }
  f.push_back(has_metrics ? std::to_string(row.selected_epoch) : "");
  f.push_back(row.status);
  f.push_back(csv_escape(row.error));
  std::string line;
  for (std::size_t i = 0; i < f.size(); ++i) line += (i ? "," : "") + f[i];
  return line + "\r\n";
}

std::vector<ReportRow> parse_results(const std::string& text) {
  const auto records = csv_records(text);
  if (records.empty()) throw ParseError("results file is empty", 1);
  const auto& header = records.front().fields;
  int groups = 0;
  while (std::find(header.begin(), header.end(), "group_" + std::to_string(groups) + "_acc") != header.end()) ++groups;
  if (header != results_header(groups)) throw ParseError("results header does not match the expected columns", 1);

  std::vector<ReportRow> rows;
  for (std::size_t k = 1; k < records.size(); ++k) {
    const auto& f = records[k].fields;
    const std::size_t line = records[k].line;
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != header.size()) {
      throw ParseError("line " + std::to_string(line) + ": expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(f.size()),
                       line);
    }
    std::size_t at = 0;
    auto next = [&] {
      auto field = std::make_pair(f[at], header[at]);
      ++at;
      return field;
    };
    auto dbl = [&] {
      auto [v, c] = next();
      return parse_double(v, c, line);
    };
    auto uint = [&] {
      auto [v, c] = next();
      return parse_uint(v, c, line);
    };
    ReportRow row;
    row.method = f[at++];
    row.seed = uint();
    row.rho = dbl();
    row.lambda = dbl();
    const std::size_t tail = header.size() - std::size(kTailColumns);
    row.status = f[tail + 7];
    row.error = f[tail + 8];
    if (row.status != "ok" && row.status != "failed") {
      throw ParseError("line " + std::to_string(line) + ": status must be ok or failed", line);
    }
    if (row.ok()) {
      auto& m = row.metrics;
      m.global_acc = dbl();
      m.balanced_acc = dbl();
      m.best_group = static_cast<int>(uint());
      m.best_acc = dbl();
      m.worst_group = static_cast<int>(uint());
      m.worst_acc = dbl();
      m.disparity = dbl();
      for (int g = 0; g < groups; ++g) m.per_group_acc.push_back(dbl());
      for (int g = 0; g < groups; ++g) m.group_sizes.push_back(uint());
      if (!f[at].empty()) {
        RelativeMetrics r;
        r.reference_best_group = static_cast<int>(uint());
        r.reference_worst_group = static_cast<int>(uint());
        r.method_acc_at_reference_best = dbl();
        r.method_acc_at_reference_worst = dbl();
        r.lde = dbl();
        r.iw = dbl();
        row.relative = r;
      } else {
        at += 6;
      }
      row.selected_epoch = uint();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ReportRow> load_results(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("results file " + path.string() + " does not exist");
  return parse_results(read_text(path));
}

// --- commands -----------------------------------------------------------------

std::vector<fs::path> cmd_generate(const ExperimentConfig& config, const CommandOptions& options) {
  const auto& d = config.dataset;
  if (d.source == DatasetConfig::Source::Csv) throw ConfigError("generate needs a dataset.generator, not csv_dir");
  const fs::path dir = output_dir(config, options);
  std::vector<std::uint64_t> seeds{0};
  if (d.vary_with_seed) seeds = effective_seeds(config, options);

  std::vector<fs::path> written;
  for (auto seed : seeds) {
    const fs::path target = d.vary_with_seed ? dir / ("seed_" + std::to_string(seed)) : dir;
    fs::create_directories(target);
    const std::uint64_t shift = d.vary_with_seed ? seed : 0;
    GroupedDataset full;
    json params;
    if (d.source == DatasetConfig::Source::Spurious) {
      SpuriousConfig g = d.spurious;
      g.seed += shift;
      full = gen_spurious(g);
      params = {{"n", g.n},         {"p_corr", g.p_corr},         {"core_gap", g.core_gap},
                {"spur_gap", g.spur_gap}, {"sigma", g.sigma}, {"noise_dims", g.noise_dims},
                {"label_balance", g.label_balance}, {"seed", g.seed}};
    } else {
      ImbalanceConfig g = d.imbalanced;
      g.seed += shift;
      full = gen_imbalanced(g);
      params = {{"n", g.n},           {"num_labels", g.num_labels}, {"num_attributes", g.num_attributes},
                {"proportions", g.proportions}, {"core_gap", g.core_gap}, {"sigma", g.sigma},
                {"noise_dims", g.noise_dims}, {"seed", g.seed}};
    }
    const DatasetSplit parts = split(full, d.fractions, d.split_seed + shift);
    save_csv(parts.train, target / "train.csv");
    save_csv(parts.val, target / "val.csv");
    save_csv(parts.test, target / "test.csv");
    const json manifest{
        {"generator", d.source == DatasetConfig::Source::Spurious ? "spurious" : "imbalanced"},
        {"params", params},
        {"split", {{"train", d.fractions.train}, {"val", d.fractions.val}, {"test", d.fractions.test}}},
        {"split_seed", d.split_seed + shift},
        {"num_labels", full.num_labels()},
        {"num_attributes", full.num_attributes()},
        {"rows", {{"train", parts.train.size()}, {"val", parts.val.size()}, {"test", parts.test.size()}}},
        {"warnings", parts.warnings}};
    write_text(target / "manifest.json", manifest.dump(2) + "\n");
    written.push_back(target);
  }
  return written;
}

RunSummary cmd_run(const ExperimentConfig& config, const CommandOptions& options) {
  std::vector<Job> jobs;
  for (auto seed : effective_seeds(config, options)) {
    const MethodSpec erm = parse_method_name("ERM");
    jobs.push_back({erm, seed, 0.0, run_name(erm, seed, std::nullopt)});
    for (const auto& m : config.methods) {
      if (is_erm_reference(m)) continue;
      const bool staged = m.cl != ClKind::None;
      const double rho = staged ? config.train.rho : 0.0;
      jobs.push_back({m, seed, rho, run_name(m, seed, staged ? std::optional(rho) : std::nullopt)});
    }
  }
  return execute_jobs(config, options, jobs, nullptr);
}

RunSummary cmd_ablate(const ExperimentConfig& config, const CommandOptions& options) {
  if (config.rho_grid.empty() || config.lambda_grid.empty()) throw ConfigError("ablate needs nonempty grid.rho and grid.lambda");
  std::vector<MethodSpec> staged;
  for (const auto& m : config.methods) {
    if (m.cl != ClKind::None) staged.push_back(m);
  }
  if (staged.empty()) throw ConfigError("ablate needs at least one two-stage method (e.g. GroupDRO-LwF)");

  std::vector<Job> jobs;
  for (auto seed : effective_seeds(config, options)) {
    const MethodSpec erm = parse_method_name("ERM");
    jobs.push_back({erm, seed, 0.0, run_name(erm, seed, std::nullopt)});
    for (const auto& m : staged) {
      for (double rho : config.rho_grid) {
        for (double lambda : config.lambda_grid) {
          MethodSpec cell = m;
          cell.lambda = lambda;
          jobs.push_back({cell, seed, rho, run_name(cell, seed, rho)});
        }
      }
    }
  }
  std::vector<Outcome> outcomes;
  RunSummary summary = execute_jobs(config, options, jobs, &outcomes);

  const fs::path dir = output_dir(config, options);
  std::set<std::string> emitted;
  for (const auto& m : staged) {
    const std::string name = m.name();
    if (!emitted.insert(name).second) continue;
    std::string text = "rho";
    for (double l : config.lambda_grid) text += ",best_lambda_" + num(l) + ",worst_lambda_" + num(l);
    text += "\r\n";
    for (double rho : config.rho_grid) {
      text += num(rho);
      for (double lambda : config.lambda_grid) {
        std::vector<double> best, worst;
        for (const auto& o : outcomes) {
          const auto& r = o.row;
          if (r.method != name || r.rho != rho || r.lambda != lambda || !r.ok() || !r.relative) continue;
          best.push_back(r.relative->method_acc_at_reference_best);
          worst.push_back(r.relative->method_acc_at_reference_worst);
        }
        text += best.empty() ? ",," : "," + num(mean_std(best).mean) + "," + num(mean_std(worst).mean);
      }
      text += "\r\n";
    }
    write_text(dir / ("ablation_" + name + ".csv"), text);
  }
  return summary;
}

std::vector<MethodSummary> cmd_report(const fs::path& results_dir, const std::optional<fs::path>& out_dir) {
  const std::vector<ReportRow> rows = load_results(results_dir / "results.csv");
  std::map<std::uint64_t, const ReportRow*> erm;
  for (const auto& r : rows) {
    if (r.ok() && r.method == "ERM" && !erm.contains(r.seed)) erm[r.seed] = &r;
  }

  struct Acc {
    MethodSummary summary;
    std::map<std::string, std::vector<double>> values;
  };
  std::vector<Acc> groups;
  std::map<std::string, std::size_t> method_points;  // method -> distinct (rho, lambda) count
  std::string scatter = "method,seed,best_group_acc,worst_group_acc\r\n";
  for (const auto& r : rows) {
    if (!r.ok()) continue;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Acc& a) {
      return a.summary.method == r.method && a.summary.rho == r.rho && a.summary.lambda == r.lambda;
    });
    if (it == groups.end()) {
      Acc a;
      a.summary.method = r.method;
      a.summary.rho = r.rho;
      a.summary.lambda = r.lambda;
      groups.push_back(std::move(a));
      it = std::prev(groups.end());
      ++method_points[r.method];
    }
    ++it->summary.seeds;
    for (const auto& [k, v] : to_fields(r.metrics)) it->values[k].push_back(v);
    if (const auto ref = erm.find(r.seed); ref != erm.end()) {
      const RelativeMetrics rel = compute_relative(r.metrics, ref->second->metrics);
      for (const auto& [k, v] : to_fields(rel)) it->values[k].push_back(v);
      if (r.method != "ERM") {
        scatter += csv_escape(r.method) + "," + std::to_string(r.seed) + "," + num(rel.method_acc_at_reference_best) +
                   "," + num(rel.method_acc_at_reference_worst) + "\r\n";
      }
    }
  }
  if (groups.empty()) throw ValidationError("no successful runs in " + (results_dir / "results.csv").string());

  std::vector<MethodSummary> out;
  json methods = json::array();
  for (auto& a : groups) {
    MethodSummary& s = a.summary;
    s.label = s.method;
    if (method_points[s.method] > 1) s.label += " (rho=" + num(s.rho) + ", lambda=" + num(s.lambda) + ")";
    json fields = json::object();
    for (const auto& [k, v] : a.values) {
      s.fields[k] = mean_std(v);
      fields[k] = {{"mean", s.fields[k].mean}, {"std", s.fields[k].std}, {"n", v.size()}};
    }
    methods.push_back({{"label", s.label},
                       {"method", s.method},
                       {"rho", s.rho},
                       {"lambda", s.lambda},
                       {"seeds", s.seeds},
                       {"fields", fields}});
    out.push_back(s);
  }

  const fs::path dir = out_dir ? *out_dir : results_dir;
  fs::create_directories(dir);
  const json summary{{"pairing", "lde and iw are computed per seed against the same-seed ERM run, then averaged"},
                     {"methods", methods}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_text(dir / "table.txt", render_table(out));
  write_text(dir / "scatter.csv", scatter);
  return out;
}

std::string render_table(const std::vector<MethodSummary>& summaries) {
  const std::vector<std::pair<std::string, std::string>> columns{
      {"Global Acc.", "global_acc"}, {"Balanced Acc.", "balanced_acc"}, {"Best Group", "best_acc"},
      {"Worst Group", "worst_acc"},  {"Disparity", "disparity"},        {"ERM-Best Group", "ref_best_acc"},
      {"ERM-Worst Group", "ref_worst_acc"}, {"LDE", "lde"},             {"IW", "iw"}};
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"Method"};
  for (const auto& [title, _] : columns) head.push_back(title);
  cells.push_back(head);
  for (const auto& s : summaries) {
    std::vector<std::string> line{s.label};
    for (const auto& [_, key] : columns) {
      const auto it = s.fields.find(key);
      line.push_back(it == s.fields.end() ? "--" : pm(it->second));
    }
    cells.push_back(line);
  }

  // "±" is two bytes but one column wide.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(head.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], width(line[i]));
  }
  std::string text;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& c = cells[r][i];
      const std::string pad(widths[i] - width(c), ' ');
      text += i == 0 ? c + pad : "  " + pad + c;
    }
    text += "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      text += std::string(total - 2, '-') + "\n";
    }
  }
  text +=
      "\nAccuracies in percent, mean ± sample std over seeds.\n"
      "Best/Worst Group: each method's own extreme groups. ERM-Best/ERM-Worst Group: accuracy on the\n"
      "groups that are best/worst for the same-seed ERM run.\n"
      "LDE and IW are computed per seed against the same-seed ERM run and then averaged, rather than\n"
      "taken from seed-averaged accuracies.\n";
  return text;
}

}  // namespace bmcl
