#include "bmcl/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

void fill_extremes(GroupMetrics& m) {
  const auto& acc = m.per_group_acc;
  double total = 0.0;
  m.best_group = m.worst_group = 0;
  for (std::size_t g = 0; g < acc.size(); ++g) {
    total += acc[g];
    if (acc[g] > acc[static_cast<std::size_t>(m.best_group)]) m.best_group = static_cast<int>(g);
    if (acc[g] < acc[static_cast<std::size_t>(m.worst_group)]) m.worst_group = static_cast<int>(g);
  }
  m.balanced_acc = total / static_cast<double>(acc.size());
  m.best_acc = acc[static_cast<std::size_t>(m.best_group)];
  m.worst_acc = acc[static_cast<std::size_t>(m.worst_group)];
  m.disparity = m.best_acc - m.worst_acc;
}

}  // namespace

GroupMetrics compute_group_metrics(std::span<const int> predictions, std::span<const int> labels,
                                   std::span<const int> group_ids, int num_groups) {
  if (predictions.size() != labels.size() || labels.size() != group_ids.size()) {
    throw DimensionError("predictions, labels and group ids must have equal length");
  }
  if (num_groups < 1) throw ParameterError("need at least one group");
  const auto groups = static_cast<std::size_t>(num_groups);
  std::vector<std::size_t> correct(groups, 0), total(groups, 0);
  std::size_t all_correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int g = group_ids[i];
    if (g < 0 || g >= num_groups) throw ParameterError("group id " + std::to_string(g) + " out of range");
    ++total[static_cast<std::size_t>(g)];
    if (predictions[i] == labels[i]) {
      ++correct[static_cast<std::size_t>(g)];
      ++all_correct;
    }
  }
  GroupMetrics m;
  m.group_sizes = total;
  for (std::size_t g = 0; g < groups; ++g) {
    if (total[g] == 0) throw ValidationError("group " + std::to_string(g) + " has no samples to evaluate");
    m.per_group_acc.push_back(static_cast<double>(correct[g]) / static_cast<double>(total[g]));
  }
  m.global_acc = static_cast<double>(all_correct) / static_cast<double>(labels.size());
  fill_extremes(m);
  return m;
}

GroupMetrics metrics_from_group_accuracies(std::span<const double> per_group_acc,
                                           std::span<const std::size_t> group_sizes) {
  if (per_group_acc.empty() || per_group_acc.size() != group_sizes.size()) {
    throw DimensionError("need one size per group accuracy");
  }
  GroupMetrics m;
  m.per_group_acc.assign(per_group_acc.begin(), per_group_acc.end());
  m.group_sizes.assign(group_sizes.begin(), group_sizes.end());
  double weighted = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < per_group_acc.size(); ++g) {
    if (group_sizes[g] == 0) throw ValidationError("group " + std::to_string(g) + " has no samples to evaluate");
    weighted += per_group_acc[g] * static_cast<double>(group_sizes[g]);
    n += group_sizes[g];
  }
  m.global_acc = weighted / static_cast<double>(n);
  fill_extremes(m);
  return m;
}

RelativeMetrics compute_relative(const GroupMetrics& method, const GroupMetrics& erm) {
  if (method.per_group_acc.size() != erm.per_group_acc.size()) {
    throw ValidationError("relative metrics need the same group universe (" +
                          std::to_string(method.per_group_acc.size()) + " vs " +
                          std::to_string(erm.per_group_acc.size()) + " groups)");
  }
  const auto best = static_cast<std::size_t>(erm.best_group);
  const auto worst = static_cast<std::size_t>(erm.worst_group);
  if (best >= method.per_group_acc.size() || worst >= method.per_group_acc.size()) {
    throw ValidationError("reference group missing from method metrics");
  }
  RelativeMetrics r;
  r.reference_best_group = erm.best_group;
  r.reference_worst_group = erm.worst_group;
  r.method_acc_at_reference_best = method.per_group_acc[best];
  r.method_acc_at_reference_worst = method.per_group_acc[worst];
  r.lde = erm.per_group_acc[best] - method.per_group_acc[best];
  r.iw = method.per_group_acc[worst] - erm.per_group_acc[worst];
  return r;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ParameterError("cannot aggregate an empty list of runs");
  double total = 0.0;
  for (double v : values) total += v;
  const double mean = total / static_cast<double>(values.size());
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

FieldMap to_fields(const GroupMetrics& m) {
  FieldMap f{{"global_acc", m.global_acc},   {"balanced_acc", m.balanced_acc}, {"best_acc", m.best_acc},
             {"worst_acc", m.worst_acc},     {"disparity", m.disparity}};
  for (std::size_t g = 0; g < m.per_group_acc.size(); ++g) f["group_" + std::to_string(g) + "_acc"] = m.per_group_acc[g];
  return f;
}

FieldMap to_fields(const RelativeMetrics& r) {
  return {{"lde", r.lde},
          {"iw", r.iw},
          {"ref_best_acc", r.method_acc_at_reference_best},
          {"ref_worst_acc", r.method_acc_at_reference_worst}};
}

std::map<std::string, MeanStd> aggregate_runs(std::span<const FieldMap> runs) {
  if (runs.empty()) throw ParameterError("cannot aggregate an empty list of runs");
  std::map<std::string, MeanStd> out;
  for (const auto& [key, _] : runs.front()) {
    std::vector<double> values;
    values.reserve(runs.size());
    for (const auto& run : runs) {
      const auto it = run.find(key);
      if (it == run.end()) throw ValidationError("field '" + key + "' missing from a run");
      values.push_back(it->second);
    }
    out[key] = mean_std(values);
  }
  return out;
}

std::map<std::string, MeanStd> aggregate_runs(std::span<const GroupMetrics> runs) {
  std::vector<FieldMap> fields;
  for (const auto& r : runs) fields.push_back(to_fields(r));
  return aggregate_runs(std::span<const FieldMap>(fields));
}

std::map<std::string, MeanStd> aggregate_runs(std::span<const RelativeMetrics> runs) {
  std::vector<FieldMap> fields;
  for (const auto& r : runs) fields.push_back(to_fields(r));
  return aggregate_runs(std::span<const FieldMap>(fields));
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

}  // namespace bmcl
