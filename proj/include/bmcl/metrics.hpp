#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace bmcl {

/// Accuracy summary over a fixed universe of groups. All values lie in [0, 1].
struct GroupMetrics {
  std::vector<double> per_group_acc;
  std::vector<std::size_t> group_sizes;
  double global_acc = 0.0;
  double balanced_acc = 0.0;
  int best_group = 0;
  double best_acc = 0.0;
  int worst_group = 0;
  double worst_acc = 0.0;
  double disparity = 0.0;

  friend bool operator==(const GroupMetrics&, const GroupMetrics&) = default;
};

/// Accuracy change relative to an ERM reference, with the reference's
/// best/worst group identities held fixed.
struct RelativeMetrics {
  double lde = 0.0;  // leveling-down effect: erm.acc[g+] - method.acc[g+]
  double iw = 0.0;   // improvement on worst: method.acc[g-] - erm.acc[g-]
  int reference_best_group = 0;
  int reference_worst_group = 0;
  double method_acc_at_reference_best = 0.0;
  double method_acc_at_reference_worst = 0.0;

  friend bool operator==(const RelativeMetrics&, const RelativeMetrics&) = default;
};

/// Ties for best/worst are broken by the lowest group id.
GroupMetrics compute_group_metrics(std::span<const int> predictions, std::span<const int> labels,
                                   std::span<const int> group_ids, int num_groups);

/// Builds the same summary from known per-group accuracies and sizes.
GroupMetrics metrics_from_group_accuracies(std::span<const double> per_group_acc,
                                           std::span<const std::size_t> group_sizes);

RelativeMetrics compute_relative(const GroupMetrics& method, const GroupMetrics& erm_reference);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) standard deviation; 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

/// Named scalar fields of a metrics record, used for aggregation and reports.
using FieldMap = std::map<std::string, double>;

FieldMap to_fields(const GroupMetrics& m);
FieldMap to_fields(const RelativeMetrics& r);

/// Per-field mean and sample standard deviation across runs.
std::map<std::string, MeanStd> aggregate_runs(std::span<const FieldMap> runs);
std::map<std::string, MeanStd> aggregate_runs(std::span<const GroupMetrics> runs);
std::map<std::string, MeanStd> aggregate_runs(std::span<const RelativeMetrics> runs);

/// "86.6" style rendering: percent with one decimal.
std::string format_percent(double fraction);

}  // namespace bmcl
