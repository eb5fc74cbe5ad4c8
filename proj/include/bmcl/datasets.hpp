#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bmcl/tensor.hpp"

namespace bmcl {

/// Samples with a class label and a protected attribute. The group of a
/// sample is the pair (attribute, label), encoded as attribute * num_labels + label.
class GroupedDataset {
 public:
  GroupedDataset() = default;
  /// Validates label/attribute ranges and the group-id encoding.
  /// An empty dataset may pass a default-constructed `features` and set `feature_dim`.
  GroupedDataset(Tensor features, std::vector<int> labels, std::vector<int> attributes,
                 std::vector<int> group_ids, int num_labels, int num_attributes,
                 std::size_t feature_dim = 0);
  /// Derives group ids from (attribute, label).
  static GroupedDataset from_labels(Tensor features, std::vector<int> labels, std::vector<int> attributes,
                                    int num_labels, int num_attributes);

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t feature_dim() const noexcept { return dim_; }
  int num_labels() const noexcept { return num_labels_; }
  int num_attributes() const noexcept { return num_attributes_; }
  int num_groups() const noexcept { return num_labels_ * num_attributes_; }

  const Tensor& features() const noexcept { return features_; }
  std::span<const int> labels() const noexcept { return labels_; }
  std::span<const int> attributes() const noexcept { return attributes_; }
  std::span<const int> group_ids() const noexcept { return group_ids_; }

  std::vector<std::size_t> group_counts() const;
  std::vector<std::size_t> indices_in_groups(std::span<const int> groups) const;

  GroupedDataset subset(std::span<const std::size_t> indices) const;
  /// Feature rows for `indices` as an [m x d] matrix.
  Tensor feature_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const GroupedDataset&, const GroupedDataset&) = default;

 private:
  Tensor features_;  // default-constructed when the dataset is empty
  std::size_t dim_ = 0;
  std::vector<int> labels_;
  std::vector<int> attributes_;
  std::vector<int> group_ids_;
  int num_labels_ = 0;
  int num_attributes_ = 0;
};

/// Two classes, binary attribute; the attribute agrees with the label with
/// probability p_corr. Features: [core ~ N(+-core_gap/2) by label,
/// spurious ~ N(+-spur_gap/2) by attribute, noise_dims x N(0)], all with std sigma.
/// The default gaps and noise dims are the calibrated setting under which a
/// 32-unit MLP trained with ERM leaves its worst validation group at least 10
/// points below balanced accuracy.
struct SpuriousConfig {
  std::size_t n = 5000;
  double p_corr = 0.95;
  double core_gap = 1.5;
  double spur_gap = 4.0;
  double sigma = 1.0;
  std::size_t noise_dims = 8;
  double label_balance = 0.5;
  std::uint64_t seed = 0;
};

/// Group of each sample drawn from `proportions`; features as SpuriousConfig
/// without the spurious channel.
struct ImbalanceConfig {
  std::size_t n = 5000;
  int num_labels = 2;
  int num_attributes = 2;
  std::vector<double> proportions;  // num_labels * num_attributes entries
  double core_gap = 1.0;
  double sigma = 1.0;
  std::size_t noise_dims = 0;
  std::uint64_t seed = 0;
};

GroupedDataset gen_spurious(const SpuriousConfig& config);
GroupedDataset gen_imbalanced(const ImbalanceConfig& config);

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct DatasetSplit {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
  std::vector<std::string> warnings;
};

/// Group-stratified shuffle split.
DatasetSplit split(const GroupedDataset& ds, const SplitFractions& fractions, std::uint64_t seed);
/// Index form of split(): train/val/test index lists into `ds`.
std::array<std::vector<std::size_t>, 3> split_indices(const GroupedDataset& ds, const SplitFractions& fractions,
                                                      std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

using Batch = std::vector<std::size_t>;

class BatchSampler {
 public:
  virtual ~BatchSampler() = default;
  virtual std::vector<Batch> next_epoch() = 0;
};

/// One shuffled pass over the data per epoch.
class UniformSampler final : public BatchSampler {
 public:
  UniformSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<Batch> next_epoch() override;

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

/// Each draw picks a group uniformly, then a member of it uniformly (with
/// replacement). An epoch is ceil(n / batch_size) full batches.
class GroupBalancedSampler final : public BatchSampler {
 public:
  GroupBalancedSampler(std::span<const int> group_ids, int num_groups, std::size_t batch_size, std::uint64_t seed);
  std::vector<Batch> next_epoch() override;
  std::size_t draw();

 private:
  std::vector<std::vector<std::size_t>> members_;
  std::size_t dataset_size_;
  std::size_t batch_size_;
  std::mt19937_64 rng_;
};

void save_csv(const GroupedDataset& ds, const std::filesystem::path& path);
/// Label/attribute cardinalities default to max value + 1 over the file.
GroupedDataset load_csv(const std::filesystem::path& path, std::optional<int> num_labels = std::nullopt,
                        std::optional<int> num_attributes = std::nullopt);

}  // namespace bmcl
