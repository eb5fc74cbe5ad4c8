#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bmcl/datasets.hpp"
#include "bmcl/methods.hpp"
#include "bmcl/metrics.hpp"
#include "bmcl/model.hpp"

namespace bmcl {

struct TrainConfig {
  MlpConfig architecture;  // input_dim/num_classes must match the data
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::optional<double> stage2_lr;  // stage-2 fine-tuning rate; defaults to lr
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t patience = 10;
  double rho = 0.2;  // fraction of the epoch budget spent in stage-1 ERM
  MethodSpec method;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& config);

/// Stage-1 epoch count: max(1, floor(rho * epochs)).
std::size_t stage1_epochs(const TrainConfig& config);

struct DataSplits {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
};

// --- optimizer ----------------------------------------------------------------

struct SgdState {
  std::vector<Tensor> velocity;  // zero-initialized, model layout

  static SgdState zeros_like(const MlpModel& model);
};

/// g' = g + weight_decay * theta; v <- momentum * v + g'; theta <- theta - lr * v.
void sgd_step(MlpModel& model, const std::vector<Tensor>& grads, SgdState& state, double lr, double momentum,
              double weight_decay);

// --- group partition ----------------------------------------------------------

/// Accuracies closer than this to tau are ties. Distinct accuracies measured
/// on at most a few thousand samples per group differ from tau by far more.
inline constexpr double kTieTolerance = 1e-12;

struct GroupPartition {
  std::vector<double> alpha;  // per-group validation accuracy
  double tau = 0.0;           // mean of alpha
  std::vector<int> best;      // alpha_g > tau
  std::vector<int> worst;     // alpha_g <= tau (ties included)
};

/// Partition from known per-group accuracies. Throws ValidationError when no
/// group lies strictly above the mean.
GroupPartition partition_from_accuracies(std::span<const double> alpha);
GroupPartition partition_groups(const MlpModel& model, const GroupedDataset& val);

// --- training -----------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, counted across stages
  int stage = 1;
  double mean_loss = 0.0;
  std::vector<double> batch_losses;
  std::vector<double> val_group_acc;
  double val_worst_acc = 0.0;
  double val_balanced_acc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Outcome of one optimization phase.
struct PhaseResult {
  MlpModel final_model;     // parameters after the last epoch run
  MlpModel selected_model;  // best validation worst-group accuracy
  std::size_t selected_epoch = 0;
  bool stopped_early = false;
  TrainHistory history;
};

GroupMetrics evaluate(const MlpModel& model, const GroupedDataset& ds);

/// ERM with the uniform sampler for `epoch_budget` epochs. Early stopping on
/// validation worst-group accuracy applies only when `epoch_budget` equals
/// config.epochs (full baseline runs).
PhaseResult train_erm(const MlpModel& initial, const GroupedDataset& train, const GroupedDataset& val,
                      const TrainConfig& config, std::size_t epoch_budget);

/// Continual-learning state built after stage 1.
struct ClState {
  ClKind kind = ClKind::None;
  std::optional<LwfCache> lwf;
  std::optional<EwcState> ewc;
};

/// Bias-mitigation phase from `initial` for `epochs` epochs:
/// minimizes L_bm + lambda * L_cl (cl may be null for plain BM). Early stopping
/// and worst-group selection as in the baselines. `epoch_offset` shifts the
/// recorded epoch numbers.
PhaseResult finetune_bm(const MlpModel& initial, const DataSplits& data, const TrainConfig& config,
                        std::size_t epochs, const ClState* cl, std::size_t epoch_offset = 0, int stage = 2);

struct RunResult {
  TrainHistory history;
  std::size_t selected_epoch = 0;
  MlpModel model;  // selected model
  std::optional<GroupPartition> partition;
  std::optional<ModelSnapshot> stage1_snapshot;
  std::size_t stage1_epochs = 0;
  std::size_t stage2_epochs = 0;
  GroupMetrics val_metrics;
  GroupMetrics test_metrics;
};

/// Two-stage run: truncated ERM, partition on validation, then BM fine-tuning
/// regularized by the configured CL term.
RunResult train_bmcl(const DataSplits& data, const TrainConfig& config);

/// Single-phase baseline (ERM, GroupDRO, ReSample; JTT runs its own
/// identification pass first).
RunResult train_baseline_bm(const DataSplits& data, const TrainConfig& config);

/// Dispatches on config.method.cl.
RunResult train_method(const DataSplits& data, const TrainConfig& config);

/// Deterministic sub-seed for a named stream of a run.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace bmcl
