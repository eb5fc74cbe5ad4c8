#pragma once

// Loss terms for the bias-mitigation (BM) and continual-learning (CL) parts
// of the two-stage objective  L = L_bm + lambda * L_cl.

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bmcl/datasets.hpp"
#include "bmcl/model.hpp"
#include "bmcl/tensor.hpp"

namespace bmcl {

enum class BmKind { Erm, GroupDro, ReSample, Jtt };
enum class ClKind { None, LwF, Ewc };

/// EWC penalties are multiplied by this before use so that one lambda grid
/// serves both CL methods.
inline constexpr double kEwcLambdaScale = 1e3;

struct MethodSpec {
  BmKind bm = BmKind::Erm;
  double eta = 0.01;       // GroupDRO step size
  double lambda_up = 6.0;  // JTT upweighting factor
  std::size_t jtt_id_epochs = 0;  // 0: use the full epoch budget

  ClKind cl = ClKind::None;
  double lambda = 0.0;
  double temperature = 2.0;  // LwF

  /// Display name, e.g. "GroupDRO", "ReSample-LwF".
  std::string name() const;
  /// Lambda actually applied to the CL term (EWC is pre-scaled).
  double effective_lambda() const;

  friend bool operator==(const MethodSpec&, const MethodSpec&) = default;
};

void validate(const MethodSpec& spec);
std::string to_string(BmKind kind);
std::string to_string(ClKind kind);
BmKind parse_bm_kind(std::string_view name);
ClKind parse_cl_kind(std::string_view name);
/// Parses names such as "ERM", "GroupDRO", "GroupDRO-LwF", "ReSample-EWC".
MethodSpec parse_method_name(std::string_view name);

// --- bias-mitigation losses ------------------------------------------------

/// Per-sample cross-entropy, -log softmax(logits)[i, y_i]; length n.
Var cross_entropy_per_sample(const Var& logits, std::span<const int> labels);

/// Mean cross-entropy.
Var loss_erm(const Var& logits, std::span<const int> labels);

/// sum_i w_i * ce_i / sum_i w_i.
Var loss_weighted_ce(const Var& logits, std::span<const int> labels, std::span<const double> weights);

struct GroupDroState {
  std::vector<double> weights;  // on the probability simplex
  double eta = 0.01;

  static GroupDroState uniform(int num_groups, double eta);
};

struct GroupDroStep {
  Var loss;
  GroupDroState state;
  std::vector<double> group_losses;  // batch mean loss per group (0 where absent)
};

/// Online exponentiated-gradient group reweighting: w_g <- w_g * exp(eta * L_g)
/// for groups present in the batch, renormalize, then return sum_g w_g * L_g.
GroupDroStep loss_groupdro(const Var& per_sample_losses, std::span<const int> group_ids, const GroupDroState& state);

/// Indices the model misclassifies (argmax prediction).
std::vector<std::size_t> jtt_identify(const MlpModel& model, const GroupedDataset& train);
/// lambda_up on the error set, 1 elsewhere.
std::vector<double> jtt_weights(std::span<const std::size_t> error_set, double lambda_up, std::size_t n);

// --- continual-learning regularizers ---------------------------------------

/// Soft targets q*_i = softmax(f(x_i; theta*) / T) for the cached samples,
/// computed once from the frozen model.
class LwfCache {
 public:
  LwfCache() = default;
  LwfCache(double temperature, std::vector<std::size_t> indices, Tensor targets);

  double temperature() const noexcept { return temperature_; }
  std::size_t size() const noexcept { return indices_.size(); }
  std::span<const std::size_t> indices() const noexcept { return indices_; }
  const Tensor& targets() const noexcept { return targets_; }

  /// Row of `dataset_index` in targets(), if cached.
  std::optional<std::size_t> row_of(std::size_t dataset_index) const;
  /// Targets for the given cache rows as an [m x c] matrix.
  Tensor target_rows(std::span<const std::size_t> rows) const;

 private:
  double temperature_ = 1.0;
  std::vector<std::size_t> indices_;
  Tensor targets_;
  std::unordered_map<std::size_t, std::size_t> row_;
};

LwfCache build_lwf_cache(const ModelSnapshot& snapshot, const GroupedDataset& dataset,
                         std::span<const std::size_t> best_indices, double temperature);

/// (1/m) sum_i KL(q*_i || softmax(logits_i / T)). Returns an exact 0 when m == 0
/// (pass an invalid Var for `logits_best`).
Var loss_lwf(Tape& tape, const Var& logits_best, const Tensor& cached_targets, double temperature);

/// Empirical Fisher diagonal over `best_indices`: mean over samples of the
/// squared gradient of log p(y_hat | x) with y_hat the argmax prediction.
/// Flat layout matches MlpModel::flatten().
std::vector<double> fisher_diag(const MlpModel& model, const GroupedDataset& dataset,
                                std::span<const std::size_t> best_indices);

struct EwcState {
  std::vector<double> theta_star;
  std::vector<double> fisher;
};

/// (1/2) sum_j F_j (theta_j - theta*_j)^2, differentiable in the bound parameters.
Var loss_ewc(const BoundModel& bound, const EwcState& state);
/// Same penalty on plain flat vectors.
double ewc_penalty(std::span<const double> theta, const EwcState& state);

/// bm + lambda * cl. With lambda == 0 the BM term is returned unchanged.
Var combine(const Var& bm_loss, const Var& cl_loss, double lambda);

}  // namespace bmcl
