#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bmcl/tensor.hpp"

namespace bmcl {

struct MlpConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_widths;  // empty: multinomial logistic regression
  std::size_t num_classes = 2;
  std::uint64_t init_seed = 0;

  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

void validate(const MlpConfig& config);

/// Fully connected ReLU network. Parameters are stored in the order
/// W0, b0, W1, b1, ...; W_l is [fan_in x fan_out] and b_l is [fan_out].
class MlpModel {
 public:
  MlpModel() = default;
  explicit MlpModel(MlpConfig config);  // zero parameters with the right shapes

  /// He-normal weights (std = sqrt(2 / fan_in)), zero biases; deterministic in init_seed.
  static MlpModel init(const MlpConfig& config);

  const MlpConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return params_.size() / 2; }
  std::size_t parameter_count() const noexcept;

  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }

  const Tensor& weight(std::size_t layer) const { return params_[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

  std::vector<double> flatten() const;

  friend bool operator==(const MlpModel&, const MlpModel&) = default;

 private:
  MlpConfig config_;
  std::vector<Tensor> params_;
};

/// Analytic parameter count: sum over layers of (fan_in + 1) * fan_out.
std::size_t parameter_count(const MlpConfig& config);

/// Parameters of a model recorded as leaves on a tape.
struct BoundModel {
  const MlpModel* model = nullptr;
  std::vector<Var> params;

  /// Gradients of every parameter in model layout.
  std::vector<Tensor> gradients(const Gradients& g) const;
};

BoundModel bind(Tape& tape, const MlpModel& model, bool requires_grad = true);

/// Differentiable forward pass: [n x input_dim] -> [n x num_classes] logits.
Var forward(const BoundModel& bound, const Var& batch);

/// Untaped inference.
Tensor forward(const MlpModel& model, const Tensor& batch);
std::vector<int> predict(const MlpModel& model, const Tensor& batch);

/// Frozen copy of the parameters as one flat vector (index j matches
/// MlpModel::flatten()).
struct ModelSnapshot {
  MlpConfig layout;
  std::vector<double> flat;

  friend bool operator==(const ModelSnapshot&, const ModelSnapshot&) = default;
};

ModelSnapshot snapshot(const MlpModel& model);
MlpModel restore(const ModelSnapshot& snapshot);

/// Flat offset of each parameter tensor inside a snapshot.
std::vector<std::size_t> parameter_offsets(const MlpModel& model);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: "BMCL", u32 version, layout header, then float64
/// parameters, all little-endian.
void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const MlpModel& model);
MlpModel decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace bmcl
