#include "bmcl/methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

constexpr double kTargetFloor = 1e-12;

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw DimensionError(std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " logit rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ParameterError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                           " classes");
    }
  }
}

}  // namespace

// --- MethodSpec -------------------------------------------------------------

std::string to_string(BmKind kind) {
  switch (kind) {
    case BmKind::Erm: return "ERM";
    case BmKind::GroupDro: return "GroupDRO";
    case BmKind::ReSample: return "ReSample";
    case BmKind::Jtt: return "JTT";
  }
  return "?";
}

std::string to_string(ClKind kind) {
  switch (kind) {
    case ClKind::None: return "None";
    case ClKind::LwF: return "LwF";
    case ClKind::Ewc: return "EWC";
  }
  return "?";
}

BmKind parse_bm_kind(std::string_view name) {
  for (auto k : {BmKind::Erm, BmKind::GroupDro, BmKind::ReSample, BmKind::Jtt}) {
    if (name == to_string(k)) return k;
  }
  throw ParameterError("unknown bias-mitigation method '" + std::string(name) + "'");
}

ClKind parse_cl_kind(std::string_view name) {
  for (auto k : {ClKind::None, ClKind::LwF, ClKind::Ewc}) {
    if (name == to_string(k)) return k;
  }
  throw ParameterError("unknown continual-learning method '" + std::string(name) + "'");
}

MethodSpec parse_method_name(std::string_view name) {
  MethodSpec spec;
  const auto dash = name.find('-');
  spec.bm = parse_bm_kind(name.substr(0, dash));
  if (dash != std::string_view::npos) spec.cl = parse_cl_kind(name.substr(dash + 1));
  return spec;
}

std::string MethodSpec::name() const {
  return cl == ClKind::None ? to_string(bm) : to_string(bm) + "-" + to_string(cl);
}

double MethodSpec::effective_lambda() const {
  switch (cl) {
    case ClKind::None: return 0.0;
    case ClKind::LwF: return lambda;
    case ClKind::Ewc: return lambda * kEwcLambdaScale;
  }
  return 0.0;
}

void validate(const MethodSpec& spec) {
  if (!(spec.lambda >= 0.0)) throw ParameterError("lambda must be nonnegative");
  if (!(spec.temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (!(spec.eta > 0.0)) throw ParameterError("GroupDRO eta must be positive");
  if (!(spec.lambda_up >= 1.0)) throw ParameterError("JTT lambda_up must be at least 1");
}

// --- BM losses ----------------------------------------------------------------

Var cross_entropy_per_sample(const Var& logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("logits must be a matrix, got " + shape_to_string(z.shape()));
  check_labels(labels, z.rows(), z.cols());
  return scale(pick(log_softmax_temp(logits, 1.0), labels), -1.0);
}

Var loss_erm(const Var& logits, std::span<const int> labels) {
  return mean(cross_entropy_per_sample(logits, labels));
}

Var loss_weighted_ce(const Var& logits, std::span<const int> labels, std::span<const double> weights) {
  const Var ce = cross_entropy_per_sample(logits, labels);
  if (weights.size() != labels.size()) throw DimensionError("one weight per sample required");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw ParameterError("sample weights must have a positive sum");
  std::vector<double> w(weights.begin(), weights.end());
  for (auto& v : w) v /= total;
  return sum(mul(ce, logits.tape().constant(Tensor::vector(std::move(w)))));
}

GroupDroState GroupDroState::uniform(int num_groups, double eta) {
  if (num_groups < 1) throw ParameterError("GroupDRO needs at least one group");
  return {std::vector<double>(static_cast<std::size_t>(num_groups), 1.0 / num_groups), eta};
}

GroupDroStep loss_groupdro(const Var& per_sample_losses, std::span<const int> group_ids, const GroupDroState& state) {
  const Tensor& losses = per_sample_losses.value();
  if (losses.size() != group_ids.size()) {
    throw DimensionError(std::to_string(group_ids.size()) + " group ids for " + std::to_string(losses.size()) +
                         " per-sample losses");
  }
  const std::size_t groups = state.weights.size();
  std::vector<double> totals(groups, 0.0);
  std::vector<std::size_t> counts(groups, 0);
  for (std::size_t i = 0; i < group_ids.size(); ++i) {
    const int g = group_ids[i];
    if (g < 0 || static_cast<std::size_t>(g) >= groups) {
      throw ParameterError("group id " + std::to_string(g) + " has no GroupDRO weight");
    }
    totals[static_cast<std::size_t>(g)] += losses[i];
    ++counts[static_cast<std::size_t>(g)];
  }

  GroupDroStep step{{}, state, std::vector<double>(groups, 0.0)};
  double norm = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    if (counts[g] > 0) {
      step.group_losses[g] = totals[g] / static_cast<double>(counts[g]);
      step.state.weights[g] *= std::exp(state.eta * step.group_losses[g]);
    }
    norm += step.state.weights[g];
  }
  for (auto& w : step.state.weights) w /= norm;

  // sum_g w_g * mean_{i in g} l_i == sum_i (w_{g_i} / n_{g_i}) * l_i
  std::vector<double> coeff(group_ids.size());
  for (std::size_t i = 0; i < group_ids.size(); ++i) {
    const auto g = static_cast<std::size_t>(group_ids[i]);
    coeff[i] = step.state.weights[g] / static_cast<double>(counts[g]);
  }
  step.loss = sum(mul(per_sample_losses, per_sample_losses.tape().constant(Tensor(losses.shape(), std::move(coeff)))));
  return step;
}

std::vector<std::size_t> jtt_identify(const MlpModel& model, const GroupedDataset& train) {
  if (train.empty()) throw ParameterError("JTT identification needs a nonempty training set");
  const auto pred = predict(model, train.features());
  std::vector<std::size_t> errors;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (pred[i] != train.labels()[i]) errors.push_back(i);
  }
  return errors;
}

std::vector<double> jtt_weights(std::span<const std::size_t> error_set, double lambda_up, std::size_t n) {
  if (!(lambda_up >= 1.0)) throw ParameterError("lambda_up must be at least 1");
  std::vector<double> w(n, 1.0);
  for (auto i : error_set) {
    if (i >= n) throw ParameterError("error-set index " + std::to_string(i) + " out of range");
    w[i] = lambda_up;
  }
  return w;
}

// --- LwF ----------------------------------------------------------------------

LwfCache::LwfCache(double temperature, std::vector<std::size_t> indices, Tensor targets)
    : temperature_(temperature), indices_(std::move(indices)), targets_(std::move(targets)) {
  if (!(temperature_ > 0.0)) throw ParameterError("LwF temperature must be positive");
  if (targets_.rank() != 2 || targets_.rows() != indices_.size()) {
    throw DimensionError("LwF cache needs one target row per index");
  }
  for (std::size_t r = 0; r < indices_.size(); ++r) row_.emplace(indices_[r], r);
}

std::optional<std::size_t> LwfCache::row_of(std::size_t dataset_index) const {
  const auto it = row_.find(dataset_index);
  if (it == row_.end()) return std::nullopt;
  return it->second;
}

Tensor LwfCache::target_rows(std::span<const std::size_t> rows) const {
  const std::size_t c = targets_.cols();
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (auto r : rows) {
    const auto row = targets_.data().subspan(r * c, c);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), c}, std::move(out));
}

LwfCache build_lwf_cache(const ModelSnapshot& snap, const GroupedDataset& dataset,
                         std::span<const std::size_t> best_indices, double temperature) {
  if (best_indices.empty()) {
    throw ValidationError("LwF cache needs at least one best-group sample; the group partition is degenerate");
  }
  const MlpModel frozen = restore(snap);
  const Tensor logits = forward(frozen, dataset.feature_rows(best_indices));
  return LwfCache(temperature, {best_indices.begin(), best_indices.end()}, softmax_temp(logits, temperature));
}

Var loss_lwf(Tape& tape, const Var& logits_best, const Tensor& cached_targets, double temperature) {
  if (!logits_best.valid()) return tape.constant(Tensor::scalar(0.0));
  const Tensor& z = logits_best.value();
  if (z.shape() != cached_targets.shape()) {
    throw DimensionError("LwF: logits " + shape_to_string(z.shape()) + " vs cached targets " +
                         shape_to_string(cached_targets.shape()));
  }
  std::vector<double> log_target(cached_targets.size());
  for (std::size_t i = 0; i < log_target.size(); ++i) {
    log_target[i] = std::log(std::max(cached_targets[i], kTargetFloor));
  }
  const Var q_star = tape.constant(cached_targets);
  const Var log_q_star = tape.constant(Tensor(z.shape(), std::move(log_target)));
  const Var log_q = log_softmax_temp(logits_best, temperature);
  const Var kl_total = sum(mul(q_star, sub(log_q_star, log_q)));
  return scale(kl_total, 1.0 / static_cast<double>(z.rows()));
}

// --- EWC ----------------------------------------------------------------------

std::vector<double> fisher_diag(const MlpModel& model, const GroupedDataset& dataset,
                                std::span<const std::size_t> best_indices) {
  if (best_indices.empty()) {
    throw ValidationError("Fisher estimation needs at least one best-group sample; the group partition is degenerate");
  }
  const std::size_t layers = model.num_layers();
  std::vector<std::vector<double>> acc;
  for (const auto& p : model.parameters()) acc.emplace_back(p.size(), 0.0);

  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < best_indices.size(); start += kChunk) {
    const auto chunk = best_indices.subspan(start, std::min(kChunk, best_indices.size() - start));
    const std::size_t m = chunk.size();

    // Forward, keeping each layer's input and pre-activation.
    std::vector<Tensor> inputs{dataset.feature_rows(chunk)};
    std::vector<Tensor> pre;
    for (std::size_t l = 0; l < layers; ++l) {
      Tensor z = matmul(inputs.back(), model.weight(l));
      auto zd = z.mutable_data();
      const auto b = model.bias(l).data();
      for (std::size_t i = 0; i < zd.size(); ++i) zd[i] += b[i % b.size()];
      pre.push_back(z);
      if (l + 1 < layers) {
        for (auto& v : z.mutable_data()) v = v > 0.0 ? v : 0.0;
        inputs.push_back(std::move(z));
      }
    }

    // delta = d log p(y_hat | x) / d logits = onehot(y_hat) - softmax(logits)
    const Tensor probs = softmax_temp(pre.back(), 1.0);
    const std::size_t c = probs.cols();
    std::vector<double> delta(m * c);
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = probs.data().subspan(i * c, c);
      const auto y_hat = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      for (std::size_t j = 0; j < c; ++j) delta[i * c + j] = (j == y_hat ? 1.0 : 0.0) - row[j];
    }

    for (std::size_t l = layers; l-- > 0;) {
      const Tensor& h = inputs[l];
      const std::size_t fan_in = h.cols(), fan_out = model.weight(l).cols();
      auto& fw = acc[2 * l];
      auto& fb = acc[2 * l + 1];
      // Per-sample dW = h_i^T delta_i, so sum_i dW^2 = (h^2)^T (delta^2).
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t q = 0; q < fan_out; ++q) {
          const double d2 = delta[i * fan_out + q] * delta[i * fan_out + q];
          fb[q] += d2;
          if (d2 == 0.0) continue;
          for (std::size_t p = 0; p < fan_in; ++p) {
            const double hv = h.data()[i * fan_in + p];
            fw[p * fan_out + q] += hv * hv * d2;
          }
        }
      }
      if (l == 0) break;
      // Back through W_l and the ReLU of the previous layer.
      const auto w = model.weight(l).data();
      const auto z_prev = pre[l - 1].data();
      std::vector<double> next(m * fan_in, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < fan_in; ++p) {
          if (!(z_prev[i * fan_in + p] > 0.0)) continue;
          double s = 0.0;
          for (std::size_t q = 0; q < fan_out; ++q) s += delta[i * fan_out + q] * w[p * fan_out + q];
          next[i * fan_in + p] = s;
        }
      }
      delta = std::move(next);
    }
  }

  std::vector<double> flat;
  flat.reserve(model.parameter_count());
  const double inv = 1.0 / static_cast<double>(best_indices.size());
  for (const auto& a : acc) {
    for (double v : a) flat.push_back(v * inv);
  }
  return flat;
}

Var loss_ewc(const BoundModel& bound, const EwcState& state) {
  const MlpModel& model = *bound.model;
  const std::size_t count = model.parameter_count();
  if (state.theta_star.size() != count || state.fisher.size() != count) {
    throw DimensionError("EWC state holds " + std::to_string(state.theta_star.size()) + "/" +
                         std::to_string(state.fisher.size()) + " values, model has " + std::to_string(count));
  }
  Tape& tape = bound.params.front().tape();
  const auto offsets = parameter_offsets(model);
  Var total;
  for (std::size_t k = 0; k < bound.params.size(); ++k) {
    const Var& p = bound.params[k];
    const auto& shape = p.value().shape();
    const auto n = static_cast<std::ptrdiff_t>(p.value().size());
    const auto at = static_cast<std::ptrdiff_t>(offsets[k]);
    const Var anchor = tape.constant(Tensor(shape, {state.theta_star.begin() + at, state.theta_star.begin() + at + n}));
    const Var fisher = tape.constant(Tensor(shape, {state.fisher.begin() + at, state.fisher.begin() + at + n}));
    const Var term = sum(mul(fisher, square(sub(p, anchor))));
    total = total.valid() ? add(total, term) : term;
  }
  return scale(total, 0.5);
}

double ewc_penalty(std::span<const double> theta, const EwcState& state) {
  if (theta.size() != state.theta_star.size() || theta.size() != state.fisher.size()) {
    throw DimensionError("EWC: parameter vector length does not match state");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double d = theta[j] - state.theta_star[j];
    total += state.fisher[j] * d * d;
  }
  return 0.5 * total;
}

Var combine(const Var& bm_loss, const Var& cl_loss, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be nonnegative");
  if (lambda == 0.0) return bm_loss;
  return add(bm_loss, scale(cl_loss, lambda));
}

}  // namespace bmcl
