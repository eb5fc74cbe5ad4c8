#include "bmcl/trainer.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <random>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

enum SeedStream : std::uint64_t { kErmSampler = 1, kBmSampler = 2 };

using BatchLoss = std::function<Var(Tape&, const BoundModel&, const Batch&)>;

struct PhaseOptions {
  std::size_t epochs = 0;
  bool early_stopping = false;
  std::size_t epoch_offset = 0;
  int stage = 1;
};

PhaseResult run_phase(const MlpModel& initial, const GroupedDataset& val,
                      const TrainConfig& config, BatchSampler& sampler, const BatchLoss& batch_loss,
                      const PhaseOptions& opts) {
  MlpModel model = initial;
  SgdState sgd = SgdState::zeros_like(model);
  PhaseResult result{model, model, 0, false, {}};
  double best_worst = -1.0;
  std::size_t since_best = 0;

  for (std::size_t e = 0; e < opts.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = opts.epoch_offset + e + 1;
    rec.stage = opts.stage;
    for (const auto& batch : sampler.next_epoch()) {
      Tape tape;
      const BoundModel bound = bind(tape, model);
      const Var loss = batch_loss(tape, bound, batch);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(rec.epoch));
      }
      rec.batch_losses.push_back(value);
      sgd_step(model, bound.gradients(tape.backward(loss)), sgd, config.lr, config.momentum, config.weight_decay);
    }
    double total = 0.0;
    for (double v : rec.batch_losses) total += v;
    rec.mean_loss = rec.batch_losses.empty() ? 0.0 : total / static_cast<double>(rec.batch_losses.size());

    const GroupMetrics vm = evaluate(model, val);
    rec.val_group_acc = vm.per_group_acc;
    rec.val_worst_acc = vm.worst_acc;
    rec.val_balanced_acc = vm.balanced_acc;
    result.history.epochs.push_back(std::move(rec));

    if (vm.worst_acc > best_worst) {
      best_worst = vm.worst_acc;
      result.selected_model = model;
      result.selected_epoch = opts.epoch_offset + e + 1;
      since_best = 0;
    } else if (++since_best >= config.patience && opts.early_stopping) {
      result.stopped_early = true;
      break;
    }
  }
  result.final_model = std::move(model);
  return result;
}

std::vector<double> jtt_sample_weights(const DataSplits& data, const TrainConfig& config) {
  const std::size_t id_epochs = config.method.jtt_id_epochs ? config.method.jtt_id_epochs : config.epochs;
  TrainConfig id_config = config;
  id_config.epochs = id_epochs;
  // Identification: plain ERM from the run's initialization, trained to the end of its budget.
  PhaseOptions opts{id_epochs, false, 0, 1};
  UniformSampler sampler(data.train.size(), config.batch_size, derive_seed(config.seed, kErmSampler));
  const BatchLoss erm = [&](Tape& tape, const BoundModel& bound, const Batch& batch) {
    const Var logits = forward(bound, tape.constant(data.train.feature_rows(batch)));
    std::vector<int> y;
    for (auto i : batch) y.push_back(data.train.labels()[i]);
    return loss_erm(logits, y);
  };
  const auto id = run_phase(MlpModel::init(config.architecture), data.val, id_config, sampler, erm, opts);
  const auto errors = jtt_identify(id.final_model, data.train);
  return jtt_weights(errors, config.method.lambda_up, data.train.size());
}

RunResult finish(const DataSplits& data, RunResult run, const PhaseResult& phase) {
  run.history.epochs.insert(run.history.epochs.end(), phase.history.epochs.begin(), phase.history.epochs.end());
  run.selected_epoch = phase.selected_epoch;
  run.model = phase.selected_model;
  run.val_metrics = evaluate(run.model, data.val);
  run.test_metrics = evaluate(run.model, data.test);
  return run;
}

void check_data(const DataSplits& data, const TrainConfig& config) {
  validate(config);
  for (const auto* ds : {&data.train, &data.val, &data.test}) {
    if (ds->empty()) throw ValidationError("train, validation and test splits must be nonempty");
    if (ds->feature_dim() != config.architecture.input_dim) {
      throw DimensionError("data has " + std::to_string(ds->feature_dim()) + " features, model expects " +
                           std::to_string(config.architecture.input_dim));
    }
    if (static_cast<std::size_t>(ds->num_labels()) != config.architecture.num_classes) {
      throw DimensionError("data has " + std::to_string(ds->num_labels()) + " labels, model predicts " +
                           std::to_string(config.architecture.num_classes) + " classes");
    }
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t{out[0]} << 32) | out[1];
}

void validate(const TrainConfig& c) {
  validate(c.architecture);
  validate(c.method);
  if (c.epochs == 0) throw ParameterError("epochs must be at least 1");
  if (!(c.lr >= 0.0)) throw ParameterError("learning rate must be nonnegative");
  if (c.stage2_lr && !(*c.stage2_lr >= 0.0)) throw ParameterError("stage-2 learning rate must be nonnegative");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw ParameterError("weight decay must be nonnegative");
  if (c.batch_size == 0) throw ParameterError("batch size must be at least 1");
  if (c.patience == 0) throw ParameterError("patience must be at least 1");
  if (!(c.rho > 0.0 && c.rho < 1.0)) throw ParameterError("rho must lie in (0, 1)");
}

std::size_t stage1_epochs(const TrainConfig& c) {
  const auto floor_epochs = static_cast<std::size_t>(std::floor(c.rho * static_cast<double>(c.epochs)));
  return std::max<std::size_t>(1, floor_epochs);
}

SgdState SgdState::zeros_like(const MlpModel& model) {
  SgdState s;
  for (const auto& p : model.parameters()) s.velocity.push_back(Tensor::zeros(p.shape()));
  return s;
}

void sgd_step(MlpModel& model, const std::vector<Tensor>& grads, SgdState& state, double lr, double momentum,
              double weight_decay) {
  auto& params = model.parameters();
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: expected " + std::to_string(params.size()) + " gradient/velocity tensors");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape() || state.velocity[k].shape() != params[k].shape()) {
      throw DimensionError("sgd_step: shape mismatch for parameter " + std::to_string(k) + ": " +
                           shape_to_string(params[k].shape()) + " vs " + shape_to_string(grads[k].shape()));
    }
    auto theta = params[k].mutable_data();
    auto v = state.velocity[k].mutable_data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double decayed = g[i] + weight_decay * theta[i];
      v[i] = momentum * v[i] + decayed;
      theta[i] -= lr * v[i];
    }
  }
}

GroupPartition partition_from_accuracies(std::span<const double> alpha) {
  if (alpha.empty()) throw ValidationError("cannot partition an empty set of groups");
  GroupPartition p;
  p.alpha.assign(alpha.begin(), alpha.end());
  double total = 0.0;
  for (double a : alpha) total += a;
  p.tau = total / static_cast<double>(alpha.size());
  // A rounded mean of equal accuracies can land a few ulps below them, so
  // anything within kTieTolerance of tau counts as a tie (and goes to worst).
  for (std::size_t g = 0; g < alpha.size(); ++g) {
    (alpha[g] > p.tau + kTieTolerance ? p.best : p.worst).push_back(static_cast<int>(g));
  }
  if (p.best.empty()) {
    throw ValidationError(
        "group partition is degenerate: no group has accuracy above the balanced accuracy, so there is no "
        "best-group set to preserve; train stage 1 longer (raise rho) or use a plain bias-mitigation method");
  }
  return p;
}

GroupPartition partition_groups(const MlpModel& model, const GroupedDataset& val) {
  const GroupMetrics m = evaluate(model, val);
  return partition_from_accuracies(m.per_group_acc);
}

GroupMetrics evaluate(const MlpModel& model, const GroupedDataset& ds) {
  const auto pred = predict(model, ds.features());
  return compute_group_metrics(pred, ds.labels(), ds.group_ids(), ds.num_groups());
}

PhaseResult train_erm(const MlpModel& initial, const GroupedDataset& train, const GroupedDataset& val,
                      const TrainConfig& config, std::size_t epoch_budget) {
  validate(config);
  if (epoch_budget == 0) throw ParameterError("train_erm: epoch budget must be at least 1");
  UniformSampler sampler(train.size(), config.batch_size, derive_seed(config.seed, kErmSampler));
  const BatchLoss erm = [&](Tape& tape, const BoundModel& bound, const Batch& batch) {
    const Var logits = forward(bound, tape.constant(train.feature_rows(batch)));
    std::vector<int> y;
    y.reserve(batch.size());
    for (auto i : batch) y.push_back(train.labels()[i]);
    return loss_erm(logits, y);
  };
  const PhaseOptions opts{epoch_budget, epoch_budget == config.epochs, 0, 1};
  return run_phase(initial, val, config, sampler, erm, opts);
}

PhaseResult finetune_bm(const MlpModel& initial, const DataSplits& data, const TrainConfig& config,
                        std::size_t epochs, const ClState* cl, std::size_t epoch_offset, int stage) {
  validate(config);
  const MethodSpec& method = config.method;
  const GroupedDataset& train = data.train;
  const auto seed = derive_seed(config.seed, kBmSampler);

  std::unique_ptr<BatchSampler> sampler;
  if (method.bm == BmKind::ReSample) {
    sampler = std::make_unique<GroupBalancedSampler>(train.group_ids(), train.num_groups(), config.batch_size, seed);
  } else {
    sampler = std::make_unique<UniformSampler>(train.size(), config.batch_size, seed);
  }

  std::vector<double> jtt_w;
  if (method.bm == BmKind::Jtt) jtt_w = jtt_sample_weights(data, config);
  GroupDroState dro = GroupDroState::uniform(train.num_groups(), method.eta);
  const bool use_cl = cl != nullptr && cl->kind != ClKind::None;
  if (use_cl && ((cl->kind == ClKind::LwF && !cl->lwf) || (cl->kind == ClKind::Ewc && !cl->ewc))) {
    throw ContractError("continual-learning state is missing its payload");
  }

  const BatchLoss loss_fn = [&](Tape& tape, const BoundModel& bound, const Batch& batch) {
    const Var logits = forward(bound, tape.constant(train.feature_rows(batch)));
    std::vector<int> y, g;
    y.reserve(batch.size());
    g.reserve(batch.size());
    for (auto i : batch) {
      y.push_back(train.labels()[i]);
      g.push_back(train.group_ids()[i]);
    }

    Var bm;
    switch (method.bm) {
      case BmKind::Erm:
      case BmKind::ReSample:
        bm = loss_erm(logits, y);
        break;
      case BmKind::GroupDro: {
        auto step = loss_groupdro(cross_entropy_per_sample(logits, y), g, dro);
        dro = std::move(step.state);
        bm = step.loss;
        break;
      }
      case BmKind::Jtt: {
        std::vector<double> w;
        w.reserve(batch.size());
        for (auto i : batch) w.push_back(jtt_w[i]);
        bm = loss_weighted_ce(logits, y, w);
        break;
      }
    }
    if (!use_cl) return bm;

    Var reg;
    if (cl->kind == ClKind::LwF) {
      const LwfCache& cache = *cl->lwf;
      std::vector<std::size_t> positions, rows;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (auto r = cache.row_of(batch[k])) {
          positions.push_back(k);
          rows.push_back(*r);
        }
      }
      const Var best_logits = positions.empty() ? Var{} : gather_rows(logits, positions);
      reg = loss_lwf(tape, best_logits, positions.empty() ? Tensor{} : cache.target_rows(rows), cache.temperature());
    } else {
      reg = loss_ewc(bound, *cl->ewc);
    }
    return combine(bm, reg, method.effective_lambda());
  };

  const PhaseOptions opts{epochs, true, epoch_offset, stage};
  return run_phase(initial, data.val, config, *sampler, loss_fn, opts);
}

RunResult train_bmcl(const DataSplits& data, const TrainConfig& config) {
  check_data(data, config);
  if (config.method.cl == ClKind::None && config.method.bm == BmKind::Erm) {
    throw ParameterError("train_bmcl needs a bias-mitigation or continual-learning method; use train_erm for ERM");
  }
  RunResult run;
  run.stage1_epochs = stage1_epochs(config);
  run.stage2_epochs = config.epochs - std::min(config.epochs, run.stage1_epochs);

  const MlpModel init = MlpModel::init(config.architecture);
  PhaseResult stage1 = train_erm(init, data.train, data.val, config, run.stage1_epochs);
  const MlpModel& anchor = stage1.final_model;
  run.stage1_snapshot = snapshot(anchor);
  run.partition = partition_groups(anchor, data.val);

  const auto best_train = data.train.indices_in_groups(run.partition->best);
  ClState cl;
  cl.kind = config.method.cl;
  if (cl.kind == ClKind::LwF) {
    cl.lwf = build_lwf_cache(*run.stage1_snapshot, data.train, best_train, config.method.temperature);
  } else if (cl.kind == ClKind::Ewc) {
    cl.ewc = EwcState{run.stage1_snapshot->flat, fisher_diag(anchor, data.train, best_train)};
  }

  run.history = std::move(stage1.history);
  if (run.stage2_epochs == 0) {
    PhaseResult none{anchor, anchor, run.stage1_epochs, false, {}};
    return finish(data, std::move(run), none);
  }
  TrainConfig stage2_config = config;
  stage2_config.lr = config.stage2_lr.value_or(config.lr);
  const PhaseResult stage2 = finetune_bm(anchor, data, stage2_config, run.stage2_epochs, &cl, run.stage1_epochs, 2);
  return finish(data, std::move(run), stage2);
}

RunResult train_baseline_bm(const DataSplits& data, const TrainConfig& config) {
  check_data(data, config);
  if (config.method.cl != ClKind::None) {
    throw ParameterError("train_baseline_bm runs plain bias mitigation; " + config.method.name() +
                         " has a continual-learning term");
  }
  const MlpModel init = MlpModel::init(config.architecture);
  RunResult run;
  if (config.method.bm == BmKind::Erm) {
    return finish(data, std::move(run), train_erm(init, data.train, data.val, config, config.epochs));
  }
  return finish(data, std::move(run), finetune_bm(init, data, config, config.epochs, nullptr, 0, 1));
}

RunResult train_method(const DataSplits& data, const TrainConfig& config) {
  return config.method.cl == ClKind::None ? train_baseline_bm(data, config) : train_bmcl(data, config);
}

}  // namespace bmcl
