#pragma once

// Test-side oracles shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "bmcl/datasets.hpp"
#include "bmcl/model.hpp"
#include "bmcl/tensor.hpp"

namespace bmcl::testing {

using LossFn = std::function<Var(Tape&, const BoundModel&)>;

struct GradCheckResult {
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
};

/// |a - n| / max(|a|, |n|, 1e-6); the floor keeps exact zeros from dividing by 0.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline double loss_value(const MlpModel& model, const LossFn& loss) {
  Tape tape;
  const BoundModel bound = bind(tape, model);
  return loss(tape, bound).value().item();
}

/// Compares autodiff gradients with central differences on `coordinates`
/// distinct random parameter coordinates.
inline GradCheckResult grad_check(const MlpModel& model, const LossFn& loss, std::size_t coordinates,
                                  std::uint64_t seed, double h = 1e-5) {
  Tape tape;
  const BoundModel bound = bind(tape, model);
  const Var out = loss(tape, bound);
  std::vector<double> analytic;
  for (const auto& g : bound.gradients(tape.backward(out))) analytic.insert(analytic.end(), g.data().begin(), g.data().end());

  std::vector<std::size_t> coords(analytic.size());
  std::iota(coords.begin(), coords.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(std::min(coordinates, coords.size()));

  const auto offsets = parameter_offsets(model);
  auto perturbed = [&](std::size_t j, double delta) {
    MlpModel m = model;
    const auto k = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), j) - offsets.begin() - 1);
    m.parameters()[k].mutable_data()[j - offsets[k]] += delta;
    return loss_value(m, loss);
  };
  GradCheckResult r;
  for (auto j : coords) {
    const double numeric = (perturbed(j, h) - perturbed(j, -h)) / (2 * h);
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[j], numeric));
    ++r.coordinates;
  }
  return r;
}

/// Random features with labels/attributes drawn uniformly; every group present
/// when n is comfortably larger than the group count.
inline GroupedDataset random_dataset(std::size_t n, std::size_t dim, int labels, int attributes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> x(n * dim);
  for (auto& v : x) v = normal(rng);
  std::vector<int> y(n), a(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % static_cast<std::size_t>(labels));
    a[i] = static_cast<int>((i / static_cast<std::size_t>(labels)) % static_cast<std::size_t>(attributes));
  }
  return GroupedDataset::from_labels(Tensor({n, dim}, std::move(x)), std::move(y), std::move(a), labels, attributes);
}

/// Validation set with one label value (so group id == attribute) and a linear
/// two-class model whose logits are (x, 0): a sample counts as correct exactly
/// when its feature is positive. Group g has accuracy correct[g] / total[g].
struct ControlledAccuracy {
  GroupedDataset val;
  MlpModel model;
};

inline ControlledAccuracy controlled_accuracy(const std::vector<std::size_t>& correct,
                                              const std::vector<std::size_t>& total) {
  std::vector<double> x;
  std::vector<int> a;
  for (std::size_t g = 0; g < correct.size(); ++g) {
    for (std::size_t i = 0; i < total[g]; ++i) {
      x.push_back(i < correct[g] ? 1.0 : -1.0);
      a.push_back(static_cast<int>(g));
    }
  }
  const std::size_t n = x.size();
  ControlledAccuracy c{GroupedDataset::from_labels(Tensor({n, 1}, std::move(x)), std::vector<int>(n, 0), std::move(a),
                                                   1, static_cast<int>(correct.size())),
                       MlpModel(MlpConfig{1, {}, 2, 0})};
  c.model.parameters()[0].mutable_data()[0] = 1.0;
  return c;
}

}  // namespace bmcl::testing
