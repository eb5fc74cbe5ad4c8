#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "bmcl/error.hpp"
#include "bmcl/methods.hpp"
#include "support.hpp"

using namespace bmcl;

namespace {

Var logits_of(Tape& tape, std::initializer_list<std::initializer_list<double>> rows) {
  return tape.leaf(Tensor::matrix(rows));
}

double erm_value(std::initializer_list<std::initializer_list<double>> rows, const std::vector<int>& labels) {
  Tape tape;
  return loss_erm(logits_of(tape, rows), labels).value().item();
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  std::vector<double> v(r * c);
  for (auto& x : v) x = normal(rng);
  return Tensor({r, c}, std::move(v));
}

/// Per-sample autodiff oracle for the Fisher diagonal: one tape per sample,
/// gradient of log p(argmax | x), squared and averaged.
std::vector<double> fisher_oracle(const MlpModel& model, const GroupedDataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<double> total(model.parameter_count(), 0.0);
  for (auto i : idx) {
    const std::vector<std::size_t> one{i};
    const Tensor x = ds.feature_rows(one);
    const auto y_hat = predict(model, x);
    Tape tape;
    const BoundModel bound = bind(tape, model);
    const Var logp = sum(pick(log_softmax_temp(forward(bound, tape.constant(x)), 1.0), y_hat));
    std::size_t j = 0;
    for (const auto& g : bound.gradients(tape.backward(logp))) {
      for (double v : g.data()) total[j++] += v * v;
    }
  }
  for (auto& v : total) v /= static_cast<double>(idx.size());
  return total;
}

}  // namespace

TEST_CASE("ERM cross-entropy") {
  CHECK(erm_value({{0, 0}}, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(erm_value({{1, 0}}, {0}) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
  CHECK(erm_value({{1, 0}}, {0}) == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(erm_value({{60, 0}}, {0}) < 1e-20);
  // Mean over rows.
  CHECK(erm_value({{0, 0}, {1, 0}}, {1, 0}) ==
        doctest::Approx((std::log(2.0) + std::log1p(std::exp(-1.0))) / 2).epsilon(1e-14));

  Tape tape;
  CHECK_THROWS_AS(loss_erm(logits_of(tape, {{0, 0}}), std::vector<int>{2}), ParameterError);
  CHECK_THROWS_AS(loss_erm(logits_of(tape, {{0, 0}}), std::vector<int>{0, 1}), DimensionError);
}

TEST_CASE("weighted cross-entropy") {
  const std::vector<int> y{0, 1, 1, 0};
  auto ce = [&](const std::vector<double>& w) {
    Tape tape;
    return loss_weighted_ce(logits_of(tape, {{1, 0}, {0.5, 2}, {3, -1}, {0, 0}}), y, w).value().item();
  };
  Tape tape;
  const Tensor per =
      cross_entropy_per_sample(logits_of(tape, {{1, 0}, {0.5, 2}, {3, -1}, {0, 0}}), y).value();
  CHECK(ce({1, 1, 1, 1}) == doctest::Approx((per[0] + per[1] + per[2] + per[3]) / 4).epsilon(1e-14));
  CHECK(ce({1, 6, 1, 6}) == doctest::Approx((per[0] + 6 * per[1] + per[2] + 6 * per[3]) / 14).epsilon(1e-14));
  CHECK(ce({2, 2, 2, 2}) == doctest::Approx(ce({1, 1, 1, 1})).epsilon(1e-15));
  CHECK_THROWS_AS(ce({0, 0, 0, 0}), ParameterError);
  CHECK_THROWS_AS(ce({1, 1}), DimensionError);
}

TEST_CASE("GroupDRO reweighting") {
  SUBCASE("one exponentiated-gradient step") {
    Tape tape;
    const Var losses = tape.leaf(Tensor::vector({1.0, 0.0}));
    const std::vector<int> g{0, 1};
    const GroupDroStep step = loss_groupdro(losses, g, GroupDroState::uniform(2, 1.0));
    const double e = std::exp(1.0);
    CHECK(step.state.weights[0] == doctest::Approx(e / (e + 1)).epsilon(1e-14));
    CHECK(step.state.weights[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
    CHECK(step.state.weights[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(step.state.weights[1] == doctest::Approx(0.2689).epsilon(1e-4));
    CHECK(step.loss.value().item() == doctest::Approx(e / (e + 1)).epsilon(1e-14));
    CHECK(step.group_losses == std::vector<double>{1.0, 0.0});
  }
  SUBCASE("equal group losses leave the weights unchanged") {
    Tape tape;
    const Var losses = tape.leaf(Tensor::vector({0.4, 0.4, 0.4, 0.4, 0.4}));
    const std::vector<int> g{0, 1, 2, 2, 1};
    const GroupDroState start{{0.1, 0.3, 0.6}, 0.5};
    const GroupDroStep step = loss_groupdro(losses, g, start);
    for (std::size_t k = 0; k < 3; ++k) CHECK(step.state.weights[k] == doctest::Approx(start.weights[k]).epsilon(1e-14));
  }
  SUBCASE("weights stay on the simplex") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> loss(0.0, 3.0);
    std::uniform_int_distribution<int> group(0, 3);
    GroupDroState state = GroupDroState::uniform(4, 0.1);
    for (int it = 0; it < 200; ++it) {
      Tape tape;
      std::vector<double> l(8);
      std::vector<int> g(8);
      for (std::size_t i = 0; i < 8; ++i) {
        l[i] = loss(rng);
        g[i] = group(rng);
      }
      state = loss_groupdro(tape.leaf(Tensor::vector(l)), g, state).state;
      double total = 0.0;
      for (double w : state.weights) {
        CHECK(w >= 0.0);
        total += w;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
  SUBCASE("absent groups keep their mass before renormalization") {
    Tape tape;
    const std::vector<int> g{0, 0};
    const GroupDroStep step = loss_groupdro(tape.leaf(Tensor::vector({1.0, 1.0})), g, GroupDroState::uniform(2, 1.0));
    const double e = std::exp(1.0);
    CHECK(step.state.weights[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
    CHECK(step.group_losses[1] == 0.0);
  }
  SUBCASE("all weight on one group gives that group's mean loss") {
    Tape tape;
    const std::vector<int> g{0, 1, 0};
    const GroupDroStep step = loss_groupdro(tape.leaf(Tensor::vector({2.0, 5.0, 4.0})), g, GroupDroState{{1.0, 0.0}, 0.1});
    CHECK(step.loss.value().item() == doctest::Approx(3.0).epsilon(1e-14));
  }
  SUBCASE("invalid group id") {
    Tape tape;
    const std::vector<int> g{0, 2};
    CHECK_THROWS_AS(loss_groupdro(tape.leaf(Tensor::vector({1.0, 1.0})), g, GroupDroState::uniform(2, 0.1)),
                    ParameterError);
  }
}

TEST_CASE("JTT") {
  SUBCASE("weights") {
    const std::vector<std::size_t> errors{1, 3};
    CHECK(jtt_weights(errors, 6.0, 4) == std::vector<double>{1, 6, 1, 6});
    CHECK(jtt_weights({}, 6.0, 3) == std::vector<double>{1, 1, 1});
    CHECK_THROWS_AS(jtt_weights(errors, 0.5, 4), ParameterError);
    CHECK_THROWS_AS(jtt_weights(errors, 2.0, 3), ParameterError);
  }
  SUBCASE("lambda_up = 1 reduces to ERM") {
    const std::vector<int> y{1, 0, 0};
    const auto w = jtt_weights(std::vector<std::size_t>{0, 2}, 1.0, 3);
    Tape tape;
    const Var z = logits_of(tape, {{0.3, -1}, {2, 0.1}, {0, 0.7}});
    CHECK(loss_weighted_ce(z, y, w).value().item() == doctest::Approx(loss_erm(z, y).value().item()).epsilon(1e-15));
  }
  SUBCASE("identification returns the misclassified samples") {
    const auto c = testing::controlled_accuracy({3, 1}, {4, 2});
    // Positive features are predicted as label 0, which every sample carries.
    CHECK(jtt_identify(c.model, c.val) == std::vector<std::size_t>{3, 5});
  }
}

TEST_CASE("LwF distillation") {
  SUBCASE("closed-form KL") {
    Tape tape;
    const double v = loss_lwf(tape, logits_of(tape, {{0, 0}}), Tensor::matrix({{0.9, 0.1}}), 1.0).value().item();
    CHECK(v == doctest::Approx(0.9 * std::log(1.8) + 0.1 * std::log(0.2)).epsilon(1e-14));
    CHECK(v == doctest::Approx(0.3681).epsilon(1e-3));
  }
  SUBCASE("one-hot target on uniform prediction") {
    Tape tape;
    const double v = loss_lwf(tape, logits_of(tape, {{0, 0}}), Tensor::matrix({{1, 0}}), 3.0).value().item();
    CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("zero when the prediction reproduces the cached targets") {
    const Tensor z = random_matrix(6, 3, 4, 2.0);
    const Tensor q = softmax_temp(z, 2.0);
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 3; ++c) total += q.at(r, c);
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
    Tape tape;
    const Var logits = tape.leaf(z);
    const Var loss = loss_lwf(tape, logits, q, 2.0);
    CHECK(std::abs(loss.value().item()) <= 1e-14);
    const Gradients grads = tape.backward(loss);
    for (double g : grads.wrt(logits).data()) CHECK(std::abs(g) <= 1e-14);
  }
  SUBCASE("empty best set contributes an exact zero") {
    Tape tape;
    const Var zero = loss_lwf(tape, Var{}, Tensor{}, 2.0);
    CHECK(zero.value().item() == 0.0);
  }
  SUBCASE("zero targets stay finite") {
    Tape tape;
    const double v = loss_lwf(tape, logits_of(tape, {{5, -5}}), Tensor::matrix({{0, 1}}), 1.0).value().item();
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(-std::log(1 / (1 + std::exp(10.0)))).epsilon(1e-12));
  }
  SUBCASE("cache from a frozen snapshot") {
    const auto ds = testing::random_dataset(20, 3, 2, 2, 5);
    const MlpModel m = MlpModel::init(MlpConfig{3, {4}, 2, 2});
    const std::vector<std::size_t> best{1, 4, 7};
    const LwfCache cache = build_lwf_cache(snapshot(m), ds, best, 2.0);
    CHECK(cache.size() == 3);
    CHECK(cache.row_of(4) == std::optional<std::size_t>(1));
    CHECK_FALSE(cache.row_of(2).has_value());
    CHECK(cache.targets() == softmax_temp(forward(m, ds.feature_rows(best)), 2.0));
    CHECK_THROWS_AS(build_lwf_cache(snapshot(m), ds, {}, 2.0), ValidationError);
  }
}

TEST_CASE("Fisher diagonal") {
  const auto ds = testing::random_dataset(40, 3, 2, 2, 8);
  const MlpModel m = MlpModel::init(MlpConfig{3, {6, 4}, 2, 3});
  SUBCASE("matches the per-sample autodiff oracle") {
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto fast = fisher_diag(m, ds, idx);
    const auto slow = fisher_oracle(m, ds, idx);
    REQUIRE(fast.size() == slow.size());
    for (std::size_t j = 0; j < fast.size(); ++j) {
      CHECK(std::abs(fast[j] - slow[j]) <= 1e-10 * std::max(1.0, std::abs(slow[j])));
      CHECK(fast[j] >= 0.0);
    }
  }
  SUBCASE("single sample") {
    const std::vector<std::size_t> one{7};
    const auto fast = fisher_diag(m, ds, one);
    const auto slow = fisher_oracle(m, ds, one);
    for (std::size_t j = 0; j < fast.size(); ++j) CHECK(std::abs(fast[j] - slow[j]) <= 1e-10);
  }
  SUBCASE("empty best set") { CHECK_THROWS_AS(fisher_diag(m, ds, {}), ValidationError); }
}

TEST_CASE("EWC penalty") {
  SUBCASE("closed form") {
    const EwcState s{{0.0, 1.0}, {2.0, 0.5}};
    CHECK(ewc_penalty(std::vector<double>{3.0, 1.0}, s) == 9.0);
    CHECK(ewc_penalty(std::vector<double>{6.0, 1.0}, s) == 36.0);
    CHECK(ewc_penalty(std::vector<double>{0.0, 1.0}, s) == 0.0);
    CHECK_THROWS_AS(ewc_penalty(std::vector<double>{1.0}, s), DimensionError);
  }
  SUBCASE("doubling the displacement quadruples the penalty") {
    const MlpModel m = MlpModel::init(MlpConfig{3, {4}, 2, 1});
    const auto theta = m.flatten();
    EwcState s{theta, std::vector<double>(theta.size())};
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& f : s.fisher) f = u(rng);
    auto shifted = [&](double k) {
      std::vector<double> t = theta;
      for (std::size_t j = 0; j < t.size(); ++j) t[j] += k * (0.1 + 0.01 * static_cast<double>(j));
      return ewc_penalty(t, s);
    };
    CHECK(shifted(2.0) == doctest::Approx(4.0 * shifted(1.0)).epsilon(1e-13));
  }
  SUBCASE("taped penalty agrees and has zero gradient at the anchor") {
    const MlpModel m = MlpModel::init(MlpConfig{3, {4}, 2, 1});
    EwcState s{m.flatten(), std::vector<double>(m.parameter_count(), 0.7)};
    Tape tape;
    const BoundModel bound = bind(tape, m);
    const Var p = loss_ewc(bound, s);
    CHECK(p.value().item() == 0.0);
    for (const auto& g : bound.gradients(tape.backward(p))) {
      for (double v : g.data()) CHECK(v == 0.0);
    }
    MlpModel moved = m;
    moved.parameters()[0].mutable_data()[1] += 0.5;
    Tape t2;
    CHECK(loss_ewc(bind(t2, moved), s).value().item() ==
          doctest::Approx(ewc_penalty(moved.flatten(), s)).epsilon(1e-14));
  }
}

TEST_CASE("combine") {
  Tape tape;
  const Var bm = tape.leaf(Tensor::scalar(1.0));
  const Var cl = tape.leaf(Tensor::scalar(2.0));
  CHECK(combine(bm, cl, 0.5).value().item() == 2.0);
  CHECK(combine(bm, cl, 0.0).id() == bm.id());
  CHECK_THROWS_AS(combine(bm, cl, -1.0), ParameterError);
}

TEST_CASE("method names") {
  CHECK(parse_method_name("ERM") == MethodSpec{});
  const MethodSpec m = parse_method_name("GroupDRO-LwF");
  CHECK(m.bm == BmKind::GroupDro);
  CHECK(m.cl == ClKind::LwF);
  CHECK(m.name() == "GroupDRO-LwF");
  CHECK(parse_method_name("ReSample-EWC").name() == "ReSample-EWC");
  CHECK(parse_method_name("JTT").cl == ClKind::None);
  CHECK_THROWS_AS(parse_method_name("Mixup"), ParameterError);
  CHECK_THROWS_AS(parse_method_name("ERM-SI"), ParameterError);

  MethodSpec ewc = parse_method_name("GroupDRO-EWC");
  ewc.lambda = 2.0;
  CHECK(ewc.effective_lambda() == 2.0 * kEwcLambdaScale);
  MethodSpec bad;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(validate(bad), ParameterError);
}

TEST_CASE("loss gradients match finite differences") {
  const MlpModel m = MlpModel::init(MlpConfig{3, {5}, 3, 9});
  const Tensor x = random_matrix(7, 3, 10);
  const std::vector<int> y{0, 1, 2, 2, 1, 0, 1};
  const std::vector<int> g{0, 1, 1, 0, 2, 2, 0};
  const std::vector<double> w{1, 6, 1, 1, 6, 1, 1};
  const Tensor q = softmax_temp(random_matrix(7, 3, 11), 1.0);
  EwcState ewc{m.flatten(), std::vector<double>(m.parameter_count(), 0.3)};
  for (auto& v : ewc.theta_star) v += 0.05;
  // The online update reads the current losses; the objective differentiates
  // with the updated weights held fixed, and eta = 0 keeps them unchanged.
  const GroupDroState dro = [&] {
    Tape t;
    const Var ce = cross_entropy_per_sample(forward(bind(t, m), t.constant(x)), y);
    return GroupDroState{loss_groupdro(ce, g, GroupDroState::uniform(3, 0.5)).state.weights, 0.0};
  }();

  const std::vector<std::pair<std::string, testing::LossFn>> losses{
      {"erm", [&](Tape& t, const BoundModel& b) { return loss_erm(forward(b, t.constant(x)), y); }},
      {"weighted", [&](Tape& t, const BoundModel& b) { return loss_weighted_ce(forward(b, t.constant(x)), y, w); }},
      {"groupdro",
       [&](Tape& t, const BoundModel& b) {
         const Var ce = cross_entropy_per_sample(forward(b, t.constant(x)), y);
         return loss_groupdro(ce, g, dro).loss;
       }},
      {"lwf", [&](Tape& t, const BoundModel& b) { return loss_lwf(t, forward(b, t.constant(x)), q, 2.0); }},
      {"ewc", [&](Tape&, const BoundModel& b) { return loss_ewc(b, ewc); }},
  };
  for (const auto& [name, loss] : losses) {
    CAPTURE(name);
    const auto r = testing::grad_check(m, loss, 20, 3);
    CHECK(r.coordinates == 20);
    CHECK(r.max_rel_error <= 1e-5);
  }
}
