#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "bmcl/error.hpp"
#include "bmcl/model.hpp"

using namespace bmcl;

namespace {

MlpConfig small_config(std::uint64_t seed = 1) { return MlpConfig{4, {8, 5}, 3, seed}; }

Tensor random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(n * d);
  for (auto& x : v) x = normal(rng);
  return Tensor({n, d}, std::move(v));
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("bmcl_test_model_" + name);
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
  CHECK(MlpModel::init(small_config(7)) == MlpModel::init(small_config(7)));
  CHECK_FALSE(MlpModel::init(small_config(7)) == MlpModel::init(small_config(8)));
}

TEST_CASE("init follows the He scheme with zero biases") {
  const MlpModel m = MlpModel::init(MlpConfig{400, {300}, 2, 3});
  double ss = 0.0;
  for (double w : m.weight(0).data()) ss += w * w;
  const double var = ss / static_cast<double>(m.weight(0).size());
  CHECK(var == doctest::Approx(2.0 / 400).epsilon(0.03));
  for (double b : m.bias(0).data()) CHECK(b == 0.0);
  for (double b : m.bias(1).data()) CHECK(b == 0.0);
}

TEST_CASE("layer shapes and parameter count") {
  const MlpModel m = MlpModel::init(small_config());
  CHECK(m.num_layers() == 3);
  CHECK(m.weight(0).shape() == Shape{4, 8});
  CHECK(m.weight(1).shape() == Shape{8, 5});
  CHECK(m.weight(2).shape() == Shape{5, 3});
  CHECK(m.bias(2).shape() == Shape{3});
  const std::size_t analytic = (4 + 1) * 8 + (8 + 1) * 5 + (5 + 1) * 3;
  CHECK(m.parameter_count() == analytic);
  CHECK(parameter_count(small_config()) == analytic);

  const MlpModel linear = MlpModel::init(MlpConfig{6, {}, 2, 0});
  CHECK(linear.num_layers() == 1);
  CHECK(linear.weight(0).shape() == Shape{6, 2});
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(validate(MlpConfig{0, {}, 2, 0}), ParameterError);
  CHECK_THROWS_AS(validate(MlpConfig{3, {}, 1, 0}), ParameterError);
  CHECK_THROWS_AS(validate(MlpConfig{3, {0}, 2, 0}), ParameterError);
}

TEST_CASE("forward") {
  const MlpModel m = MlpModel::init(small_config());
  SUBCASE("shape contract") {
    const MlpModel two = MlpModel::init(MlpConfig{4, {16}, 2, 0});
    CHECK(forward(two, random_batch(32, 4, 1)).shape() == Shape{32, 2});
  }
  SUBCASE("zero linear model gives zero logits") {
    const MlpModel zero(MlpConfig{4, {}, 2, 0});
    const Tensor out = forward(zero, random_batch(5, 4, 2));
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("dimension mismatch") { CHECK_THROWS_AS(forward(m, random_batch(2, 5, 3)), DimensionError); }
  SUBCASE("taped and untaped passes agree") {
    const Tensor x = random_batch(6, 4, 4);
    Tape tape;
    const BoundModel bound = bind(tape, m);
    CHECK(forward(bound, tape.constant(x)).value() == forward(m, x));
  }
  SUBCASE("hand-computed two-layer network") {
    MlpModel h(MlpConfig{2, {2}, 2, 0});
    auto& p = h.parameters();
    p[0] = Tensor::matrix({{1, -1}, {2, 1}});  // W0
    p[1] = Tensor::vector({0.5, -4});          // b0
    p[2] = Tensor::matrix({{1, 0}, {-1, 2}});  // W1
    p[3] = Tensor::vector({0, 1});             // b1
    // x = (1, 1): pre = (3.5, -4), relu = (3.5, 0), logits = (3.5, 1).
    CHECK(forward(h, Tensor::matrix({{1, 1}})) == Tensor::matrix({{3.5, 1}}));
    CHECK(predict(h, Tensor::matrix({{1, 1}})) == std::vector<int>{0});
  }
}

TEST_CASE("snapshot round trip") {
  MlpModel m = MlpModel::init(small_config());
  const ModelSnapshot snap = snapshot(m);
  CHECK(snap.flat.size() == m.parameter_count());
  CHECK(snap.flat == m.flatten());
  CHECK(restore(snap) == m);
  const Tensor x = random_batch(3, 4, 9);
  CHECK(forward(restore(snap), x) == forward(m, x));

  m.parameters()[0].mutable_data()[0] += 1.0;
  CHECK(restore(snap) == MlpModel::init(small_config()));

  ModelSnapshot bad = snap;
  bad.flat.pop_back();
  CHECK_THROWS_AS(restore(bad), DimensionError);
}

TEST_CASE("parameter offsets index the flat vector") {
  const MlpModel m = MlpModel::init(small_config());
  const auto offsets = parameter_offsets(m);
  const auto flat = m.flatten();
  REQUIRE(offsets.size() == m.parameters().size());
  for (std::size_t k = 0; k < offsets.size(); ++k) {
    CHECK(flat[offsets[k]] == m.parameters()[k][0]);
  }
}

TEST_CASE("checkpoint round trip") {
  const MlpModel m = MlpModel::init(small_config(21));
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(m, path);
  CHECK(load_checkpoint(path) == m);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint layout: magic, version, little-endian payload") {
  const MlpModel m = MlpModel::init(MlpConfig{1, {}, 2, 0});
  const auto bytes = encode_checkpoint(m);
  REQUIRE(bytes.size() > 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BMCL");
  CHECK(bytes[4] == kCheckpointVersion);
  CHECK(bytes[5] == 0);
  CHECK(decode_checkpoint(bytes) == m);
}

TEST_CASE("corrupt checkpoints") {
  const auto bytes = encode_checkpoint(MlpModel::init(small_config()));
  SUBCASE("truncated") {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
    try {
      decode_checkpoint(cut);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.position() > 0);
      CHECK(e.position() <= cut.size());
    }
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    try {
      decode_checkpoint(bad);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.position() == 0);
    }
  }
  SUBCASE("version mismatch") {
    auto bad = bytes;
    bad[4] = kCheckpointVersion + 1;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatVersionError);
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(bad), ParseError);
  }
  SUBCASE("missing file") { CHECK_THROWS(load_checkpoint(temp_file("does_not_exist.ckpt"))); }
}
