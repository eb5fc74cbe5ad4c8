#include "bmcl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

std::vector<std::size_t> layer_dims(const MlpConfig& config) {
  std::vector<std::size_t> dims{config.input_dim};
  dims.insert(dims.end(), config.hidden_widths.begin(), config.hidden_widths.end());
  dims.push_back(config.num_classes);
  return dims;
}

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what) { return get(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect(std::span<const std::uint8_t> magic) {
    if (remaining() < magic.size() || !std::equal(magic.begin(), magic.end(), bytes_.begin() + pos_)) {
      throw ParseError("checkpoint: bad magic bytes at offset " + std::to_string(pos_), pos_);
    }
    pos_ += magic.size();
  }

 private:
  std::uint64_t get(int width, const char* what) {
    if (remaining() < static_cast<std::size_t>(width)) {
      throw ParseError(std::string("checkpoint: truncated while reading ") + what + " at offset " +
                           std::to_string(pos_),
                       pos_);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += width;
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kMagic[4] = {'B', 'M', 'C', 'L'};
constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 32;

}  // namespace

void validate(const MlpConfig& config) {
  if (config.input_dim == 0) throw ParameterError("MlpConfig: input_dim must be positive");
  if (config.num_classes < 2) throw ParameterError("MlpConfig: num_classes must be at least 2");
  for (auto w : config.hidden_widths) {
    if (w == 0) throw ParameterError("MlpConfig: hidden widths must be positive");
  }
}

std::size_t parameter_count(const MlpConfig& config) {
  const auto dims = layer_dims(config);
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) total += (dims[l] + 1) * dims[l + 1];
  return total;
}

MlpModel::MlpModel(MlpConfig config) : config_(std::move(config)) {
  validate(config_);
  const auto dims = layer_dims(config_);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    params_.push_back(Tensor::zeros({dims[l], dims[l + 1]}));
    params_.push_back(Tensor::zeros({dims[l + 1]}));
  }
}

MlpModel MlpModel::init(const MlpConfig& config) {
  MlpModel model(config);
  std::mt19937_64 rng(config.init_seed);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    Tensor& w = model.params_[2 * l];
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(w.rows())));
    for (auto& v : w.mutable_data()) v = normal(rng);
  }
  return model;
}

std::size_t MlpModel::parameter_count() const noexcept {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.size();
  return total;
}

std::vector<double> MlpModel::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

std::vector<std::size_t> parameter_offsets(const MlpModel& model) {
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : model.parameters()) {
    offsets.push_back(at);
    at += p.size();
  }
  return offsets;
}

std::vector<Tensor> BoundModel::gradients(const Gradients& g) const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(g.wrt(p));
  return out;
}

BoundModel bind(Tape& tape, const MlpModel& model, bool requires_grad) {
  BoundModel bound{&model, {}};
  for (const auto& p : model.parameters()) {
    bound.params.push_back(requires_grad ? tape.leaf(p) : tape.constant(p));
  }
  return bound;
}

Var forward(const BoundModel& bound, const Var& batch) {
  const auto& cfg = bound.model->config();
  const Tensor& x = batch.value();
  if (x.rank() != 2 || x.cols() != cfg.input_dim) {
    throw DimensionError("forward: batch " + shape_to_string(x.shape()) + " does not match input_dim " +
                         std::to_string(cfg.input_dim));
  }
  Var h = batch;
  const std::size_t layers = bound.params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_bias(matmul(h, bound.params[2 * l]), bound.params[2 * l + 1]);
    if (l + 1 < layers) h = relu(h);
  }
  return h;
}

Tensor forward(const MlpModel& model, const Tensor& batch) {
  Tape tape;
  const auto bound = bind(tape, model, false);
  return forward(bound, tape.constant(batch)).value();
}

std::vector<int> predict(const MlpModel& model, const Tensor& batch) {
  const Tensor logits = forward(model, batch);
  const std::size_t n = logits.rows(), c = logits.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(i * c, c);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

ModelSnapshot snapshot(const MlpModel& model) { return {model.config(), model.flatten()}; }

MlpModel restore(const ModelSnapshot& snap) {
  MlpModel model(snap.layout);
  if (snap.flat.size() != model.parameter_count()) {
    throw DimensionError("restore: snapshot holds " + std::to_string(snap.flat.size()) +
                         " values, layout needs " + std::to_string(model.parameter_count()));
  }
  auto it = snap.flat.begin();
  for (auto& p : model.parameters()) {
    auto dst = p.mutable_data();
    std::copy_n(it, dst.size(), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  }
  return model;
}

std::vector<std::uint8_t> encode_checkpoint(const MlpModel& model) {
  const auto& cfg = model.config();
  ByteWriter w;
  w.raw(reinterpret_cast<const char*>(kMagic), 4);
  w.u32(kCheckpointVersion);
  w.u64(cfg.input_dim);
  w.u64(cfg.num_classes);
  w.u64(cfg.hidden_widths.size());
  for (auto h : cfg.hidden_widths) w.u64(h);
  w.u64(cfg.init_seed);
  w.u64(model.parameter_count());
  for (double v : model.flatten()) w.f64(v);
  return w.take();
}

MlpModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect(kMagic);
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatVersionError("checkpoint: format version " + std::to_string(version) +
                             " is incompatible with supported version " +
                             std::to_string(kCheckpointVersion) + " (offset " +
                             std::to_string(version_at) + ")");
  }
  MlpConfig cfg;
  auto dim = [&](const char* what) {
    const auto at = r.offset();
    const auto v = r.u64(what);
    if (v == 0 || v >= kMaxDim) {
      throw ParseError(std::string("checkpoint: implausible ") + what + " at offset " + std::to_string(at), at);
    }
    return static_cast<std::size_t>(v);
  };
  cfg.input_dim = dim("input_dim");
  cfg.num_classes = dim("num_classes");
  const auto depth_at = r.offset();
  const auto depth = r.u64("hidden layer count");
  if (depth > 1024) throw ParseError("checkpoint: implausible hidden layer count", depth_at);
  for (std::uint64_t i = 0; i < depth; ++i) cfg.hidden_widths.push_back(dim("hidden width"));
  cfg.init_seed = r.u64("init_seed");
  const auto count_at = r.offset();
  const auto count = r.u64("parameter count");
  if (count != parameter_count(cfg)) {
    throw ParseError("checkpoint: parameter count " + std::to_string(count) + " does not match layout",
                     count_at);
  }
  if (r.remaining() != count * 8) {
    if (r.remaining() < count * 8) {
      throw ParseError("checkpoint: truncated payload at offset " + std::to_string(r.offset()), r.offset());
    }
    throw ParseError("checkpoint: trailing bytes after payload", r.offset() + count * 8);
  }
  ModelSnapshot snap{cfg, {}};
  snap.flat.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) snap.flat.push_back(r.f64("parameter"));
  return restore(snap);
}

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace bmcl
