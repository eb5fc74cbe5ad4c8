#include "bmcl/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bmcl/error.hpp"

namespace bmcl {

namespace {

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ParameterError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
  }
}

void check_sigma(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ParameterError("sigma must be positive, got " + std::to_string(sigma));
  }
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_field(std::string_view text, std::size_t line, const char* what) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw ParseError("line " + std::to_string(line) + ": cannot parse " + what + " '" + std::string(text) + "'",
                     line);
  }
  return value;
}

}  // namespace

// --- GroupedDataset ---------------------------------------------------------

GroupedDataset::GroupedDataset(Tensor features, std::vector<int> labels, std::vector<int> attributes,
                               std::vector<int> group_ids, int num_labels, int num_attributes,
                               std::size_t feature_dim)
    : features_(std::move(features)),
      dim_(feature_dim),
      labels_(std::move(labels)),
      attributes_(std::move(attributes)),
      group_ids_(std::move(group_ids)),
      num_labels_(num_labels),
      num_attributes_(num_attributes) {
  if (num_labels_ < 1 || num_attributes_ < 1) {
    throw ParameterError("dataset needs at least one label and one attribute value");
  }
  const std::size_t n = labels_.size();
  if (attributes_.size() != n || group_ids_.size() != n) {
    throw DimensionError("labels, attributes and group ids must have equal length");
  }
  if (n > 0) {
    if (features_.rank() != 2 || features_.rows() != n) {
      throw DimensionError("features " + shape_to_string(features_.shape()) + " do not match " +
                           std::to_string(n) + " samples");
    }
    dim_ = features_.cols();
  } else if (features_.size() != 0) {
    throw DimensionError("empty dataset with non-empty features");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels_[i] < 0 || labels_[i] >= num_labels_) {
      throw ValidationError("sample " + std::to_string(i) + ": label " + std::to_string(labels_[i]) +
                            " out of range");
    }
    if (attributes_[i] < 0 || attributes_[i] >= num_attributes_) {
      throw ValidationError("sample " + std::to_string(i) + ": attribute " + std::to_string(attributes_[i]) +
                            " out of range");
    }
    const int expected = attributes_[i] * num_labels_ + labels_[i];
    if (group_ids_[i] != expected) {
      throw ValidationError("sample " + std::to_string(i) + ": group_id " + std::to_string(group_ids_[i]) +
                            " != attribute * num_labels + label = " + std::to_string(expected));
    }
  }
}

GroupedDataset GroupedDataset::from_labels(Tensor features, std::vector<int> labels, std::vector<int> attributes,
                                           int num_labels, int num_attributes) {
  std::vector<int> groups(labels.size());
  for (std::size_t i = 0; i < labels.size() && i < attributes.size(); ++i) {
    groups[i] = attributes[i] * num_labels + labels[i];
  }
  return GroupedDataset(std::move(features), std::move(labels), std::move(attributes), std::move(groups),
                        num_labels, num_attributes);
}

std::vector<std::size_t> GroupedDataset::group_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_groups()), 0);
  for (int g : group_ids_) ++counts[static_cast<std::size_t>(g)];
  return counts;
}

std::vector<std::size_t> GroupedDataset::indices_in_groups(std::span<const int> groups) const {
  std::vector<bool> wanted(static_cast<std::size_t>(num_groups()), false);
  for (int g : groups) {
    if (g < 0 || g >= num_groups()) throw ParameterError("group " + std::to_string(g) + " out of range");
    wanted[static_cast<std::size_t>(g)] = true;
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (wanted[static_cast<std::size_t>(group_ids_[i])]) out.push_back(i);
  }
  return out;
}

Tensor GroupedDataset::feature_rows(std::span<const std::size_t> indices) const {
  std::vector<double> rows;
  rows.reserve(indices.size() * dim_);
  for (auto i : indices) {
    if (i >= size()) throw DimensionError("sample index " + std::to_string(i) + " out of range");
    const auto row = features_.data().subspan(i * dim_, dim_);
    rows.insert(rows.end(), row.begin(), row.end());
  }
  return Tensor({indices.size(), dim_}, std::move(rows));
}

GroupedDataset GroupedDataset::subset(std::span<const std::size_t> indices) const {
  std::vector<int> labels, attributes, groups;
  labels.reserve(indices.size());
  attributes.reserve(indices.size());
  groups.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw DimensionError("sample index " + std::to_string(i) + " out of range");
    labels.push_back(labels_[i]);
    attributes.push_back(attributes_[i]);
    groups.push_back(group_ids_[i]);
  }
  Tensor feats = indices.empty() ? Tensor{} : feature_rows(indices);
  return GroupedDataset(std::move(feats), std::move(labels), std::move(attributes), std::move(groups), num_labels_,
                        num_attributes_, dim_);
}

// --- generators -----------------------------------------------------------

GroupedDataset gen_spurious(const SpuriousConfig& c) {
  check_probability(c.p_corr, "p_corr");
  check_probability(c.label_balance, "label_balance");
  check_sigma(c.sigma);
  if (c.n == 0) throw ParameterError("gen_spurious: n must be positive");

  std::mt19937_64 rng(c.seed);
  std::bernoulli_distribution label_draw(c.label_balance);
  std::bernoulli_distribution agree_draw(c.p_corr);
  std::normal_distribution<double> noise(0.0, c.sigma);

  const std::size_t d = 2 + c.noise_dims;
  std::vector<double> feats;
  feats.reserve(c.n * d);
  std::vector<int> labels(c.n), attrs(c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    const int y = label_draw(rng) ? 1 : 0;
    const int a = agree_draw(rng) ? y : 1 - y;
    labels[i] = y;
    attrs[i] = a;
    feats.push_back((y == 1 ? 0.5 : -0.5) * c.core_gap + noise(rng));
    feats.push_back((a == 1 ? 0.5 : -0.5) * c.spur_gap + noise(rng));
    for (std::size_t k = 0; k < c.noise_dims; ++k) feats.push_back(noise(rng));
  }
  return GroupedDataset::from_labels(Tensor({c.n, d}, std::move(feats)), std::move(labels), std::move(attrs), 2, 2);
}

GroupedDataset gen_imbalanced(const ImbalanceConfig& c) {
  check_sigma(c.sigma);
  if (c.n == 0) throw ParameterError("gen_imbalanced: n must be positive");
  if (c.num_labels < 2 || c.num_attributes < 1) {
    throw ParameterError("gen_imbalanced: need at least two labels and one attribute value");
  }
  const auto groups = static_cast<std::size_t>(c.num_labels * c.num_attributes);
  if (c.proportions.size() != groups) {
    throw ParameterError("gen_imbalanced: expected " + std::to_string(groups) + " proportions, got " +
                         std::to_string(c.proportions.size()));
  }
  double total = 0.0;
  for (double p : c.proportions) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ParameterError("gen_imbalanced: proportions must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ParameterError("gen_imbalanced: proportions sum to " + format_double(total) + ", expected 1");
  }

  std::mt19937_64 rng(c.seed);
  std::discrete_distribution<int> group_draw(c.proportions.begin(), c.proportions.end());
  std::normal_distribution<double> noise(0.0, c.sigma);
  const double centre = 0.5 * static_cast<double>(c.num_labels - 1);

  const std::size_t d = 1 + c.noise_dims;
  std::vector<double> feats;
  feats.reserve(c.n * d);
  std::vector<int> labels(c.n), attrs(c.n);
  for (std::size_t i = 0; i < c.n; ++i) {
    const int g = group_draw(rng);
    labels[i] = g % c.num_labels;
    attrs[i] = g / c.num_labels;
    feats.push_back((labels[i] - centre) * c.core_gap + noise(rng));
    for (std::size_t k = 0; k < c.noise_dims; ++k) feats.push_back(noise(rng));
  }
  return GroupedDataset::from_labels(Tensor({c.n, d}, std::move(feats)), std::move(labels), std::move(attrs),
                                     c.num_labels, c.num_attributes);
}

// --- split ----------------------------------------------------------------

std::array<std::vector<std::size_t>, 3> split_indices(const GroupedDataset& ds, const SplitFractions& f,
                                                      std::uint64_t seed, std::vector<std::string>* warnings) {
  const double fr[3] = {f.train, f.val, f.test};
  for (double v : fr) {
    if (!(v > 0.0)) throw ParameterError("split fractions must be positive");
  }
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");

  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(ds.num_groups()));
  for (std::size_t i = 0; i < ds.size(); ++i) members[static_cast<std::size_t>(ds.group_ids()[i])].push_back(i);

  std::mt19937_64 rng(seed);
  std::array<std::vector<std::size_t>, 3> out;
  for (std::size_t g = 0; g < members.size(); ++g) {
    auto& idx = members[g];
    if (idx.empty()) continue;
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto s = idx.size();
    std::array<std::size_t, 3> take{};
    if (s < 3) {
      if (warnings) {
        warnings->push_back("group " + std::to_string(g) + " has " + std::to_string(s) +
                            " samples, fewer than the 3 splits; assigned to train first");
      }
      for (std::size_t k = 0; k < s; ++k) take[k] = 1;
    } else {
      auto share = [&](double frac) {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(frac * static_cast<double>(s))));
      };
      take[1] = share(f.val);
      take[2] = share(f.test);
      while (take[1] + take[2] >= s) --take[take[1] >= take[2] ? 1 : 2];
      take[0] = s - take[1] - take[2];
    }
    std::size_t at = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      out[k].insert(out[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(at),
                    idx.begin() + static_cast<std::ptrdiff_t>(at + take[k]));
      at += take[k];
    }
  }
  for (auto& part : out) std::sort(part.begin(), part.end());
  return out;
}

DatasetSplit split(const GroupedDataset& ds, const SplitFractions& fractions, std::uint64_t seed) {
  DatasetSplit result;
  const auto parts = split_indices(ds, fractions, seed, &result.warnings);
  result.train = ds.subset(parts[0]);
  result.val = ds.subset(parts[1]);
  result.test = ds.subset(parts[2]);
  return result;
}

// --- samplers -------------------------------------------------------------

UniformSampler::UniformSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : order_(dataset_size), batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  if (dataset_size == 0) throw ParameterError("cannot sample from an empty dataset");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::vector<Batch> UniformSampler::next_epoch() {
  std::shuffle(order_.begin(), order_.end(), rng_);
  std::vector<Batch> batches;
  for (std::size_t at = 0; at < order_.size(); at += batch_size_) {
    const auto end = std::min(order_.size(), at + batch_size_);
    batches.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(at),
                         order_.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

GroupBalancedSampler::GroupBalancedSampler(std::span<const int> group_ids, int num_groups, std::size_t batch_size,
                                           std::uint64_t seed)
    : members_(static_cast<std::size_t>(num_groups)),
      dataset_size_(group_ids.size()),
      batch_size_(batch_size),
      rng_(seed) {
  if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
  if (group_ids.empty()) throw ParameterError("cannot sample from an empty dataset");
  for (std::size_t i = 0; i < group_ids.size(); ++i) {
    const int g = group_ids[i];
    if (g < 0 || g >= num_groups) throw ParameterError("group id " + std::to_string(g) + " out of range");
    members_[static_cast<std::size_t>(g)].push_back(i);
  }
  for (std::size_t g = 0; g < members_.size(); ++g) {
    if (members_[g].empty()) {
      throw ValidationError("group-balanced sampling requires every group to be nonempty; group " +
                            std::to_string(g) + " has no samples");
    }
  }
}

std::size_t GroupBalancedSampler::draw() {
  std::uniform_int_distribution<std::size_t> pick_group(0, members_.size() - 1);
  const auto& group = members_[pick_group(rng_)];
  std::uniform_int_distribution<std::size_t> pick_member(0, group.size() - 1);
  return group[pick_member(rng_)];
}

std::vector<Batch> GroupBalancedSampler::next_epoch() {
  const std::size_t count = (dataset_size_ + batch_size_ - 1) / batch_size_;
  std::vector<Batch> batches(count);
  for (auto& b : batches) {
    b.resize(batch_size_);
    for (auto& i : b) i = draw();
  }
  return batches;
}

// --- CSV ------------------------------------------------------------------

void save_csv(const GroupedDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t d = ds.feature_dim();
  for (std::size_t k = 0; k < d; ++k) out << 'f' << k << ',';
  out << "label,attribute,group_id\n";
  const auto feats = ds.features().data();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) out << format_double(feats[i * d + k]) << ',';
    out << ds.labels()[i] << ',' << ds.attributes()[i] << ',' << ds.group_ids()[i] << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GroupedDataset load_csv(const std::filesystem::path& path, std::optional<int> num_labels,
                        std::optional<int> num_attributes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw ParseError(path.string() + ": empty file, expected a header", 1);

  const auto header = split_fields(line);
  if (header.size() < 4 || header[header.size() - 3] != "label" || header[header.size() - 2] != "attribute" ||
      header.back() != "group_id") {
    throw ParseError(path.string() + ": header must be f0..f{d-1},label,attribute,group_id", 1);
  }
  const std::size_t d = header.size() - 3;
  for (std::size_t k = 0; k < d; ++k) {
    if (header[k] != "f" + std::to_string(k)) {
      throw ParseError(path.string() + ": unexpected feature column '" + std::string(header[k]) + "'", 1);
    }
  }

  std::vector<double> feats;
  std::vector<int> labels, attrs, groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != d + 3) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + " has " +
                           std::to_string(fields.size()) + " fields, expected " + std::to_string(d + 3),
                       line_no);
    }
    for (std::size_t k = 0; k < d; ++k) feats.push_back(parse_field<double>(fields[k], line_no, "feature"));
    labels.push_back(parse_field<int>(fields[d], line_no, "label"));
    attrs.push_back(parse_field<int>(fields[d + 1], line_no, "attribute"));
    groups.push_back(parse_field<int>(fields[d + 2], line_no, "group_id"));
  }
  if (labels.empty()) throw ParseError(path.string() + ": no data rows", line_no);

  const int ny = num_labels.value_or(*std::max_element(labels.begin(), labels.end()) + 1);
  const int na = num_attributes.value_or(*std::max_element(attrs.begin(), attrs.end()) + 1);
  const std::size_t n = labels.size();
  return GroupedDataset(Tensor({n, d}, std::move(feats)), std::move(labels), std::move(attrs), std::move(groups), ny,
                        na);
}

}  // namespace bmcl
