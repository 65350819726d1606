#include "asdscreen/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace asdscreen {

std::string_view to_string(AdosModule m) {
  return m == AdosModule::Module2 ? "Module2" : "Module3";
}

std::string_view to_string(Label l) {
  switch (l) {
    case Label::ASD: return "ASD";
    case Label::NonASD: return "NonASD";
    case Label::Unlabeled: break;
  }
  return "Unlabeled";
}

std::string_view to_string(DatasetKind k) {
  return k == DatasetKind::Tabular ? "tabular" : "image";
}

AdosModule parse_ados_module(std::string_view s) {
  if (s == "Module2" || s == "2") return AdosModule::Module2;
  if (s == "Module3" || s == "3") return AdosModule::Module3;
  throw ValidationError("unsupported ADOS module '" + std::string(s) +
                        "' (expected Module2 or Module3)");
}

std::size_t feature_count(AdosModule m) { return m == AdosModule::Module2 ? 5 : 10; }

bool is_valid_raw_score(int raw) noexcept {
  return (raw >= 0 && raw <= 3) || (raw >= 7 && raw <= 9);
}

int recode_score(int raw) {
  if (!is_valid_raw_score(raw)) {
    throw ValidationError("ADOS score " + std::to_string(raw) +
                          " is outside the bands 0-3 and 7-9");
  }
  return raw <= 3 ? raw : 0;
}

AdosRecord::AdosRecord(std::string subject_id, AdosModule module,
                       std::map<std::string, int> scores, Label label)
    : subject_id_(std::move(subject_id)),
      module_(module),
      scores_(std::move(scores)),
      label_(label) {
  for (const auto& [code, raw] : scores_) {
    if (!is_valid_raw_score(raw)) {
      throw ValidationError("subject '" + subject_id_ + "': score " + std::to_string(raw) +
                            " for " + code + " is outside the bands 0-3 and 7-9");
    }
  }
  if (scores_.size() != feature_count(module_)) {
    throw SchemaError("subject '" + subject_id_ + "': " + std::string(to_string(module_)) +
                      " records carry " + std::to_string(feature_count(module_)) +
                      " features, got " + std::to_string(scores_.size()));
  }
}

ImageTensor::ImageTensor(int height, int width, int channels, VecX<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw ValidationError("image dimensions must be positive");
  }
  const Eigen::Index expected = static_cast<Eigen::Index>(height) * width * channels;
  if (data_.size() != expected) {
    throw ValidationError("image data length " + std::to_string(data_.size()) +
                          " does not match " + std::to_string(expected));
  }
  for (Eigen::Index i = 0; i < data_.size(); ++i) {
    const double v = data_[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ValidationError("image pixel value outside [0,1] at index " + std::to_string(i));
    }
  }
}

ImageTensor::ImageTensor(int height, int width, int channels)
    : ImageTensor(height, width, channels,
                  VecX<double>::Zero(static_cast<Eigen::Index>(std::max(height, 0)) *
                                     std::max(width, 0) * std::max(channels, 0))) {}

Provenance count_labels(std::span<const Sample> samples) {
  Provenance p;
  p.n_total = samples.size();
  for (const auto& s : samples) {
    if (s.label == Label::ASD) ++p.n_asd;
    if (s.label == Label::NonASD) ++p.n_nonasd;
  }
  return p;
}

Dataset::Dataset(DatasetKind kind, std::vector<Sample> samples, bool validation_augmented)
    : kind_(kind), samples_(std::move(samples)) {
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& in = samples_[i].input;
    if (kind_ == DatasetKind::Tabular) {
      const auto* fv = std::get_if<FeatureVector>(&in);
      if (fv == nullptr) throw ValidationError("tabular dataset holds an image sample");
      if (fv->size() == 0) throw ValidationError("empty feature vector");
      if (!fv->allFinite()) {
        throw ValidationError("non-finite feature value in sample " + std::to_string(i));
      }
      if (fv->size() != std::get<FeatureVector>(samples_.front().input).size()) {
        throw SchemaError("feature dimension differs at sample " + std::to_string(i));
      }
    } else {
      const auto* img = std::get_if<ImageTensor>(&in);
      if (img == nullptr) throw ValidationError("image dataset holds a feature sample");
      if (!img->same_shape(std::get<ImageTensor>(samples_.front().input))) {
        throw SchemaError("image shape differs at sample " + std::to_string(i));
      }
    }
  }
  provenance_ = count_labels(samples_);
  provenance_.validation_augmented = validation_augmented;
}

Eigen::Index Dataset::feature_dim() const {
  if (kind_ != DatasetKind::Tabular) throw ValidationError("feature_dim on an image dataset");
  return samples_.empty() ? 0 : std::get<FeatureVector>(samples_.front().input).size();
}

MatX<double> Dataset::feature_matrix() const {
  const Eigen::Index d = feature_dim();
  MatX<double> x(static_cast<Eigen::Index>(samples_.size()), d);
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = std::get<FeatureVector>(samples_[i].input).transpose();
  }
  return x;
}

const ImageTensor& Dataset::first_image() const {
  if (kind_ != DatasetKind::Image || samples_.empty()) {
    throw ValidationError("dataset holds no images");
  }
  return std::get<ImageTensor>(samples_.front().input);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples_.at(i));
  return Dataset(kind_, std::move(out), provenance_.validation_augmented);
}

FeatureVector encode_record(const AdosRecord& record, std::span<const std::string> codebook) {
  std::vector<std::string> missing;
  std::vector<std::string> extra;
  const std::set<std::string> wanted(codebook.begin(), codebook.end());
  for (const auto& code : codebook) {
    if (!record.scores().contains(code)) missing.push_back(code);
  }
  for (const auto& [code, raw] : record.scores()) {
    if (!wanted.contains(code)) extra.push_back(code);
  }
  if (!missing.empty() || !extra.empty()) {
    std::ostringstream msg;
    msg << "subject '" << record.subject_id() << "' does not match the codebook;";
    if (!missing.empty()) {
      msg << " missing:";
      for (const auto& c : missing) msg << ' ' << c;
    }
    if (!extra.empty()) {
      msg << " extra:";
      for (const auto& c : extra) msg << ' ' << c;
    }
    throw SchemaError(msg.str());
  }
  FeatureVector v(static_cast<Eigen::Index>(codebook.size()));
  for (std::size_t i = 0; i < codebook.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] = recode_score(record.scores().at(codebook[i])) / 3.0;
  }
  return v;
}

Dataset records_to_dataset(std::span<const AdosRecord> records,
                           std::span<const std::string> codebook) {
  std::vector<Sample> samples;
  samples.reserve(records.size());
  for (const auto& r : records) {
    samples.push_back(Sample{r.subject_id(), encode_record(r, codebook), r.label()});
  }
  return Dataset(DatasetKind::Tabular, std::move(samples));
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound == 0) throw ValidationError("uniform_below: empty range");
  // Reject the tail so every residue is equally likely.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % bound;
}

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

SplitPair split_dataset(const Dataset& d, double ratio, std::uint64_t seed,
                        SplitOptions options) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ValidationError("split ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  const std::size_t n = d.size();
  if (n < 2) throw ValidationError("cannot split a dataset with fewer than 2 samples");
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));

  const auto perm = seeded_permutation(n, seed);
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;

  if (!options.stratified) {
    train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  } else {
    // Per-label groups in permuted order; quotas by floor then largest remainder
    // so the total still equals floor(ratio * n).
    std::map<Label, std::vector<std::size_t>> groups;
    for (std::size_t i : perm) groups[d.samples()[i].label].push_back(i);
    std::map<Label, std::size_t> quota;
    std::vector<std::pair<double, Label>> remainders;
    std::size_t assigned = 0;
    for (const auto& [label, idx] : groups) {
      const double exact = ratio * static_cast<double>(idx.size());
      quota[label] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[label];
      remainders.emplace_back(exact - std::floor(exact), label);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n_train && k < remainders.size(); ++k, ++assigned) {
      ++quota[remainders[k].second];
    }
    std::vector<bool> in_train(n, false);
    for (const auto& [label, idx] : groups) {
      for (std::size_t k = 0; k < quota[label]; ++k) in_train[idx[k]] = true;
    }
    for (std::size_t i : perm) (in_train[i] ? train_idx : test_idx).push_back(i);
  }

  return SplitPair{d.subset(train_idx), d.subset(test_idx), seed, ratio};
}

}  // namespace asdscreen
