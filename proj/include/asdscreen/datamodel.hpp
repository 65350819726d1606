#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "asdscreen/errors.hpp"

namespace asdscreen {

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using FeatureVector = VecX<double>;

enum class AdosModule { Module2, Module3 };
enum class Label { ASD, NonASD, Unlabeled };
enum class DatasetKind { Tabular, Image };

std::string_view to_string(AdosModule m);
std::string_view to_string(Label l);
std::string_view to_string(DatasetKind k);

AdosModule parse_ados_module(std::string_view s);

// Number of classifying features analysed per ADOS module (5 or 10).
std::size_t feature_count(AdosModule m);

/// One patient's categorical ADOS item scores.
///
/// Raw scores live in the two ADOS bands {0,1,2,3} (severity) and {7,8,9}
/// (not applicable / other). Construction rejects anything else and checks
/// the per-module feature count.
class AdosRecord {
 public:
  AdosRecord(std::string subject_id, AdosModule module, std::map<std::string, int> scores,
             Label label);

  const std::string& subject_id() const noexcept { return subject_id_; }
  AdosModule module() const noexcept { return module_; }
  const std::map<std::string, int>& scores() const noexcept { return scores_; }
  Label label() const noexcept { return label_; }

  bool operator==(const AdosRecord&) const = default;

 private:
  std::string subject_id_;
  AdosModule module_;
  std::map<std::string, int> scores_;
  Label label_;
};

/// H x W x C image, row-major channel-last, pixel values in [0,1].
class ImageTensor {
 public:
  ImageTensor(int height, int width, int channels, VecX<double> data);
  ImageTensor(int height, int width, int channels);  // zero-filled

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  Eigen::Index size() const noexcept { return data_.size(); }
  const VecX<double>& data() const noexcept { return data_; }

  double at(int y, int x, int c) const {
    return data_[(static_cast<Eigen::Index>(y) * width_ + x) * channels_ + c];
  }

  bool same_shape(const ImageTensor& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  bool operator==(const ImageTensor& o) const {
    return same_shape(o) && data_ == o.data_;
  }

 private:
  int height_;
  int width_;
  int channels_;
  VecX<double> data_;
};

struct Sample {
  std::string subject_id;
  std::variant<FeatureVector, ImageTensor> input;
  Label label = Label::Unlabeled;
};

struct Provenance {
  std::size_t n_total = 0;
  std::size_t n_asd = 0;
  std::size_t n_nonasd = 0;
  // Set when extra (e.g. home-video) images were folded into a validation set.
  bool validation_augmented = false;

  bool operator==(const Provenance&) const = default;
};

Provenance count_labels(std::span<const Sample> samples);

/// Immutable labelled collection of either feature vectors or images.
/// Provenance is always recomputed from the samples, never trusted from input.
class Dataset {
 public:
  Dataset(DatasetKind kind, std::vector<Sample> samples, bool validation_augmented = false);

  DatasetKind kind() const noexcept { return kind_; }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const Provenance& provenance() const noexcept { return provenance_; }

  // Tabular only: common feature dimension (0 for an empty dataset).
  Eigen::Index feature_dim() const;
  // Tabular only: n x d design matrix, one row per sample.
  MatX<double> feature_matrix() const;

  // Image only: the shared image shape of the samples.
  const ImageTensor& first_image() const;

  Dataset subset(std::span<const std::size_t> indices) const;

 private:
  DatasetKind kind_;
  std::vector<Sample> samples_;
  Provenance provenance_;
};

/// Recode a raw ADOS item score: 0..3 stay, 7/8/9 carry no severity and map to 0.
int recode_score(int raw);

bool is_valid_raw_score(int raw) noexcept;

/// Recoded scores divided by 3, in codebook order.
FeatureVector encode_record(const AdosRecord& record, std::span<const std::string> codebook);

/// Build a tabular dataset from records, encoding each against the codebook.
Dataset records_to_dataset(std::span<const AdosRecord> records,
                           std::span<const std::string> codebook);

struct SplitOptions {
  bool stratified = false;
};

struct SplitPair {
  Dataset train;
  Dataset test;
  std::uint64_t seed;
  double ratio;
};

/// Seeded shuffle into floor(ratio * n) training samples and the rest for test.
SplitPair split_dataset(const Dataset& d, double ratio, std::uint64_t seed,
                        SplitOptions options = {});

/// Uniform integer in [0, bound) by rejection sampling on raw engine output,
/// so the result only depends on the engine, not on the standard library.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);

/// Uniform double in [0,1) from the top 53 bits of one engine draw.
double unit_uniform(std::mt19937_64& rng);

/// Fisher-Yates permutation of 0..n-1 driven by a seeded mt19937_64.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace asdscreen
