#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asdscreen/datamodel.hpp"

namespace asdscreen {

/// Column layout of an ADOS export.
///
/// The dialect is deliberately small: comma separator, no quoting, LF or
/// CRLF line endings. An empty label cell reads as Unlabeled.
struct CsvSchema {
  std::string id_column = "id";
  std::string label_column = "label";
  std::vector<std::string> feature_columns;
  std::map<std::string, Label> label_encoding = {{"ASD", Label::ASD},
                                                 {"NonASD", Label::NonASD}};

  void validate() const;

  // id,label plus the default codebook of the module.
  static CsvSchema for_module(AdosModule module);
};

/// Feature codes used when none are supplied: five for Module 2, ten for Module 3.
std::vector<std::string> default_codebook(AdosModule module);

std::vector<AdosRecord> parse_ados_records(std::string_view text, const CsvSchema& schema,
                                           AdosModule module);

/// Parse and encode in one step; feature order follows schema.feature_columns.
Dataset parse_ados_csv(std::string_view text, const CsvSchema& schema, AdosModule module);

std::string serialize_ados_csv(std::span<const AdosRecord> records, const CsvSchema& schema);

/// Binary PGM (P5, one channel) or PPM (P6, three channels), maxval 255.
ImageTensor decode_image(std::span<const std::uint8_t> bytes);

/// Inverse of decode_image; pixels are rounded to the nearest of 256 levels.
std::vector<std::uint8_t> encode_image(const ImageTensor& image);

struct SynthesisConfig {
  std::size_t n_samples = 100;
  double asd_fraction = 0.5;
  std::size_t feature_count = 10;
  double class_separation = 1.0;
  std::uint64_t seed = 0;
  int image_height = 32;
  int image_width = 32;
  int image_channels = 3;

  std::size_t n_asd() const;
  void validate_tabular() const;
  void validate_image() const;
};

/// Label sequence shared by both generators, so tabular and image sets drawn
/// with the same (n, asd_fraction, seed) are paired subject by subject.
std::vector<Label> synth_labels(const SynthesisConfig& cfg);

/// Subject id of the i-th synthetic sample ("s000042").
std::string synth_subject_id(std::size_t i);

std::vector<AdosRecord> synth_tabular_records(const SynthesisConfig& cfg);
Dataset synth_tabular(const SynthesisConfig& cfg);

/// Noisy background plus a Gaussian intensity blob on ASD samples whose
/// contrast scales with class_separation. Pixels are quantised to 1/255 steps.
Dataset synth_images(const SynthesisConfig& cfg);

/// Image datasets on disk: a directory with index.csv (subject_id,label,file)
/// and one PGM/PPM per sample.
Dataset load_image_dataset(const std::filesystem::path& dir);
void write_image_dataset(const Dataset& d, const std::filesystem::path& dir);

}  // namespace asdscreen
