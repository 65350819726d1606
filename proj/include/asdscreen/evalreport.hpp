#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asdscreen/datamodel.hpp"

namespace asdscreen {

/// Binary confusion counts with ASD as the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Accuracy, sensitivity (ASD recall) and precision (ASD positive predictive
/// value). A metric whose denominator is zero is std::nullopt, never 0.
struct MetricTriple {
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> precision;

  bool operator==(const MetricTriple&) const = default;
};

/// Pairs are (predicted, actual).
ConfusionMatrix confusion(std::span<const std::pair<Label, Label>> decisions);

MetricTriple metrics(const ConfusionMatrix& c);

/// Weights and threshold of a hybrid run.
struct HybridInfo {
  std::string strategy;
  double w_tabular = 0.5;
  double w_image = 0.5;
  double threshold = 0.5;

  bool operator==(const HybridInfo&) const = default;
};

inline constexpr int kReportFormatVersion = 1;

/// Serializable record of one train/evaluate/fuse run.
struct RunReport {
  std::string run_id;
  std::string module;  // logreg | svm | cnn | hybrid | sweep
  std::map<std::string, Provenance> datasets;
  nlohmann::json hyperparameters = nlohmann::json::object();
  ConfusionMatrix confusion;
  MetricTriple metrics;
  std::optional<HybridInfo> hybrid;
  std::vector<std::string> notes;
  // Wall-clock data; the only part of a report allowed to differ between reruns.
  std::map<std::string, std::string> metadata;

  bool validation_augmented() const;
};

/// Canonical JSON: sorted keys, two-space indent, trailing newline.
std::string emit_report(const RunReport& r);

/// Parse a report and verify its metrics against the embedded confusion matrix.
RunReport parse_report(std::string_view json_text);

/// Percentage at one decimal place ("83.8%"), or "n/a" for an undefined metric.
std::string format_percent(std::optional<double> v);

/// Human-readable summary in the style of a results table row.
std::string render_summary(const RunReport& r);

/// One row per report: run_id,module,accuracy,sensitivity,precision,tp,fp,tn,fn,validation_augmented.
std::string metrics_table_csv(std::span<const RunReport> reports);

}  // namespace asdscreen
