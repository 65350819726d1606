#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asdscreen/datamodel.hpp"
#include "asdscreen/evalreport.hpp"
#include "asdscreen/tabular.hpp"

namespace asdscreen {

enum class ModuleId { Tabular, Image };

std::string_view to_string(ModuleId m);
ModuleId parse_module_id(std::string_view s);

/// One module's ASD probability for one subject.
struct PredictionScore {
  std::string subject_id;
  ModuleId module = ModuleId::Tabular;
  double p = 0.5;
};

enum class FusionStrategy { Simple, ByTrainCount, ByAsdCount };

std::string_view to_string(FusionStrategy s);
FusionStrategy parse_fusion_strategy(std::string_view s);

struct FusionWeights {
  double w_tabular = 0.5;
  double w_image = 0.5;
  FusionStrategy strategy = FusionStrategy::Simple;
};

struct FusedDecision {
  std::string subject_id;
  double p_tabular = 0;
  double p_image = 0;
  double p_fused = 0;
  Label label = Label::NonASD;
  FusionWeights weights;
  double threshold = 0.5;
};

inline constexpr double kDefaultThreshold = 0.5;

/// Standard average.
FusionWeights weights_simple();

/// Proportional to the number of training samples of each module.
FusionWeights weights_by_train_count(std::size_t n_tabular, std::size_t n_image);

/// Proportional to the number of ASD subjects in each module's training data.
FusionWeights weights_by_asd_count(std::size_t a_tabular, std::size_t a_image);

/// Weights for a strategy, read from the two models' training provenance.
FusionWeights weights_for(FusionStrategy strategy, const TrainingProvenance& tabular,
                          const TrainingProvenance& image);

/// Convex combination of the two scores; ASD iff p_fused >= threshold.
FusedDecision fuse(const PredictionScore& p_tab, const PredictionScore& p_img,
                   const FusionWeights& w, double threshold = kDefaultThreshold);

/// Module-level averaging of (accuracy, sensitivity, precision), the arithmetic
/// behind a results table that averages module metrics instead of scores.
MetricTriple aggregate_metrics(const MetricTriple& m_tab, const MetricTriple& m_img,
                               const FusionWeights& w);

/// Fuse every subject; output is ordered by subject_id.
std::vector<FusedDecision> run_hybrid(std::span<const PredictionScore> tab_scores,
                                      std::span<const PredictionScore> img_scores,
                                      FusionStrategy strategy, const TrainingProvenance& tabular,
                                      const TrainingProvenance& image,
                                      double threshold = kDefaultThreshold);

/// Score interchange CSV: subject_id,module,probability.
std::vector<PredictionScore> parse_scores_csv(std::string_view text);
std::string scores_to_csv(std::span<const PredictionScore> scores);

/// subject_id,p_tabular,p_image,p_fused,label. Weights belong to the run report.
std::string decisions_to_csv(std::span<const FusedDecision> decisions);

}  // namespace asdscreen
