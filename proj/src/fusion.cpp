#include "asdscreen/fusion.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>

#include "asdscreen/io_util.hpp"

namespace asdscreen {

namespace {

FusionWeights proportional(std::size_t tab, std::size_t img, FusionStrategy strategy,
                           const char* what) {
  if (tab == 0 || img == 0) {
    throw ValidationError(std::string(what) + " must be at least 1 for both modules");
  }
  const double w_tab = static_cast<double>(tab) / static_cast<double>(tab + img);
  return FusionWeights{w_tab, 1.0 - w_tab, strategy};
}

void check_probability(double p, const std::string& subject) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ValidationError("probability for subject '" + subject + "' lies outside [0,1]");
  }
}

}  // namespace

std::string_view to_string(ModuleId m) { return m == ModuleId::Tabular ? "tabular" : "image"; }

ModuleId parse_module_id(std::string_view s) {
  if (s == "tabular") return ModuleId::Tabular;
  if (s == "image") return ModuleId::Image;
  throw ValidationError("unknown module '" + std::string(s) + "' (expected tabular or image)");
}

std::string_view to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::Simple: return "simple";
    case FusionStrategy::ByTrainCount: return "by-train-count";
    case FusionStrategy::ByAsdCount: break;
  }
  return "by-asd-count";
}

FusionStrategy parse_fusion_strategy(std::string_view s) {
  if (s == "simple") return FusionStrategy::Simple;
  if (s == "by-train-count") return FusionStrategy::ByTrainCount;
  if (s == "by-asd-count") return FusionStrategy::ByAsdCount;
  throw ValidationError("unknown fusion strategy '" + std::string(s) +
                        "' (expected simple, by-train-count or by-asd-count)");
}

FusionWeights weights_simple() { return FusionWeights{0.5, 0.5, FusionStrategy::Simple}; }

FusionWeights weights_by_train_count(std::size_t n_tabular, std::size_t n_image) {
  return proportional(n_tabular, n_image, FusionStrategy::ByTrainCount, "training count");
}

FusionWeights weights_by_asd_count(std::size_t a_tabular, std::size_t a_image) {
  return proportional(a_tabular, a_image, FusionStrategy::ByAsdCount, "ASD count");
}

FusionWeights weights_for(FusionStrategy strategy, const TrainingProvenance& tabular,
                          const TrainingProvenance& image) {
  switch (strategy) {
    case FusionStrategy::Simple: return weights_simple();
    case FusionStrategy::ByTrainCount:
      return weights_by_train_count(tabular.n_train, image.n_train);
    case FusionStrategy::ByAsdCount: break;
  }
  return weights_by_asd_count(tabular.n_asd_train, image.n_asd_train);
}

FusedDecision fuse(const PredictionScore& p_tab, const PredictionScore& p_img,
                   const FusionWeights& w, double threshold) {
  if (p_tab.subject_id != p_img.subject_id) {
    throw PairingError("cannot fuse scores of different subjects ('" + p_tab.subject_id +
                       "' vs '" + p_img.subject_id + "')");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ValidationError("threshold must lie in (0,1)");
  }
  check_probability(p_tab.p, p_tab.subject_id);
  check_probability(p_img.p, p_img.subject_id);
  // Clamping only absorbs rounding: the combination is convex.
  const double lo = std::min(p_tab.p, p_img.p);
  const double hi = std::max(p_tab.p, p_img.p);
  const double p = std::clamp(w.w_tabular * p_tab.p + w.w_image * p_img.p, lo, hi);
  return FusedDecision{p_tab.subject_id, p_tab.p, p_img.p, p,
                       p >= threshold ? Label::ASD : Label::NonASD, w, threshold};
}

MetricTriple aggregate_metrics(const MetricTriple& m_tab, const MetricTriple& m_img,
                               const FusionWeights& w) {
  auto combine = [&](const std::optional<double>& a, const std::optional<double>& b,
                     const char* name) -> std::optional<double> {
    if (!a || !b) throw ValidationError(std::string(name) + " is undefined for a module");
    if (!(*a >= 0.0 && *a <= 1.0) || !(*b >= 0.0 && *b <= 1.0)) {
      throw ValidationError(std::string(name) + " lies outside [0,1]");
    }
    return w.w_tabular * *a + w.w_image * *b;
  };
  return MetricTriple{combine(m_tab.accuracy, m_img.accuracy, "accuracy"),
                      combine(m_tab.sensitivity, m_img.sensitivity, "sensitivity"),
                      combine(m_tab.precision, m_img.precision, "precision")};
}

std::vector<FusedDecision> run_hybrid(std::span<const PredictionScore> tab_scores,
                                      std::span<const PredictionScore> img_scores,
                                      FusionStrategy strategy, const TrainingProvenance& tabular,
                                      const TrainingProvenance& image, double threshold) {
  std::map<std::string, const PredictionScore*> tab;
  std::map<std::string, const PredictionScore*> img;
  for (const auto& s : tab_scores) {
    if (!tab.emplace(s.subject_id, &s).second) {
      throw PairingError("duplicate tabular score for subject '" + s.subject_id + "'");
    }
  }
  for (const auto& s : img_scores) {
    if (!img.emplace(s.subject_id, &s).second) {
      throw PairingError("duplicate image score for subject '" + s.subject_id + "'");
    }
  }
  std::vector<std::string> only_tab;
  std::vector<std::string> only_img;
  for (const auto& [id, s] : tab) {
    if (!img.contains(id)) only_tab.push_back(id);
  }
  for (const auto& [id, s] : img) {
    if (!tab.contains(id)) only_img.push_back(id);
  }
  if (!only_tab.empty() || !only_img.empty()) {
    std::string msg = "score lists cover different subjects;";
    if (!only_tab.empty()) {
      msg += " missing from image scores:";
      for (const auto& id : only_tab) msg += " " + id;
    }
    if (!only_img.empty()) {
      if (!only_tab.empty()) msg += ";";
      msg += " missing from tabular scores:";
      for (const auto& id : only_img) msg += " " + id;
    }
    throw PairingError(msg);
  }
  const FusionWeights w = weights_for(strategy, tabular, image);
  std::vector<FusedDecision> out;
  out.reserve(tab.size());
  for (const auto& [id, s] : tab) out.push_back(fuse(*s, *img.at(id), w, threshold));
  return out;
}

std::vector<PredictionScore> parse_scores_csv(std::string_view text) {
  const auto lines = io::split_lines(text);
  if (lines.empty() ||
      io::split_csv_line(lines.front()) !=
          std::vector<std::string>{"subject_id", "module", "probability"}) {
    throw SchemaError("score file must start with header subject_id,module,probability");
  }
  std::vector<PredictionScore> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = io::split_csv_line(lines[i]);
    const std::string where = "score file row " + std::to_string(i) + ": ";
    if (f.size() != 3) throw ValidationError(where + "expected 3 fields");
    double p = 0;
    const auto [end, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), p);
    if (ec != std::errc{} || end != f[2].data() + f[2].size()) {
      throw ValidationError(where + "probability '" + f[2] + "' is not a number");
    }
    check_probability(p, f[0]);
    out.push_back(PredictionScore{f[0], parse_module_id(f[1]), p});
  }
  return out;
}

std::string scores_to_csv(std::span<const PredictionScore> scores) {
  std::string out = "subject_id,module,probability\n";
  for (const auto& s : scores) {
    out += s.subject_id + "," + std::string(to_string(s.module)) + "," + io::format_double(s.p) +
           "\n";
  }
  return out;
}

std::string decisions_to_csv(std::span<const FusedDecision> decisions) {
  std::string out = "subject_id,p_tabular,p_image,p_fused,label\n";
  for (const auto& d : decisions) {
    out += d.subject_id + "," + io::format_double(d.p_tabular) + "," +
           io::format_double(d.p_image) + "," + io::format_double(d.p_fused) + "," +
           std::string(to_string(d.label)) + "\n";
  }
  return out;
}

}  // namespace asdscreen
