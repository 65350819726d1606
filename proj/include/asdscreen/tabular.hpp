#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "asdscreen/datamodel.hpp"

namespace asdscreen {

enum class LinearKind { LogReg, LinearSvm };

std::string_view to_string(LinearKind k);
LinearKind parse_linear_kind(std::string_view s);

/// Sigmoid fit over raw SVM margins: p = sigma(a * margin + b).
struct PlattCalibration {
  double a = 0.0;
  double b = 0.0;
  bool operator==(const PlattCalibration&) const = default;
};

/// Training-set counts recorded with every model; fusion weights read these.
struct TrainingProvenance {
  std::size_t n_train = 0;
  std::size_t n_asd_train = 0;
  bool operator==(const TrainingProvenance&) const = default;
};

struct LinearModel {
  VecX<double> weights;
  double bias = 0.0;
  LinearKind kind = LinearKind::LogReg;
  std::optional<PlattCalibration> calibration;  // present iff kind == LinearSvm
  TrainingProvenance provenance;

  void validate() const;
  bool operator==(const LinearModel& o) const {
    return weights == o.weights && bias == o.bias && kind == o.kind &&
           calibration == o.calibration && provenance == o.provenance;
  }
};

struct TabularHyper {
  double learning_rate = 0.5;
  int epochs = 500;
  double l2 = 0.0;
  double svm_lambda = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SweepResult {
  std::vector<double> grid;
  std::vector<double> accuracies;
  double best_rate = 0.0;
};

// Loss is declared diverged past this bound.
inline constexpr double kDivergenceBound = 1e12;

// ---------------------------------------------------------------------------
// Objectives. Templated on the scalar so the same expressions serve the
// trainers (double) and finite-difference checks at other precisions.

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

// log(1 + exp(z)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar z) {
  return z > Scalar(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// Mean binary cross-entropy of sigma(Xw + b) against y in {0,1}, plus l2/2 |w|^2.
template <typename Scalar>
Scalar logreg_loss(const VecX<Scalar>& w, Scalar b, const MatX<Scalar>& x,
                   const VecX<Scalar>& y01, Scalar l2) {
  const VecX<Scalar> z = (x * w).array() + b;
  Scalar total(0);
  for (Eigen::Index i = 0; i < z.size(); ++i) total += softplus(z[i]) - y01[i] * z[i];
  return total / static_cast<Scalar>(z.size()) + Scalar(0.5) * l2 * w.squaredNorm();
}

/// Gradient of logreg_loss with respect to (w, b).
template <typename Scalar>
std::pair<VecX<Scalar>, Scalar> logreg_gradient(const VecX<Scalar>& w, Scalar b,
                                                const MatX<Scalar>& x, const VecX<Scalar>& y01,
                                                Scalar l2) {
  const VecX<Scalar> z = (x * w).array() + b;
  VecX<Scalar> residual(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) residual[i] = sigmoid(z[i]) - y01[i];
  const auto n = static_cast<Scalar>(z.size());
  VecX<Scalar> gw = x.transpose() * residual / n + l2 * w;
  return {std::move(gw), residual.sum() / n};
}

/// lambda/2 |w|^2 + mean hinge loss, labels in {-1,+1}. The bias is not regularised.
template <typename Scalar>
Scalar hinge_objective(const VecX<Scalar>& w, Scalar b, const MatX<Scalar>& x,
                       const VecX<Scalar>& ypm, Scalar lambda) {
  const VecX<Scalar> margins = ypm.cwiseProduct((x * w).array().matrix() +
                                                VecX<Scalar>::Constant(ypm.size(), b));
  const Scalar hinge = (Scalar(1) - margins.array()).max(Scalar(0)).sum();
  return Scalar(0.5) * lambda * w.squaredNorm() + hinge / static_cast<Scalar>(ypm.size());
}

/// A subgradient of hinge_objective; exact gradient wherever no margin equals 1.
template <typename Scalar>
std::pair<VecX<Scalar>, Scalar> hinge_subgradient(const VecX<Scalar>& w, Scalar b,
                                                  const MatX<Scalar>& x,
                                                  const VecX<Scalar>& ypm, Scalar lambda) {
  const VecX<Scalar> scores = (x * w).array() + b;
  VecX<Scalar> active(ypm.size());
  for (Eigen::Index i = 0; i < ypm.size(); ++i) {
    active[i] = ypm[i] * scores[i] < Scalar(1) ? ypm[i] : Scalar(0);
  }
  const auto n = static_cast<Scalar>(ypm.size());
  VecX<Scalar> gw = lambda * w - x.transpose() * active / n;
  return {std::move(gw), -active.sum() / n};
}

// ---------------------------------------------------------------------------

/// Full-batch gradient descent on L2-regularised BCE from zero parameters.
LinearModel train_logreg(const Dataset& train, const TabularHyper& h);

/// Deterministic full-batch Pegasos: step learning_rate / (svm_lambda * t),
/// followed by Platt calibration on the training margins.
LinearModel train_linear_svm(const Dataset& train, const TabularHyper& h);

LinearModel train_linear(const Dataset& train, const TabularHyper& h, LinearKind kind);

/// Raw decision value w.x + b.
double decision_value(const LinearModel& m, const FeatureVector& x);

/// ASD probability, strictly inside (0,1).
double predict_proba(const LinearModel& m, const FeatureVector& x);

/// ASD iff predict_proba > 0.5.
Label predict_label(const LinearModel& m, const FeatureVector& x);

double accuracy(const LinearModel& m, const Dataset& d);

/// Platt scaling: 1-D logistic regression of labels on margins, fitted by
/// Newton's method against Platt's smoothed targets.
PlattCalibration calibrate(std::span<const double> margins, std::span<const Label> labels);

/// Train one model per rate on a single fixed split and record test accuracy.
SweepResult lr_sweep(const Dataset& d, std::span<const double> grid, const TabularHyper& h,
                     LinearKind kind, double train_ratio = 0.8);

std::string save_linear_model(const LinearModel& m);
LinearModel load_linear_model(std::string_view json_text);

std::string sweep_to_csv(const SweepResult& s);

}  // namespace asdscreen
