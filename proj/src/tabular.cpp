#include "asdscreen/tabular.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "asdscreen/io_util.hpp"

namespace asdscreen {

namespace {

constexpr int kModelFormatVersion = 1;

struct LabelledMatrix {
  MatX<double> x;
  VecX<double> y01;
  TrainingProvenance provenance;
};

LabelledMatrix prepare_training(const Dataset& train) {
  if (train.kind() != DatasetKind::Tabular) throw TrainingError("expected a tabular dataset");
  if (train.empty()) throw TrainingError("training set is empty");
  const auto& p = train.provenance();
  if (p.n_asd + p.n_nonasd != p.n_total) throw TrainingError("training set has unlabeled rows");
  if (p.n_asd == 0 || p.n_nonasd == 0) {
    throw TrainingError("training set contains a single class");
  }
  LabelledMatrix out{train.feature_matrix(), VecX<double>(static_cast<Eigen::Index>(p.n_total)),
                     TrainingProvenance{p.n_total, p.n_asd}};
  for (std::size_t i = 0; i < train.size(); ++i) {
    out.y01[static_cast<Eigen::Index>(i)] = train.samples()[i].label == Label::ASD ? 1.0 : 0.0;
  }
  return out;
}

void check_loss(double loss, long iteration) {
  if (!std::isfinite(loss) || loss > kDivergenceBound) {
    std::ostringstream msg;
    msg << "training diverged at iteration " << iteration << " (loss " << loss << ")";
    throw DivergenceError(msg.str(), iteration);
  }
}

double clamp_open_unit(double p) {
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

}  // namespace

std::string_view to_string(LinearKind k) { return k == LinearKind::LogReg ? "logreg" : "svm"; }

LinearKind parse_linear_kind(std::string_view s) {
  if (s == "logreg") return LinearKind::LogReg;
  if (s == "svm") return LinearKind::LinearSvm;
  throw ValidationError("unknown linear model kind '" + std::string(s) + "'");
}

void LinearModel::validate() const {
  if (weights.size() == 0) throw ValidationError("linear model has no weights");
  if (!weights.allFinite() || !std::isfinite(bias)) {
    throw ValidationError("linear model parameters must be finite");
  }
  if (calibration.has_value() != (kind == LinearKind::LinearSvm)) {
    throw ValidationError("calibration must be present exactly for linear SVM models");
  }
  if (calibration && !(std::isfinite(calibration->a) && std::isfinite(calibration->b))) {
    throw ValidationError("calibration parameters must be finite");
  }
}

void TabularHyper::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be positive");
  }
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (!(l2 >= 0.0)) throw ValidationError("l2 must be >= 0");
  if (!(svm_lambda > 0.0)) throw ValidationError("svm_lambda must be positive");
}

LinearModel train_logreg(const Dataset& train, const TabularHyper& h) {
  h.validate();
  const auto data = prepare_training(train);
  VecX<double> w = VecX<double>::Zero(data.x.cols());
  double b = 0.0;
  for (int t = 0; t < h.epochs; ++t) {
    check_loss(logreg_loss(w, b, data.x, data.y01, h.l2), t);
    auto [gw, gb] = logreg_gradient(w, b, data.x, data.y01, h.l2);
    w -= h.learning_rate * gw;
    b -= h.learning_rate * gb;
  }
  check_loss(logreg_loss(w, b, data.x, data.y01, h.l2), h.epochs);
  LinearModel m{std::move(w), b, LinearKind::LogReg, std::nullopt, data.provenance};
  m.validate();
  return m;
}

LinearModel train_linear_svm(const Dataset& train, const TabularHyper& h) {
  h.validate();
  const auto data = prepare_training(train);
  const VecX<double> ypm = (2.0 * data.y01.array() - 1.0).matrix();
  const double lambda = h.svm_lambda;
  // Every minimiser lies inside this ball (Pegasos projection radius).
  const double radius = 1.0 / std::sqrt(lambda);

  VecX<double> w = VecX<double>::Zero(data.x.cols());
  double b = 0.0;
  for (int t = 1; t <= h.epochs; ++t) {
    check_loss(hinge_objective(w, b, data.x, ypm, lambda), t - 1);
    const double eta = h.learning_rate / (lambda * t);
    auto [gw, gb] = hinge_subgradient(w, b, data.x, ypm, lambda);
    w -= eta * gw;
    b -= eta * gb;
    const double norm = w.norm();
    if (norm > radius) w *= radius / norm;
  }
  check_loss(hinge_objective(w, b, data.x, ypm, lambda), h.epochs);

  LinearModel m{std::move(w), b, LinearKind::LinearSvm, PlattCalibration{}, data.provenance};
  std::vector<double> margins(train.size());
  std::vector<Label> labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    margins[i] = decision_value(m, std::get<FeatureVector>(train.samples()[i].input));
    labels[i] = train.samples()[i].label;
  }
  m.calibration = calibrate(margins, labels);
  m.validate();
  return m;
}

LinearModel train_linear(const Dataset& train, const TabularHyper& h, LinearKind kind) {
  return kind == LinearKind::LogReg ? train_logreg(train, h) : train_linear_svm(train, h);
}

double decision_value(const LinearModel& m, const FeatureVector& x) {
  if (x.size() != m.weights.size()) {
    throw ValidationError("feature dimension " + std::to_string(x.size()) +
                          " does not match model dimension " +
                          std::to_string(m.weights.size()));
  }
  return m.weights.dot(x) + m.bias;
}

double predict_proba(const LinearModel& m, const FeatureVector& x) {
  const double z = decision_value(m, x);
  if (m.kind == LinearKind::LogReg) return clamp_open_unit(sigmoid(z));
  if (!m.calibration) throw ValidationError("linear SVM model has no calibration");
  return clamp_open_unit(sigmoid(m.calibration->a * z + m.calibration->b));
}

Label predict_label(const LinearModel& m, const FeatureVector& x) {
  return predict_proba(m, x) > 0.5 ? Label::ASD : Label::NonASD;
}

double accuracy(const LinearModel& m, const Dataset& d) {
  if (d.empty()) throw ValidationError("cannot score an empty dataset");
  std::size_t correct = 0;
  for (const auto& s : d.samples()) {
    if (predict_label(m, std::get<FeatureVector>(s.input)) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

PlattCalibration calibrate(std::span<const double> margins, std::span<const Label> labels) {
  if (margins.size() != labels.size()) {
    throw ValidationError("calibrate: margins and labels differ in length");
  }
  double n_pos = 0;
  double n_neg = 0;
  for (Label l : labels) {
    if (l == Label::ASD) n_pos += 1;
    else if (l == Label::NonASD) n_neg += 1;
    else throw ValidationError("calibrate: unlabeled sample");
  }
  if (n_pos == 0 || n_neg == 0) throw TrainingError("calibrate: both classes are required");

  // Smoothed targets keep the fit finite on separable margins.
  const double hi = (n_pos + 1.0) / (n_pos + 2.0);
  const double lo = 1.0 / (n_neg + 2.0);
  std::vector<double> target(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) target[i] = labels[i] == Label::ASD ? hi : lo;

  auto nll = [&](double a, double b) {
    double total = 0;
    for (std::size_t i = 0; i < margins.size(); ++i) {
      const double z = a * margins[i] + b;
      total += softplus(z) - target[i] * z;
    }
    return total;
  };

  double a = 0.0;
  double b = std::log((n_pos + 1.0) / (n_neg + 1.0));
  double f = nll(a, b);
  for (int iter = 0; iter < 100; ++iter) {
    double ga = 0, gb = 0, haa = 0, hab = 0, hbb = 0;
    for (std::size_t i = 0; i < margins.size(); ++i) {
      const double p = sigmoid(a * margins[i] + b);
      const double r = p - target[i];
      const double v = p * (1 - p);
      ga += r * margins[i];
      gb += r;
      haa += v * margins[i] * margins[i];
      hab += v * margins[i];
      hbb += v;
    }
    if (std::abs(ga) < 1e-12 && std::abs(gb) < 1e-12) break;
    // Levenberg-style damping keeps the 2x2 system well posed.
    const double damp = 1e-12;
    haa += damp;
    hbb += damp;
    const double det = haa * hbb - hab * hab;
    const double da = -(hbb * ga - hab * gb) / det;
    const double db = -(-hab * ga + haa * gb) / det;
    double step = 1.0;
    bool improved = false;
    while (step > 1e-10) {
      const double fa = nll(a + step * da, b + step * db);
      if (fa < f + 1e-4 * step * (ga * da + gb * db)) {
        a += step * da;
        b += step * db;
        improved = std::abs(f - fa) > 1e-15 * std::max(1.0, std::abs(f));
        f = fa;
        break;
      }
      step /= 2;
    }
    if (!improved) break;
  }
  return PlattCalibration{a, b};
}

SweepResult lr_sweep(const Dataset& d, std::span<const double> grid, const TabularHyper& h,
                     LinearKind kind, double train_ratio) {
  if (grid.empty()) throw ValidationError("learning-rate grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0)) throw ValidationError("learning rates must be positive");
    if (i > 0 && !(grid[i] > grid[i - 1])) {
      throw ValidationError("learning-rate grid must be strictly increasing");
    }
  }
  const auto split = split_dataset(d, train_ratio, h.seed);
  SweepResult result;
  result.grid.assign(grid.begin(), grid.end());
  for (double rate : grid) {
    TabularHyper hr = h;
    hr.learning_rate = rate;
    const std::string tag = "learning rate " + io::format_double(rate) + ": ";
    try {
      result.accuracies.push_back(accuracy(train_linear(split.train, hr, kind), split.test));
    } catch (const DivergenceError& e) {
      throw DivergenceError(tag + e.what(), e.step());
    } catch (const TrainingError& e) {
      throw TrainingError(tag + e.what());
    }
  }
  // Strict comparison keeps the smaller rate on ties.
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (result.accuracies[i] > result.accuracies[best]) best = i;
  }
  result.best_rate = grid[best];
  return result;
}

std::string save_linear_model(const LinearModel& m) {
  m.validate();
  nlohmann::json j;
  j["format_version"] = kModelFormatVersion;
  j["kind"] = std::string(to_string(m.kind));
  j["weights"] = std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size());
  j["bias"] = m.bias;
  j["calibration"] =
      m.calibration ? nlohmann::json{{"a", m.calibration->a}, {"b", m.calibration->b}}
                    : nlohmann::json(nullptr);
  j["provenance"] = {{"n_train", m.provenance.n_train},
                     {"n_asd_train", m.provenance.n_asd_train}};
  return j.dump(2) + "\n";
}

LinearModel load_linear_model(std::string_view json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.at("format_version").get<int>() != kModelFormatVersion) {
      throw ValidationError("unsupported linear model format_version");
    }
    LinearModel m;
    m.kind = parse_linear_kind(j.at("kind").get<std::string>());
    const auto w = j.at("weights").get<std::vector<double>>();
    m.weights = Eigen::Map<const VecX<double>>(w.data(), static_cast<Eigen::Index>(w.size()));
    m.bias = j.at("bias").get<double>();
    if (!j.at("calibration").is_null()) {
      m.calibration = PlattCalibration{j["calibration"].at("a").get<double>(),
                                       j["calibration"].at("b").get<double>()};
    }
    m.provenance.n_train = j.at("provenance").at("n_train").get<std::size_t>();
    m.provenance.n_asd_train = j.at("provenance").at("n_asd_train").get<std::size_t>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed linear model document: ") + e.what());
  }
}

std::string sweep_to_csv(const SweepResult& s) {
  std::string out = "rate,accuracy\n";
  for (std::size_t i = 0; i < s.grid.size(); ++i) {
    out += io::format_double(s.grid[i]) + "," + io::format_double(s.accuracies[i]) + "\n";
  }
  return out;
}

}  // namespace asdscreen
