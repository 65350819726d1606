#include <doctest.h>

#include <random>

#include "asdscreen/errors.hpp"
#include "asdscreen/ingest.hpp"
#include "asdscreen/tabular.hpp"
#include "oracles.hpp"

using namespace asdscreen;

namespace {

Dataset from_rows(const std::vector<std::vector<double>>& rows, const std::vector<Label>& labels) {
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    FeatureVector x(static_cast<Eigen::Index>(rows[i].size()));
    for (std::size_t j = 0; j < rows[i].size(); ++j) x[static_cast<Eigen::Index>(j)] = rows[i][j];
    samples.push_back(Sample{"s" + std::to_string(i), x, labels[i]});
  }
  return Dataset(DatasetKind::Tabular, samples);
}

Dataset synth(std::size_t n, double frac, double sep, std::uint64_t seed) {
  SynthesisConfig cfg;
  cfg.n_samples = n;
  cfg.asd_fraction = frac;
  cfg.class_separation = sep;
  cfg.seed = seed;
  return synth_tabular(cfg);
}

// Parameters (w, b) packed into one vector for finite differences.
Eigen::VectorXd pack(const Eigen::VectorXd& w, double b) {
  Eigen::VectorXd p(w.size() + 1);
  p << w, b;
  return p;
}

}  // namespace

TEST_SUITE("tabular") {

TEST_CASE("logistic loss gradient matches central differences") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  for (int point = 0; point < 25; ++point) {
    const int n = 5 + point % 7;
    const int d = 1 + point % 6;
    Eigen::MatrixXd x(n, d);
    Eigen::VectorXd y(n), w(d);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) x(i, j) = normal(rng);
      y[i] = static_cast<double>(uniform_below(rng, 2));
    }
    for (int j = 0; j < d; ++j) w[j] = normal(rng);
    const double b = normal(rng);
    const double l2 = point % 2 ? 0.1 : 0.0;
    const auto [gw, gb] = logreg_gradient<double>(w, b, x, y, l2);
    auto f = [&](const Eigen::VectorXd& p) {
      return logreg_loss<double>(p.head(d), p[d], x, y, l2);
    };
    const double err = oracle::relative_error(pack(gw, gb),
                                              oracle::central_gradient(f, pack(w, b), 1e-5));
    CAPTURE(point);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("hinge subgradient matches central differences away from kinks") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  int checked = 0;
  while (checked < 25) {
    const int n = 6, d = 3;
    Eigen::MatrixXd x(n, d);
    Eigen::VectorXd y(n), w(d);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) x(i, j) = normal(rng);
      y[i] = uniform_below(rng, 2) ? 1.0 : -1.0;
    }
    for (int j = 0; j < d; ++j) w[j] = normal(rng);
    const double b = normal(rng);
    const Eigen::VectorXd margins = y.cwiseProduct((x * w).array().matrix() +
                                                   Eigen::VectorXd::Constant(n, b));
    if (((margins.array() - 1.0).abs() < 1e-3).any()) continue;  // kink: skip this draw
    const auto [gw, gb] = hinge_subgradient<double>(w, b, x, y, 0.05);
    auto f = [&](const Eigen::VectorXd& p) {
      return hinge_objective<double>(p.head(d), p[d], x, y, 0.05);
    };
    CHECK(oracle::relative_error(pack(gw, gb), oracle::central_gradient(f, pack(w, b), 1e-7)) <
          1e-6);
    ++checked;
  }
}

TEST_CASE("zero epochs keeps the zero initialisation") {
  const Dataset d = synth(50, 0.5, 1.0, 1);
  TabularHyper h;
  h.epochs = 0;
  const LinearModel m = train_logreg(d, h);
  CHECK(m.weights.isZero());
  CHECK(m.bias == 0.0);
  for (const auto& s : d.samples()) {
    CHECK(predict_proba(m, std::get<FeatureVector>(s.input)) == 0.5);
  }
}

TEST_CASE("first step leaves the bias unchanged when labels are balanced") {
  const Dataset d = from_rows({{1, 0, 0}, {0, 0, 0}}, {Label::ASD, Label::NonASD});
  TabularHyper h;
  h.epochs = 1;
  const LinearModel m = train_logreg(d, h);
  CHECK(m.bias == 0.0);
  // The gradient is -(0.5, 0, 0)/2 per sample mean, so w0 moves by lr/4.
  CHECK(m.weights[0] == doctest::Approx(h.learning_rate * 0.25));
}

TEST_CASE("predict_proba values and range") {
  LinearModel m;
  m.weights = FeatureVector::Zero(4);
  m.weights[0] = 1.0;
  FeatureVector x = FeatureVector::Zero(4);
  x[0] = 1.0;
  CHECK(predict_proba(m, x) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(predict_proba(m, x) == doctest::Approx(0.7310586).epsilon(1e-7));

  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 30.0);
  for (int i = 0; i < 1000; ++i) {
    const double z1 = normal(rng);
    const double z2 = z1 + std::abs(normal(rng)) + 1e-3;
    m.bias = z1;
    x[0] = 0.0;
    const double p1 = predict_proba(m, x);
    m.bias = z2;
    const double p2 = predict_proba(m, x);
    CHECK(p1 > 0.0);
    CHECK(p2 < 1.0);
    CHECK(p2 >= p1);
    if (std::abs(z1) < 30 && std::abs(z2) < 30) CHECK(p2 > p1);
  }
  m.bias = 1e6;
  CHECK(predict_proba(m, x) < 1.0);
  m.bias = -1e6;
  CHECK(predict_proba(m, x) > 0.0);
}

TEST_CASE("label is ASD exactly when probability exceeds one half") {
  const Dataset d = synth(200, 0.5, 0.5, 8);
  TabularHyper h;
  for (auto kind : {LinearKind::LogReg, LinearKind::LinearSvm}) {
    const LinearModel m = train_linear(d, h, kind);
    for (const auto& s : d.samples()) {
      const auto& x = std::get<FeatureVector>(s.input);
      CHECK((predict_proba(m, x) > 0.5) == (predict_label(m, x) == Label::ASD));
    }
  }
}

TEST_CASE("both linear models learn well-separated synthetic data") {
  const auto split = split_dataset(synth(1000, 0.79, 2.0, 3), 0.8, 42);
  TabularHyper h;
  CHECK(accuracy(train_logreg(split.train, h), split.test) >= 0.95);
  CHECK(accuracy(train_linear_svm(split.train, h), split.test) >= 0.95);

  const auto skewed = split_dataset(synth(1319, 1046.0 / 1319.0, 2.0, 4), 0.8, 42);
  CHECK(accuracy(train_linear_svm(skewed.train, h), skewed.test) >= 0.95);
}

TEST_CASE("SVM reaches zero hinge loss on a separable 1-D pair") {
  const Dataset d = from_rows({{2.0}, {-2.0}}, {Label::ASD, Label::NonASD});
  TabularHyper h;
  h.epochs = 2000;
  const LinearModel m = train_linear_svm(d, h);
  for (const auto& s : d.samples()) {
    const double y = s.label == Label::ASD ? 1.0 : -1.0;
    CHECK(y * decision_value(m, std::get<FeatureVector>(s.input)) >= 1.0);
  }
  REQUIRE(m.calibration.has_value());
}

TEST_CASE("doubling every feature keeps the SVM sign pattern on a symmetric set") {
  std::vector<std::vector<double>> rows, doubled;
  std::vector<Label> labels;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (int i = 0; i < 20; ++i) {
    const double a = 1.0 + normal(rng), b = normal(rng);
    rows.push_back({a, b});
    rows.push_back({-a, -b});
    labels.push_back(Label::ASD);
    labels.push_back(Label::NonASD);
  }
  for (const auto& r : rows) doubled.push_back({2 * r[0], 2 * r[1]});
  TabularHyper h;
  const LinearModel m1 = train_linear_svm(from_rows(rows, labels), h);
  const LinearModel m2 = train_linear_svm(from_rows(doubled, labels), h);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    FeatureVector x(2), x2(2);
    x << rows[i][0], rows[i][1];
    x2 << doubled[i][0], doubled[i][1];
    CHECK((decision_value(m1, x) > 0) == (decision_value(m2, x2) > 0));
  }
}

TEST_CASE("training is deterministic") {
  const Dataset d = synth(300, 0.7, 1.0, 10);
  TabularHyper h;
  CHECK(train_logreg(d, h) == train_logreg(d, h));
  CHECK(train_linear_svm(d, h) == train_linear_svm(d, h));
}

TEST_CASE("training preconditions and divergence") {
  const Dataset one_class = from_rows({{1.0}, {2.0}}, {Label::ASD, Label::ASD});
  TabularHyper h;
  CHECK_THROWS_AS(train_logreg(one_class, h), TrainingError);
  CHECK_THROWS_AS(train_linear_svm(one_class, h), TrainingError);
  const Dataset unlabeled = from_rows({{1.0}, {2.0}}, {Label::ASD, Label::Unlabeled});
  CHECK_THROWS_AS(train_logreg(unlabeled, h), TrainingError);
  CHECK_THROWS_AS(train_logreg(from_rows({}, {}), h), TrainingError);

  const Dataset d = from_rows({{1e3}, {-1e3}, {1e3}}, {Label::NonASD, Label::ASD, Label::ASD});
  h.learning_rate = 1e12;
  CHECK_THROWS_AS(train_logreg(d, h), DivergenceError);
  h.learning_rate = -1.0;
  CHECK_THROWS_AS(train_logreg(d, h), ValidationError);
}

TEST_CASE("Platt calibration") {
  SUBCASE("margins that separate the labels give confident held-out positives") {
    std::vector<double> margins;
    std::vector<Label> labels;
    for (int i = 0; i < 50; ++i) {
      margins.push_back(0.5 + 0.05 * i);
      labels.push_back(Label::ASD);
      margins.push_back(-0.5 - 0.05 * i);
      labels.push_back(Label::NonASD);
    }
    const PlattCalibration c = calibrate(margins, labels);
    for (double m : {0.6, 1.3, 2.2, 4.0}) CHECK(sigmoid(c.a * m + c.b) > 0.5);
    CHECK(c.a > 0);
  }
  SUBCASE("labels independent of margins give a flat fit near the base rate") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> normal;
    std::vector<double> margins;
    std::vector<Label> labels;
    const auto perm = seeded_permutation(400, 5);
    for (std::size_t i = 0; i < 400; ++i) {
      margins.push_back(normal(rng));
      labels.push_back(perm[i] < 120 ? Label::ASD : Label::NonASD);
    }
    const PlattCalibration c = calibrate(margins, labels);
    CHECK(std::abs(c.a) < 0.1);
    for (double m : {-1.0, 0.0, 1.0}) {
      CHECK(sigmoid(c.a * m + c.b) == doctest::Approx(0.3).epsilon(0.05));
    }
  }
  SUBCASE("symmetric margins with balanced labels give b near zero") {
    std::vector<double> margins;
    std::vector<Label> labels;
    for (double m : {0.3, 0.7, 1.1, 2.0, -0.2}) {
      margins.push_back(m);
      labels.push_back(Label::ASD);
      margins.push_back(-m);
      labels.push_back(Label::NonASD);
    }
    CHECK(std::abs(calibrate(margins, labels).b) < 1e-9);
  }
}

TEST_CASE("learning-rate sweep") {
  const Dataset d = synth(400, 0.6, 1.0, 2);
  TabularHyper h;
  SUBCASE("singleton grid") {
    const std::vector<double> grid = {0.3};
    CHECK(lr_sweep(d, grid, h, LinearKind::LogReg).best_rate == 0.3);
  }
  SUBCASE("ties resolve to the smallest rate") {
    h.epochs = 0;
    const std::vector<double> grid = {0.01, 0.1, 1.0};
    const SweepResult s = lr_sweep(d, grid, h, LinearKind::LogReg);
    CHECK(s.accuracies[0] == s.accuracies[2]);
    CHECK(s.best_rate == 0.01);
  }
  SUBCASE("wide grid: best accuracy is at least both endpoints") {
    const std::vector<double> grid = {1e-4, 1e-3, 1e-2, 1e-1, 1, 10, 100};
    const SweepResult s = lr_sweep(synth(1000, 0.79, 0.5, 1), grid, h, LinearKind::LogReg);
    const auto best = std::find(grid.begin(), grid.end(), s.best_rate) - grid.begin();
    CHECK(s.accuracies[static_cast<std::size_t>(best)] >= s.accuracies.front());
    CHECK(s.accuracies[static_cast<std::size_t>(best)] >= s.accuracies.back());
    CHECK(sweep_to_csv(s).rfind("rate,accuracy\n", 0) == 0);
  }
  SUBCASE("grid must be positive and strictly increasing") {
    const std::vector<double> down = {1.0, 0.1};
    CHECK_THROWS_AS(lr_sweep(d, down, h, LinearKind::LogReg), ValidationError);
    const std::vector<double> same = {0.1, 0.1};
    CHECK_THROWS_AS(lr_sweep(d, same, h, LinearKind::LogReg), ValidationError);
    const std::vector<double> empty;
    CHECK_THROWS_AS(lr_sweep(d, empty, h, LinearKind::LogReg), ValidationError);
  }
}

TEST_CASE("model documents round-trip exactly and are validated") {
  const Dataset d = synth(200, 0.7, 1.0, 3);
  TabularHyper h;
  for (auto kind : {LinearKind::LogReg, LinearKind::LinearSvm}) {
    const LinearModel m = train_linear(d, h, kind);
    CHECK(m.provenance.n_train == 200);
    CHECK(m.provenance.n_asd_train == d.provenance().n_asd);
    const std::string doc = save_linear_model(m);
    CHECK(load_linear_model(doc) == m);
    CHECK(save_linear_model(load_linear_model(doc)) == doc);
  }
  CHECK_THROWS_AS(load_linear_model("{"), ValidationError);
  CHECK_THROWS_AS(load_linear_model(R"({"format_version":1,"kind":"logreg","weights":[1],"bias":0,)"
                                    R"("calibration":{"a":1,"b":0},"provenance":{"n_train":1,"n_asd_train":1}})"),
                  ValidationError);
}

}  // TEST_SUITE
