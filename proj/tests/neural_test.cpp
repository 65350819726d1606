#include <doctest.h>

#include <algorithm>
#include <random>

#include "asdscreen/errors.hpp"
#include "asdscreen/ingest.hpp"
#include "asdscreen/neural.hpp"
#include "oracles.hpp"

using namespace asdscreen;

namespace {

Tensor4d random_images(int n, Shape3 s, std::mt19937_64& rng) {
  Tensor4d t(n, s.h, s.w, s.c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = unit_uniform(rng);
  return t;
}

// Fresh biases are zero, so a zero input patch (e.g. after ReLU) puts a
// pre-activation exactly on the ReLU kink. Random biases avoid that.
void jitter_biases(Network& net, std::mt19937_64& rng) {
  for (auto& p : net.params()) {
    if (p.dims.size() != 1) continue;
    for (Eigen::Index i = 0; i < p.values.size(); ++i) p.values[i] = 0.2 * unit_uniform(rng) - 0.1;
  }
}

NetConfig head_only(std::vector<LayerSpec> body) {
  NetConfig cfg;
  cfg.layers = std::move(body);
  cfg.layers.push_back(FullyConnectedSpec{1});
  cfg.layers.push_back(SigmoidHeadSpec{});
  return cfg;
}

// Largest per-tensor relative error between backprop and central differences.
double worst_gradient_error(const Network& net, const Tensor4d& x, const std::vector<double>& y) {
  ParamList grads;
  net.loss_and_gradients(x, y, grads);
  double worst = 0;
  for (std::size_t t = 0; t < net.params().size(); ++t) {
    Network probe = net;
    auto f = [&](const Eigen::VectorXd& v) {
      probe.params()[t].values = v;
      return probe.loss(x, y);
    };
    const Eigen::VectorXd fd = oracle::central_gradient(f, net.params()[t].values, 1e-6);
    worst = std::max(worst, oracle::relative_error(grads[t].values, fd));
  }
  return worst;
}

Dataset small_images(std::size_t n, double sep, std::uint64_t seed) {
  SynthesisConfig cfg;
  cfg.n_samples = n;
  cfg.class_separation = sep;
  cfg.seed = seed;
  cfg.image_height = 8;
  cfg.image_width = 8;
  cfg.image_channels = 1;
  return synth_images(cfg);
}

NetConfig small_net() {
  NetConfig cfg = head_only({ConvSpec{4, 3, 1, 1}, DenseBlockSpec{2, 2}, TransitionSpec{0.5},
                             GlobalAvgPoolSpec{}});
  cfg.batch_size = 16;
  cfg.epochs = 4;
  cfg.initial_lr = 0.1;
  cfg.init_seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("neural") {

TEST_CASE("layer shape rules") {
  CHECK(layer_output_shape(ConvSpec{6, 3, 2, 1}, {8, 8, 3}) == Shape3{4, 4, 6});
  CHECK(layer_output_shape(DenseBlockSpec{3, 2}, {5, 5, 4}) == Shape3{5, 5, 10});
  CHECK(layer_output_shape(DenseBlockSpec{0, 2}, {5, 5, 4}) == Shape3{5, 5, 4});
  CHECK(layer_output_shape(TransitionSpec{0.5}, {8, 8, 9}) == Shape3{4, 4, 4});
  CHECK(layer_output_shape(GlobalAvgPoolSpec{}, {8, 8, 9}) == Shape3{1, 1, 9});
  CHECK(layer_output_shape(MaxPoolSpec{2, 2}, {7, 7, 2}) == Shape3{3, 3, 2});
  CHECK_THROWS_AS(layer_output_shape(ConvSpec{4, 5, 1, 0}, {3, 3, 1}), ValidationError);
  CHECK_THROWS_AS(layer_output_shape(TransitionSpec{1.5}, {8, 8, 4}), ValidationError);
  CHECK_THROWS_AS(layer_output_shape(TransitionSpec{0.1}, {8, 8, 4}), ValidationError);
}

TEST_CASE("configurations are validated before training") {
  NetConfig cfg = NetConfig::default_dense();
  CHECK_NOTHROW(cfg.validate());
  NetConfig no_head = cfg;
  no_head.layers.pop_back();
  CHECK_THROWS_AS(no_head.validate(), ValidationError);
  NetConfig two_out = head_only({GlobalAvgPoolSpec{}});
  two_out.layers[1] = FullyConnectedSpec{2};
  CHECK_THROWS_AS(two_out.validate(), ValidationError);
  NetConfig bad_cb = cfg;
  bad_cb.callback.lr_decay_factor = 1.0;
  CHECK_THROWS_AS(bad_cb.validate(), ValidationError);
  bad_cb.callback = CallbackConfig{0.5, 0, 1e-5};
  CHECK_THROWS_AS(bad_cb.validate(), ValidationError);
  bad_cb.callback = CallbackConfig{0.5, 2, 0.0};
  CHECK_THROWS_AS(bad_cb.validate(), ValidationError);
  // Shape chain: a 5x5 kernel without padding cannot follow a 2x2 input.
  CHECK_THROWS_AS(Network(head_only({ConvSpec{2, 5, 1, 0}}), Shape3{2, 2, 1}), ValidationError);
  CHECK_NOTHROW(Network(cfg, Shape3{16, 16, 1}));
}

TEST_CASE("backprop matches central differences on the tiny dense net") {
  const Shape3 in{8, 8, 1};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Network net(head_only({DenseBlockSpec{2, 2}, GlobalAvgPoolSpec{}}), in);
    net.initialize(seed);
    std::mt19937_64 rng(seed + 100);
    const Tensor4d x = random_images(3, in, rng);
    const std::vector<double> y = {1.0, 0.0, static_cast<double>(seed % 2)};
    CAPTURE(seed);
    CHECK(worst_gradient_error(net, x, y) < 1e-4);
  }
}

TEST_CASE("backprop matches central differences on randomized layer stacks") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<LayerSpec> body;
    body.push_back(ConvSpec{2 + static_cast<int>(rng() % 3), 3, 1 + static_cast<int>(rng() % 2), 1});
    if (rng() % 2) body.push_back(ReluSpec{});
    body.push_back(DenseBlockSpec{1 + static_cast<int>(rng() % 2), 1 + static_cast<int>(rng() % 2)});
    if (rng() % 2) body.push_back(TransitionSpec{0.5});
    else body.push_back(MaxPoolSpec{2, 2});
    if (rng() % 2) body.push_back(GlobalAvgPoolSpec{});
    const Shape3 in{8, 8, 1 + 2 * static_cast<int>(rng() % 2)};
    Network net(head_only(body), in);
    net.initialize(seed);
    jitter_biases(net, rng);
    const Tensor4d x = random_images(3, in, rng);
    const std::vector<double> y = {1.0, 0.0, 1.0};
    CAPTURE(seed);
    CHECK(worst_gradient_error(net, x, y) < 1e-4);
  }
}

TEST_CASE("head bias gradient at zero parameters is mean(0.5 - y)") {
  Network net(NetConfig::default_dense(), Shape3{8, 8, 1});
  std::mt19937_64 rng(1);
  const Tensor4d x = random_images(4, {8, 8, 1}, rng);
  const std::vector<double> y = {1, 1, 1, 0};
  ParamList grads;
  const double loss = net.loss_and_gradients(x, y, grads);
  CHECK(loss == doctest::Approx(std::log(2.0)));
  CHECK(grads.back().values[0] == doctest::Approx((0.5 - 1 + 0.5 - 1 + 0.5 - 1 + 0.5) / 4));
  CHECK(grads.back().values[0] == doctest::Approx(-0.25));
}

TEST_CASE("forward properties") {
  const Shape3 in{8, 8, 1};
  std::mt19937_64 rng(2);
  SUBCASE("zero parameters give one half") {
    Network net(NetConfig::default_dense(), in);
    const VecX<double> p = net.forward(random_images(5, in, rng));
    for (Eigen::Index i = 0; i < p.size(); ++i) CHECK(p[i] == 0.5);
  }
  SUBCASE("identical images and permuted batches") {
    Network net(NetConfig::default_dense(), in);
    net.initialize(7);
    const Tensor4d x = random_images(5, in, rng);
    Tensor4d same(4, 8, 8, 1);
    for (int i = 0; i < 4; ++i) same.image(i) = x.image(2);
    const VecX<double> ps = net.forward(same);
    for (int i = 1; i < 4; ++i) CHECK(ps[i] == ps[0]);
    const std::vector<int> perm = {3, 0, 4, 1, 2};
    Tensor4d xp(5, 8, 8, 1);
    for (int i = 0; i < 5; ++i) xp.image(i) = x.image(perm[static_cast<std::size_t>(i)]);
    const VecX<double> p = net.forward(x);
    const VecX<double> pp = net.forward(xp);
    for (int i = 0; i < 5; ++i) CHECK(pp[i] == p[perm[static_cast<std::size_t>(i)]]);
  }
}

TEST_CASE("dense block pass-through") {
  const Shape3 in{4, 4, 3};
  std::mt19937_64 rng(3);
  const Tensor4d x = random_images(1, in, rng);
  auto channel_mean = [&](int c) {
    double s = 0;
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx) s += x(0, yy, xx, c);
    return s / 16.0;
  };
  SUBCASE("an empty block returns its input") {
    Network net(head_only({DenseBlockSpec{0, 2}, GlobalAvgPoolSpec{}}), in);
    CHECK(net.parameter_count() == 3 + 1);
    for (int c = 0; c < 3; ++c) {
      net.params()[0].values.setZero();
      net.params()[0].values[c] = 1.0;
      CHECK(net.logits(x)[0] == doctest::Approx(channel_mean(c)).epsilon(1e-14));
    }
  }
  SUBCASE("zero weights append zero channels and keep the input") {
    Network net(head_only({DenseBlockSpec{2, 2}, GlobalAvgPoolSpec{}}), in);
    auto& fc = net.params()[net.params().size() - 2].values;
    REQUIRE(fc.size() == 7);
    for (int c = 0; c < 7; ++c) {
      fc.setZero();
      fc[c] = 1.0;
      CHECK(net.logits(x)[0] == doctest::Approx(c < 3 ? channel_mean(c) : 0.0).epsilon(1e-14));
    }
  }
}

TEST_CASE("duplicating a sample leaves the mean-loss gradient unchanged") {
  const Shape3 in{8, 8, 1};
  Network net(NetConfig::default_dense(), in);
  net.initialize(5);
  std::mt19937_64 rng(5);
  const Tensor4d one = random_images(1, in, rng);
  Tensor4d two(2, 8, 8, 1);
  two.image(0) = one.image(0);
  two.image(1) = one.image(0);
  ParamList g1, g2;
  const std::vector<double> y1 = {1.0}, y2 = {1.0, 1.0};
  net.loss_and_gradients(one, y1, g1);
  net.loss_and_gradients(two, y2, g2);
  for (std::size_t t = 0; t < g1.size(); ++t) {
    CHECK(oracle::relative_error(g1[t].values, g2[t].values) < 1e-14);
  }
}

TEST_CASE("predict_image") {
  const Dataset d = small_images(100, 1.0, 4);
  Network zero(small_net(), Shape3{8, 8, 1});
  TrainedNet untrained{zero, {}, {}, false, 0, 0.0};
  CHECK(predict_image(untrained, std::get<ImageTensor>(d.samples()[0].input)) == 0.5);
  untrained.net.initialize(9);
  const VecX<double> batch = untrained.net.forward(to_batch(d));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double p = predict_image(untrained, std::get<ImageTensor>(d.samples()[i].input));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    const std::vector<std::size_t> idx = {i};
    CHECK(p == untrained.net.forward(to_batch(d, idx))[0]);
    CHECK(p == batch[static_cast<Eigen::Index>(i)]);
  }
}

TEST_CASE("first-epoch checkpoint and callback invariants") {
  const Dataset all = small_images(160, 3.0, 6);
  const auto split = split_dataset(all, 0.75, 1);
  SUBCASE("one epoch stores the epoch-1 parameters") {
    NetConfig cfg = small_net();
    cfg.epochs = 1;
    const TrainedNet t = train_net(split.train, split.test, cfg);
    CHECK(t.best_epoch == 1);
    REQUIRE(t.history.size() == 1);
    CHECK(evaluate_net(t.net, split.test).accuracy == t.history[0].val_acc);
  }
  SUBCASE("plateau decays the learning rate after `patience` epochs") {
    NetConfig cfg = small_net();
    cfg.initial_lr = 1e-12;
    cfg.epochs = 7;
    cfg.callback = CallbackConfig{0.5, 2, 1e-15};
    const TrainedNet t = train_net(split.train, split.test, cfg);
    for (const auto& e : t.history) CHECK(e.val_acc == t.history[0].val_acc);
    CHECK(t.best_epoch == 1);
    CHECK(t.history[1].lr == 1e-12);
    CHECK(t.history[2].lr == 1e-12);
    CHECK(t.history[3].lr == 0.5e-12);
    CHECK(t.history[4].lr == 0.5e-12);
    CHECK(t.history[5].lr == 0.25e-12);
  }
  SUBCASE("learning rate respects the floor") {
    NetConfig cfg = small_net();
    cfg.initial_lr = 1e-12;
    cfg.epochs = 6;
    cfg.callback = CallbackConfig{0.1, 1, 5e-13};
    const TrainedNet t = train_net(split.train, split.test, cfg);
    for (std::size_t i = 1; i < t.history.size(); ++i) {
      CHECK(t.history[i].lr <= t.history[i - 1].lr);
      CHECK(t.history[i].lr >= 5e-13);
    }
    CHECK(t.history.back().lr == 5e-13);
  }
  SUBCASE("best accuracy is the history maximum and re-evaluates bit-exactly") {
    NetConfig cfg = small_net();
    cfg.epochs = 5;
    const TrainedNet t = train_net(split.train, split.test, cfg);
    double best = -1;
    int first = 0;
    for (const auto& e : t.history) {
      if (e.val_acc > best) {
        best = e.val_acc;
        first = e.epoch;
      }
    }
    CHECK(t.best_val_accuracy == best);
    CHECK(t.best_epoch == first);
    CHECK(evaluate_net(t.net, split.test).accuracy == t.best_val_accuracy);
    CHECK(t.provenance.n_train == split.train.size());
    CHECK(t.provenance.n_asd_train == split.train.provenance().n_asd);

    const TrainedNet again = train_net(split.train, split.test, cfg);
    CHECK(again.net.params() == t.net.params());
    CHECK(history_to_csv(again.history) == history_to_csv(t.history));
  }
}

TEST_CASE("divergence is reported with its epoch") {
  const Dataset all = small_images(64, 3.0, 6);
  const auto split = split_dataset(all, 0.75, 1);
  NetConfig cfg = small_net();
  cfg.initial_lr = 1e9;
  try {
    train_net(split.train, split.test, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() >= 1);
  }
}

TEST_CASE("validation augmentation") {
  const Dataset val = small_images(100, 1.0, 1);
  const Dataset extra = small_images(125, 1.0, 2);
  const auto aug = augment_validation(val, extra);
  CHECK(aug.dataset.provenance().n_total == 225);
  CHECK(aug.dataset.provenance().validation_augmented);
  // Both generators number subjects from s000000, so 100 ids repeat; all are kept.
  CHECK(aug.duplicate_ids.size() == 100);

  const Dataset empty(DatasetKind::Image, {});
  const auto same = augment_validation(val, empty);
  CHECK(same.dataset.size() == val.size());
  CHECK(same.dataset.provenance().validation_augmented);
  for (std::size_t i = 0; i < val.size(); ++i) {
    CHECK(same.dataset.samples()[i].subject_id == val.samples()[i].subject_id);
  }
  CHECK(same.duplicate_ids.empty());
}

TEST_CASE("network persistence round-trips exactly") {
  const Dataset all = small_images(64, 3.0, 6);
  const auto split = split_dataset(all, 0.75, 1);
  NetConfig cfg = small_net();
  cfg.epochs = 2;
  const auto aug = augment_validation(split.test, small_images(8, 3.0, 9));
  const TrainedNet t = train_net(split.train, aug.dataset, cfg);
  CHECK(t.validation_augmented);
  const NetArtifacts art = save_net(t);
  const TrainedNet back = load_net(art.manifest, art.blob);
  CHECK(back.net.params() == t.net.params());
  CHECK(back.provenance == t.provenance);
  CHECK(back.best_epoch == t.best_epoch);
  CHECK(back.validation_augmented);
  CHECK(history_to_csv(back.history) == history_to_csv(t.history));
  CHECK(evaluate_net(back.net, split.test).accuracy == evaluate_net(t.net, split.test).accuracy);
  CHECK(save_net(back).manifest == art.manifest);
  CHECK(history_to_csv(t.history).rfind("epoch,train_loss,train_acc,val_loss,val_acc,lr\n", 0) == 0);

  auto tampered = art.blob;
  tampered[tampered.size() / 2] ^= 0x01;
  CHECK_THROWS_AS(load_net(art.manifest, tampered), ValidationError);
  auto short_blob = art.blob;
  short_blob.pop_back();
  CHECK_THROWS_AS(load_net(art.manifest, short_blob), ValidationError);
}

}  // TEST_SUITE
