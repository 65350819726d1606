#include "asdscreen/neural.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "asdscreen/io_util.hpp"

namespace asdscreen {

namespace {

constexpr int kNetFormatVersion = 1;
constexpr int kEvalChunk = 256;
constexpr std::uint64_t kShuffleStream = 0xD6E8FEB86659FD93ULL;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

MatX<double> as_matrix(const ParamTensor& p) {
  return Eigen::Map<const MatX<double>>(p.values.data(), p.dims.at(0), p.dims.at(1));
}

void store_matrix(ParamTensor& p, const MatX<double>& m) {
  p.values = Eigen::Map<const VecX<double>>(m.data(), m.size());
}

ParamTensor zero_matrix(Eigen::Index rows, Eigen::Index cols) {
  return ParamTensor{{rows, cols}, VecX<double>::Zero(rows * cols)};
}

ParamTensor zero_vector(Eigen::Index n) { return ParamTensor{{n}, VecX<double>::Zero(n)}; }

int transition_channels(double compression, int in) {
  return static_cast<int>(std::floor(compression * in));
}

double clamp_open_unit(double p) {
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

}  // namespace

// ---------------------------------------------------------------------------
// Specs and shapes

std::string describe(const LayerSpec& spec) {
  std::ostringstream s;
  std::visit(Overloaded{
                 [&](const ConvSpec& c) {
                   s << "Conv(" << c.out_channels << ", " << c.kernel << "x" << c.kernel
                     << ", stride " << c.stride << ", pad " << c.padding << ")";
                 },
                 [&](const ReluSpec&) { s << "ReLU"; },
                 [&](const MaxPoolSpec& m) { s << "MaxPool(" << m.kernel << ", " << m.stride << ")"; },
                 [&](const DenseBlockSpec& d) {
                   s << "DenseBlock(L=" << d.layers << ", g=" << d.growth_rate << ")";
                 },
                 [&](const TransitionSpec& t) { s << "Transition(" << t.compression << ")"; },
                 [&](const GlobalAvgPoolSpec&) { s << "GlobalAvgPool"; },
                 [&](const FullyConnectedSpec& f) { s << "FC(" << f.out << ")"; },
                 [&](const SigmoidHeadSpec&) { s << "Sigmoid"; },
             },
             spec);
  return s.str();
}

Shape3 layer_output_shape(const LayerSpec& spec, const Shape3& in) {
  if (in.h < 1 || in.w < 1 || in.c < 1) throw ValidationError("layer input shape is empty");
  return std::visit(
      Overloaded{
          [&](const ConvSpec& c) {
            if (c.out_channels < 1) throw ValidationError("conv needs out_channels >= 1");
            const Shape3 out{conv_output_dim(in.h, c.kernel, c.stride, c.padding),
                             conv_output_dim(in.w, c.kernel, c.stride, c.padding), c.out_channels};
            if (out.h < 1 || out.w < 1) throw ValidationError("conv output would be empty");
            return out;
          },
          [&](const ReluSpec&) { return in; },
          [&](const MaxPoolSpec& m) {
            const Shape3 out{conv_output_dim(in.h, m.kernel, m.stride, 0),
                             conv_output_dim(in.w, m.kernel, m.stride, 0), in.c};
            if (out.h < 1 || out.w < 1) throw ValidationError("max pool output would be empty");
            return out;
          },
          [&](const DenseBlockSpec& d) {
            if (d.layers < 0 || d.growth_rate < 1) {
              throw ValidationError("dense block needs layers >= 0 and growth_rate >= 1");
            }
            return Shape3{in.h, in.w, in.c + d.layers * d.growth_rate};
          },
          [&](const TransitionSpec& t) {
            if (!(t.compression > 0.0 && t.compression <= 1.0)) {
              throw ValidationError("transition compression must lie in (0,1]");
            }
            const Shape3 out{in.h / 2, in.w / 2, transition_channels(t.compression, in.c)};
            if (out.h < 1 || out.w < 1 || out.c < 1) {
              throw ValidationError("transition output would be empty");
            }
            return out;
          },
          [&](const GlobalAvgPoolSpec&) { return Shape3{1, 1, in.c}; },
          [&](const FullyConnectedSpec& f) {
            if (f.out < 1) throw ValidationError("fully connected layer needs out >= 1");
            return Shape3{1, 1, f.out};
          },
          [&](const SigmoidHeadSpec&) {
            if (in != Shape3{1, 1, 1}) throw ValidationError("sigmoid head needs a single logit");
            return in;
          },
      },
      spec);
}

void CallbackConfig::validate() const {
  if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0)) {
    throw ValidationError("lr_decay_factor must lie in (0,1)");
  }
  if (patience < 1) throw ValidationError("patience must be positive");
  if (!(min_lr > 0.0)) throw ValidationError("min_lr must be positive");
}

void NetConfig::validate() const {
  callback.validate();
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) {
    throw ValidationError("initial_lr must be positive");
  }
  const auto n = layers.size();
  if (n < 2 || !std::holds_alternative<SigmoidHeadSpec>(layers[n - 1]) ||
      !std::holds_alternative<FullyConnectedSpec>(layers[n - 2]) ||
      std::get<FullyConnectedSpec>(layers[n - 2]).out != 1) {
    throw ValidationError("network must end with FullyConnected(1) followed by a sigmoid head");
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (std::holds_alternative<SigmoidHeadSpec>(layers[i])) {
      throw ValidationError("sigmoid head may only appear as the last layer");
    }
  }
}

NetConfig NetConfig::default_dense() {
  NetConfig cfg;
  cfg.layers = {ConvSpec{8, 3, 1, 1},   DenseBlockSpec{4, 4},  TransitionSpec{0.5},
                DenseBlockSpec{4, 4},   GlobalAvgPoolSpec{},   FullyConnectedSpec{1},
                SigmoidHeadSpec{}};
  return cfg;
}

// ---------------------------------------------------------------------------
// Network

struct Network::Cache {
  Tensor4d input;
  std::vector<Tensor4d> aux;
  std::vector<Eigen::Index> argmax;
};

Network::Network(NetConfig config, Shape3 input) : config_(std::move(config)), input_(input) {
  config_.validate();
  Shape3 shape = input_;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    Compiled c{config_.layers[i], shape, {}, params_.size(), 0};
    try {
      c.out = layer_output_shape(c.spec, shape);
    } catch (const ValidationError& e) {
      throw ValidationError("layer " + std::to_string(i) + " (" + describe(c.spec) +
                            "): " + e.what());
    }
    std::visit(Overloaded{
                   [&](const ConvSpec& s) {
                     params_.push_back(zero_matrix(
                         static_cast<Eigen::Index>(s.kernel) * s.kernel * shape.c, s.out_channels));
                     params_.push_back(zero_vector(s.out_channels));
                   },
                   [&](const DenseBlockSpec& s) {
                     for (int l = 0; l < s.layers; ++l) {
                       params_.push_back(zero_matrix(9 * (shape.c + l * s.growth_rate),
                                                     s.growth_rate));
                       params_.push_back(zero_vector(s.growth_rate));
                     }
                   },
                   [&](const TransitionSpec&) {
                     params_.push_back(zero_matrix(shape.c, c.out.c));
                     params_.push_back(zero_vector(c.out.c));
                   },
                   [&](const FullyConnectedSpec& s) {
                     params_.push_back(zero_matrix(
                         static_cast<Eigen::Index>(shape.h) * shape.w * shape.c, s.out));
                     params_.push_back(zero_vector(s.out));
                   },
                   [](const auto&) {},
               },
               c.spec);
    c.n_params = params_.size() - c.first_param;
    shape = c.out;
    layers_.push_back(std::move(c));
  }
}

void Network::set_params(ParamList params) {
  if (params.size() != params_.size()) throw ValidationError("parameter tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].dims != params_[i].dims || params[i].values.size() != params_[i].values.size()) {
      throw ValidationError("parameter tensor " + std::to_string(i) + " has the wrong shape");
    }
    if (!params[i].values.allFinite()) {
      throw ValidationError("parameter tensor " + std::to_string(i) + " is not finite");
    }
  }
  params_ = std::move(params);
}

Eigen::Index Network::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

void Network::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    if (p.dims.size() == 1) {
      p.values.setZero();
      continue;
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(p.dims[0]));
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
      p.values[i] = (2.0 * unit_uniform(rng) - 1.0) * limit;
    }
  }
}

void Network::check_input(const Tensor4d& x) const {
  if (x.h() != input_.h || x.w() != input_.w || x.c() != input_.c) {
    throw ValidationError("layer 0: input shape " + std::to_string(x.h()) + "x" +
                          std::to_string(x.w()) + "x" + std::to_string(x.c()) +
                          " does not match network input " + std::to_string(input_.h) + "x" +
                          std::to_string(input_.w) + "x" + std::to_string(input_.c));
  }
}

Tensor4d Network::run_layer(const Compiled& layer, const Tensor4d& x, Cache* cache) const {
  if (cache) cache->input = x;
  const ParamTensor* p = params_.data() + layer.first_param;
  return std::visit(
      Overloaded{
          [&](const ConvSpec& s) {
            return conv2d_forward(x, as_matrix(p[0]), p[1].values,
                                  ConvGeometry{s.kernel, s.stride, s.padding});
          },
          [&](const ReluSpec&) { return relu_forward(x); },
          [&](const MaxPoolSpec& s) {
            return maxpool_forward(x, s.kernel, s.stride, cache ? &cache->argmax : nullptr);
          },
          [&](const DenseBlockSpec& s) {
            Tensor4d features = x;
            for (int l = 0; l < s.layers; ++l) {
              Tensor4d z = conv2d_forward(features, as_matrix(p[2 * l]), p[2 * l + 1].values,
                                          ConvGeometry{3, 1, 1});
              features = concat_channels(features, relu_forward(z));
              if (cache) cache->aux.push_back(std::move(z));
            }
            if (cache) cache->aux.push_back(features);
            return features;
          },
          [&](const TransitionSpec&) {
            Tensor4d z = conv2d_forward(x, as_matrix(p[0]), p[1].values, ConvGeometry{1, 1, 0});
            Tensor4d y = avgpool2_forward(z);
            if (cache) cache->aux.push_back(std::move(z));
            return y;
          },
          [&](const GlobalAvgPoolSpec&) { return global_avgpool_forward(x); },
          [&](const FullyConnectedSpec& s) {
            const Eigen::Index in = static_cast<Eigen::Index>(x.h()) * x.w() * x.c();
            Eigen::Map<const RowMatX<double>> flat(x.data().data(), x.n(), in);
            const MatX<double> w = as_matrix(p[0]);
            Tensor4d y(x.n(), 1, 1, s.out);
            Eigen::Map<RowMatX<double>> out(y.data().data(), x.n(), s.out);
            // Row by row so a sample's output does not depend on its batch.
            for (int i = 0; i < x.n(); ++i) {
              out.row(i).noalias() = flat.row(i) * w;
              out.row(i) += p[1].values.transpose();
            }
            return y;
          },
          [&](const SigmoidHeadSpec&) -> Tensor4d {
            throw ValidationError("sigmoid head is applied by the loss, not as a layer");
          },
      },
      layer.spec);
}

Tensor4d Network::backprop_layer(const Compiled& layer, const Cache& cache, const Tensor4d& dy,
                                 ParamList& grads) const {
  const ParamTensor* p = params_.data() + layer.first_param;
  ParamTensor* g = grads.data() + layer.first_param;
  const Tensor4d& x = cache.input;
  return std::visit(
      Overloaded{
          [&](const ConvSpec& s) {
            auto cg = conv2d_backward(x, as_matrix(p[0]), ConvGeometry{s.kernel, s.stride, s.padding},
                                      dy);
            store_matrix(g[0], cg.dweights);
            g[1].values = cg.dbias;
            return std::move(cg.dx);
          },
          [&](const ReluSpec&) { return relu_backward(x, dy); },
          [&](const MaxPoolSpec&) { return maxpool_backward(x, cache.argmax, dy); },
          [&](const DenseBlockSpec& s) {
            const Tensor4d& out = cache.aux.back();
            Tensor4d dfeat = dy;
            for (int l = s.layers - 1; l >= 0; --l) {
              const int c_in = x.c() + l * s.growth_rate;
              const Tensor4d da = slice_channels(dfeat, c_in, s.growth_rate);
              const Tensor4d dz = relu_backward(cache.aux[static_cast<std::size_t>(l)], da);
              // Layer l consumed the first c_in channels of the final concatenation.
              const Tensor4d in_l = slice_channels(out, 0, c_in);
              auto cg = conv2d_backward(in_l, as_matrix(p[2 * l]), ConvGeometry{3, 1, 1}, dz);
              store_matrix(g[2 * l], cg.dweights);
              g[2 * l + 1].values = cg.dbias;
              add_channels(dfeat, cg.dx, 0);
            }
            return slice_channels(dfeat, 0, x.c());
          },
          [&](const TransitionSpec&) {
            const Tensor4d& z = cache.aux.front();
            const Tensor4d dz = avgpool2_backward(z, dy);
            auto cg = conv2d_backward(x, as_matrix(p[0]), ConvGeometry{1, 1, 0}, dz);
            store_matrix(g[0], cg.dweights);
            g[1].values = cg.dbias;
            return std::move(cg.dx);
          },
          [&](const GlobalAvgPoolSpec&) { return global_avgpool_backward(x, dy); },
          [&](const FullyConnectedSpec& s) {
            const Eigen::Index in = static_cast<Eigen::Index>(x.h()) * x.w() * x.c();
            Eigen::Map<const RowMatX<double>> flat(x.data().data(), x.n(), in);
            Eigen::Map<const RowMatX<double>> d(dy.data().data(), x.n(), s.out);
            const MatX<double> dw = flat.transpose() * d;
            store_matrix(g[0], dw);
            g[1].values = d.colwise().sum().transpose();
            Tensor4d dx(x.n(), x.h(), x.w(), x.c());
            Eigen::Map<RowMatX<double>> dflat(dx.data().data(), x.n(), in);
            dflat.noalias() = d * as_matrix(p[0]).transpose();
            return dx;
          },
          [&](const SigmoidHeadSpec&) -> Tensor4d {
            throw ValidationError("sigmoid head has no standalone backward pass");
          },
      },
      layer.spec);
}

VecX<double> Network::logits(const Tensor4d& x) const {
  check_input(x);
  Tensor4d a = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) a = run_layer(layers_[i], a, nullptr);
  return a.data();
}

VecX<double> Network::forward(const Tensor4d& x) const {
  VecX<double> z = logits(x);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = clamp_open_unit(sigmoid(z[i]));
  return z;
}

double Network::loss(const Tensor4d& x, std::span<const double> labels01) const {
  const VecX<double> z = logits(x);
  if (static_cast<std::size_t>(z.size()) != labels01.size()) {
    throw ValidationError("label count does not match batch size");
  }
  double total = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    total += softplus(z[i]) - labels01[static_cast<std::size_t>(i)] * z[i];
  }
  return total / static_cast<double>(z.size());
}

double Network::loss_and_gradients(const Tensor4d& x, std::span<const double> labels01,
                                   ParamList& grads) const {
  check_input(x);
  if (static_cast<std::size_t>(x.n()) != labels01.size() || x.n() == 0) {
    throw ValidationError("label count does not match batch size");
  }
  const std::size_t body = layers_.size() - 1;  // everything before the sigmoid head
  std::vector<Cache> caches(body);
  Tensor4d a = x;
  for (std::size_t i = 0; i < body; ++i) a = run_layer(layers_[i], a, &caches[i]);

  const auto n = static_cast<double>(x.n());
  double total = 0;
  Tensor4d dz(x.n(), 1, 1, 1);
  for (int i = 0; i < x.n(); ++i) {
    const double z = a.data()[i];
    const double y = labels01[static_cast<std::size_t>(i)];
    total += softplus(z) - y * z;
    dz.data()[i] = (sigmoid(z) - y) / n;
  }

  grads.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    grads[i].dims = params_[i].dims;
    grads[i].values = VecX<double>::Zero(params_[i].values.size());
  }
  Tensor4d d = std::move(dz);
  for (std::size_t i = body; i-- > 0;) d = backprop_layer(layers_[i], caches[i], d, grads);
  return total / n;
}

// ---------------------------------------------------------------------------
// Training

Tensor4d to_batch(const Dataset& d, std::span<const std::size_t> indices) {
  const auto& first = d.first_image();
  Tensor4d x(static_cast<int>(indices.size()), first.height(), first.width(), first.channels());
  const Eigen::Index per = first.size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = std::get<ImageTensor>(d.samples().at(indices[k]).input);
    x.data().segment(static_cast<Eigen::Index>(k) * per, per) = img.data();
  }
  return x;
}

Tensor4d to_batch(const Dataset& d) {
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return to_batch(d, all);
}

NetEvaluation evaluate_net(const Network& net, const Dataset& d) {
  if (d.empty()) throw ValidationError("cannot evaluate on an empty dataset");
  NetEvaluation ev;
  ev.probabilities.resize(static_cast<Eigen::Index>(d.size()));
  double total = 0;
  std::size_t correct = 0;
  std::size_t labelled = 0;
  for (std::size_t start = 0; start < d.size(); start += kEvalChunk) {
    const std::size_t stop = std::min(d.size(), start + kEvalChunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const VecX<double> z = net.logits(to_batch(d, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double zk = z[static_cast<Eigen::Index>(k)];
      const double p = clamp_open_unit(sigmoid(zk));
      ev.probabilities[static_cast<Eigen::Index>(start + k)] = p;
      const Label truth = d.samples()[start + k].label;
      if (truth == Label::Unlabeled) continue;
      const double y = truth == Label::ASD ? 1.0 : 0.0;
      total += softplus(zk) - y * zk;
      ++labelled;
      if ((p > 0.5) == (truth == Label::ASD)) ++correct;
    }
  }
  if (labelled > 0) {
    ev.loss = total / static_cast<double>(labelled);
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(labelled);
  }
  return ev;
}

TrainedNet train_net(const Dataset& train, const Dataset& val, const NetConfig& cfg) {
  cfg.validate();
  if (train.kind() != DatasetKind::Image || val.kind() != DatasetKind::Image) {
    throw TrainingError("train_net expects image datasets");
  }
  if (train.empty()) throw TrainingError("training set is empty");
  if (val.empty()) throw TrainingError("validation set is empty");
  const auto& img = train.first_image();
  const Shape3 shape{img.height(), img.width(), img.channels()};
  if (!val.first_image().same_shape(img)) {
    throw ValidationError("validation images differ in shape from training images");
  }
  const auto& prov = train.provenance();
  if (prov.n_asd + prov.n_nonasd != prov.n_total) {
    throw TrainingError("training set has unlabeled images");
  }

  Network net(cfg, shape);
  net.initialize(cfg.init_seed);

  std::vector<double> labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    labels[i] = train.samples()[i].label == Label::ASD ? 1.0 : 0.0;
  }

  TrainedNet result{net, {}, TrainingProvenance{prov.n_total, prov.n_asd},
                    val.provenance().validation_augmented, 0, 0.0};
  std::mt19937_64 shuffle_rng(cfg.init_seed ^ kShuffleStream);
  double lr = cfg.initial_lr;
  double best = -std::numeric_limits<double>::infinity();
  int since_improvement = 0;
  ParamList grads;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = seeded_permutation(train.size(), shuffle_rng());
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor4d x = to_batch(train, idx);
      std::vector<double> y(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = labels[idx[k]];

      // Training accuracy is measured on the pre-update parameters of each batch.
      const VecX<double> z = net.logits(x);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        if ((z[static_cast<Eigen::Index>(k)] > 0.0) == (y[k] == 1.0)) ++correct;
      }
      const double batch_loss = net.loss_and_gradients(x, y, grads);
      if (!std::isfinite(batch_loss) || batch_loss > kDivergenceBound) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch), epoch);
      }
      loss_sum += batch_loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < grads.size(); ++i) {
        net.params()[i].values -= lr * grads[i].values;
      }
    }
    const NetEvaluation ev = evaluate_net(net, val);
    if (!std::isfinite(ev.loss)) {
      throw DivergenceError("validation loss is not finite in epoch " + std::to_string(epoch),
                            epoch);
    }
    const auto n = static_cast<double>(train.size());
    result.history.push_back(EpochRecord{epoch, loss_sum / n, static_cast<double>(correct) / n,
                                         ev.loss, ev.accuracy, lr});

    if (ev.accuracy > best) {
      best = ev.accuracy;
      result.net.set_params(net.params());
      result.best_epoch = epoch;
      result.best_val_accuracy = ev.accuracy;
      since_improvement = 0;
    } else if (++since_improvement >= cfg.callback.patience) {
      if (lr > cfg.callback.min_lr) lr = std::max(lr * cfg.callback.lr_decay_factor, cfg.callback.min_lr);
      since_improvement = 0;
    }
  }
  return result;
}

AugmentedValidation augment_validation(const Dataset& val, const Dataset& extra) {
  if (val.kind() != DatasetKind::Image || extra.kind() != DatasetKind::Image) {
    throw ValidationError("validation augmentation needs image datasets");
  }
  if (!val.empty() && !extra.empty() && !val.first_image().same_shape(extra.first_image())) {
    throw ValidationError("extra validation images differ in shape from the validation set");
  }
  std::set<std::string> ids;
  for (const auto& s : val.samples()) ids.insert(s.subject_id);
  AugmentedValidation out{val, {}};
  std::vector<Sample> samples = val.samples();
  for (const auto& s : extra.samples()) {
    if (ids.contains(s.subject_id)) out.duplicate_ids.push_back(s.subject_id);
    samples.push_back(s);
  }
  out.dataset = Dataset(DatasetKind::Image, std::move(samples), true);
  return out;
}

double predict_image(const TrainedNet& net, const ImageTensor& img) {
  const Shape3& s = net.net.input_shape();
  if (img.height() != s.h || img.width() != s.w || img.channels() != s.c) {
    throw ValidationError("image shape does not match the network input");
  }
  return net.net.forward(Tensor4d(1, s.h, s.w, s.c, img.data()))[0];
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

nlohmann::json layer_to_json(const LayerSpec& spec) {
  return std::visit(
      Overloaded{
          [](const ConvSpec& c) {
            return nlohmann::json{{"type", "conv"},     {"out_channels", c.out_channels},
                                  {"kernel", c.kernel}, {"stride", c.stride},
                                  {"padding", c.padding}};
          },
          [](const ReluSpec&) { return nlohmann::json{{"type", "relu"}}; },
          [](const MaxPoolSpec& m) {
            return nlohmann::json{{"type", "maxpool"}, {"kernel", m.kernel}, {"stride", m.stride}};
          },
          [](const DenseBlockSpec& d) {
            return nlohmann::json{
                {"type", "dense_block"}, {"layers", d.layers}, {"growth_rate", d.growth_rate}};
          },
          [](const TransitionSpec& t) {
            return nlohmann::json{{"type", "transition"}, {"compression", t.compression}};
          },
          [](const GlobalAvgPoolSpec&) { return nlohmann::json{{"type", "global_avg_pool"}}; },
          [](const FullyConnectedSpec& f) {
            return nlohmann::json{{"type", "fully_connected"}, {"out", f.out}};
          },
          [](const SigmoidHeadSpec&) { return nlohmann::json{{"type", "sigmoid"}}; },
      },
      spec);
}

LayerSpec layer_from_json(const nlohmann::json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "conv") {
    return ConvSpec{j.at("out_channels").get<int>(), j.at("kernel").get<int>(),
                    j.at("stride").get<int>(), j.at("padding").get<int>()};
  }
  if (type == "relu") return ReluSpec{};
  if (type == "maxpool") return MaxPoolSpec{j.at("kernel").get<int>(), j.at("stride").get<int>()};
  if (type == "dense_block") {
    return DenseBlockSpec{j.at("layers").get<int>(), j.at("growth_rate").get<int>()};
  }
  if (type == "transition") return TransitionSpec{j.at("compression").get<double>()};
  if (type == "global_avg_pool") return GlobalAvgPoolSpec{};
  if (type == "fully_connected") return FullyConnectedSpec{j.at("out").get<int>()};
  if (type == "sigmoid") return SigmoidHeadSpec{};
  throw ValidationError("unknown layer type '" + type + "'");
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) {
    throw DecodeError("parameter blob is truncated", pos);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

}  // namespace

NetArtifacts save_net(const TrainedNet& t) {
  NetArtifacts a;
  for (const auto& p : t.net.params()) {
    put_u32(a.blob, static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) put_u64(a.blob, static_cast<std::uint64_t>(d));
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
      put_u64(a.blob, std::bit_cast<std::uint64_t>(p.values[i]));
    }
  }

  const auto& cfg = t.net.config();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) layers.push_back(layer_to_json(l));
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : t.history) {
    history.push_back({{"epoch", h.epoch},
                       {"train_loss", h.train_loss},
                       {"train_acc", h.train_acc},
                       {"val_loss", h.val_loss},
                       {"val_acc", h.val_acc},
                       {"lr", h.lr}});
  }
  const auto& in = t.net.input_shape();
  nlohmann::json j;
  j["format_version"] = kNetFormatVersion;
  j["kind"] = "cnn";
  j["input_shape"] = {{"height", in.h}, {"width", in.w}, {"channels", in.c}};
  j["config"] = {{"layers", layers},
                 {"init_seed", cfg.init_seed},
                 {"batch_size", cfg.batch_size},
                 {"epochs", cfg.epochs},
                 {"initial_lr", cfg.initial_lr},
                 {"callback",
                  {{"lr_decay_factor", cfg.callback.lr_decay_factor},
                   {"patience", cfg.callback.patience},
                   {"min_lr", cfg.callback.min_lr},
                   {"checkpoint_metric", "val_accuracy"}}}};
  j["provenance"] = {{"n_train", t.provenance.n_train},
                     {"n_asd_train", t.provenance.n_asd_train}};
  j["validation_augmented"] = t.validation_augmented;
  j["best_epoch"] = t.best_epoch;
  j["best_val_accuracy"] = t.best_val_accuracy;
  j["history"] = history;
  j["parameters"] = {{"tensors", t.net.params().size()},
                     {"blob_bytes", a.blob.size()},
                     {"blob_sha256", io::sha256_hex(std::span<const std::uint8_t>(a.blob))}};
  a.manifest = j.dump(2) + "\n";
  return a;
}

TrainedNet load_net(std::string_view manifest, std::span<const std::uint8_t> blob) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed network manifest: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kNetFormatVersion) {
      throw ValidationError("unsupported network format_version");
    }
    if (j.at("parameters").at("blob_sha256").get<std::string>() != io::sha256_hex(blob)) {
      throw ValidationError("parameter blob does not match the manifest checksum");
    }
    NetConfig cfg;
    for (const auto& l : j.at("config").at("layers")) cfg.layers.push_back(layer_from_json(l));
    const auto& c = j.at("config");
    cfg.init_seed = c.at("init_seed").get<std::uint64_t>();
    cfg.batch_size = c.at("batch_size").get<int>();
    cfg.epochs = c.at("epochs").get<int>();
    cfg.initial_lr = c.at("initial_lr").get<double>();
    cfg.callback.lr_decay_factor = c.at("callback").at("lr_decay_factor").get<double>();
    cfg.callback.patience = c.at("callback").at("patience").get<int>();
    cfg.callback.min_lr = c.at("callback").at("min_lr").get<double>();
    const Shape3 shape{j.at("input_shape").at("height").get<int>(),
                       j.at("input_shape").at("width").get<int>(),
                       j.at("input_shape").at("channels").get<int>()};
    Network net(cfg, shape);

    ParamList params;
    std::size_t pos = 0;
    while (pos < blob.size()) {
      ParamTensor p;
      const auto rank = get_le(blob, pos, 4);
      Eigen::Index count = 1;
      for (std::uint64_t r = 0; r < rank; ++r) {
        p.dims.push_back(static_cast<Eigen::Index>(get_le(blob, pos, 8)));
        count *= p.dims.back();
      }
      p.values.resize(count);
      for (Eigen::Index i = 0; i < count; ++i) {
        p.values[i] = std::bit_cast<double>(get_le(blob, pos, 8));
      }
      params.push_back(std::move(p));
    }
    net.set_params(std::move(params));

    TrainedNet t{std::move(net), {}, {}, j.at("validation_augmented").get<bool>(),
                 j.at("best_epoch").get<int>(), j.at("best_val_accuracy").get<double>()};
    t.provenance.n_train = j.at("provenance").at("n_train").get<std::size_t>();
    t.provenance.n_asd_train = j.at("provenance").at("n_asd_train").get<std::size_t>();
    for (const auto& h : j.at("history")) {
      t.history.push_back(EpochRecord{h.at("epoch").get<int>(), h.at("train_loss").get<double>(),
                                      h.at("train_acc").get<double>(),
                                      h.at("val_loss").get<double>(),
                                      h.at("val_acc").get<double>(), h.at("lr").get<double>()});
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed network manifest: ") + e.what());
  }
}

std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc,lr\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch) + "," + io::format_double(h.train_loss) + "," +
           io::format_double(h.train_acc) + "," + io::format_double(h.val_loss) + "," +
           io::format_double(h.val_acc) + "," + io::format_double(h.lr) + "\n";
  }
  return out;
}

}  // namespace asdscreen
