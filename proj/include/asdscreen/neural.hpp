#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "asdscreen/datamodel.hpp"
#include "asdscreen/tabular.hpp"
#include "asdscreen/tensor.hpp"

namespace asdscreen {

// ---------------------------------------------------------------------------
// Layer specifications

struct ConvSpec {
  int out_channels = 8;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
};
struct ReluSpec {};
struct MaxPoolSpec {
  int kernel = 2;
  int stride = 2;
};
/// `layers` internal 3x3 convolutions, each followed by ReLU and adding
/// `growth_rate` channels to the running concatenation.
struct DenseBlockSpec {
  int layers = 4;
  int growth_rate = 4;
};
/// 1x1 convolution to floor(compression * c) channels, then 2x2 average pooling.
struct TransitionSpec {
  double compression = 0.5;
};
struct GlobalAvgPoolSpec {};
struct FullyConnectedSpec {
  int out = 1;
};
struct SigmoidHeadSpec {};

using LayerSpec = std::variant<ConvSpec, ReluSpec, MaxPoolSpec, DenseBlockSpec, TransitionSpec,
                               GlobalAvgPoolSpec, FullyConnectedSpec, SigmoidHeadSpec>;

std::string describe(const LayerSpec& spec);

struct Shape3 {
  int h = 0;
  int w = 0;
  int c = 0;
  bool operator==(const Shape3&) const = default;
};

/// Output shape of one layer, or ValidationError when the input is incompatible.
Shape3 layer_output_shape(const LayerSpec& spec, const Shape3& in);

struct CallbackConfig {
  double lr_decay_factor = 0.5;
  int patience = 3;
  double min_lr = 1e-5;

  void validate() const;
};

struct NetConfig {
  std::vector<LayerSpec> layers;
  std::uint64_t init_seed = 0;
  int batch_size = 32;
  int epochs = 20;
  double initial_lr = 0.05;
  CallbackConfig callback;

  void validate() const;

  /// Conv(8, 3x3) -> DenseBlock(4, 4) -> Transition(0.5) -> DenseBlock(4, 4)
  /// -> GlobalAvgPool -> FC(1) -> Sigmoid.
  static NetConfig default_dense();
};

/// One learnable tensor. Conv weights are (k*k*c_in, c_out); FC weights (in, out).
struct ParamTensor {
  std::vector<Eigen::Index> dims;
  VecX<double> values;

  bool operator==(const ParamTensor& o) const { return dims == o.dims && values == o.values; }
};

using ParamList = std::vector<ParamTensor>;

/// A validated layer stack over a fixed input shape, plus its parameters.
class Network {
 public:
  Network(NetConfig config, Shape3 input);

  const NetConfig& config() const noexcept { return config_; }
  const Shape3& input_shape() const noexcept { return input_; }
  const ParamList& params() const noexcept { return params_; }
  ParamList& params() noexcept { return params_; }
  void set_params(ParamList params);
  Eigen::Index parameter_count() const;

  /// Fan-in scaled uniform initialisation U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero.
  void initialize(std::uint64_t seed);

  /// Pre-sigmoid outputs, one per batch element.
  VecX<double> logits(const Tensor4d& x) const;

  /// ASD probabilities strictly inside (0,1).
  VecX<double> forward(const Tensor4d& x) const;

  /// Mean binary cross-entropy over the batch and its exact gradient for every
  /// parameter tensor (same order and shapes as params()).
  double loss_and_gradients(const Tensor4d& x, std::span<const double> labels01,
                            ParamList& grads) const;

  double loss(const Tensor4d& x, std::span<const double> labels01) const;

 private:
  struct Compiled {
    LayerSpec spec;
    Shape3 in;
    Shape3 out;
    std::size_t first_param = 0;
    std::size_t n_params = 0;
  };
  struct Cache;

  Tensor4d run_layer(const Compiled& layer, const Tensor4d& x, Cache* cache) const;
  Tensor4d backprop_layer(const Compiled& layer, const Cache& cache, const Tensor4d& dy,
                          ParamList& grads) const;
  void check_input(const Tensor4d& x) const;

  NetConfig config_;
  Shape3 input_;
  std::vector<Compiled> layers_;
  ParamList params_;
};

/// Per-epoch record of the training callback.
struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
  double lr = 0;
};

struct TrainedNet {
  Network net;
  std::vector<EpochRecord> history;
  TrainingProvenance provenance;
  bool validation_augmented = false;
  int best_epoch = 0;  // 1-based epoch whose parameters are stored
  double best_val_accuracy = 0;
};

/// Stack images into an (n, h, w, c) batch.
Tensor4d to_batch(const Dataset& d, std::span<const std::size_t> indices);
Tensor4d to_batch(const Dataset& d);

struct NetEvaluation {
  double loss = 0;
  double accuracy = 0;
  VecX<double> probabilities;
};

/// Forward over the whole set in fixed-size chunks; ASD iff p > 0.5.
NetEvaluation evaluate_net(const Network& net, const Dataset& d);

/// Mini-batch gradient descent with the validation callback: the learning
/// rate decays after `patience` epochs without validation-accuracy improvement
/// and parameters are checkpointed on every strict improvement.
TrainedNet train_net(const Dataset& train, const Dataset& val, const NetConfig& cfg);

struct AugmentedValidation {
  Dataset dataset;
  std::vector<std::string> duplicate_ids;  // present in both inputs; all copies kept
};

/// Append extra images (e.g. frames from home videos) to a validation set and
/// flag the result as augmented.
AugmentedValidation augment_validation(const Dataset& val, const Dataset& extra);

double predict_image(const TrainedNet& net, const ImageTensor& img);

struct NetArtifacts {
  std::string manifest;            // JSON
  std::vector<std::uint8_t> blob;  // parameter tensors, little-endian
};

NetArtifacts save_net(const TrainedNet& net);
TrainedNet load_net(std::string_view manifest, std::span<const std::uint8_t> blob);

std::string history_to_csv(const std::vector<EpochRecord>& history);

}  // namespace asdscreen
