#pragma once

// Small reverse-mode network kernel shared by the classifier and the denoiser.
// Weights are stored as 32-bit reals; all arithmetic runs in 64-bit.
// Batches are row-major with one sample per row.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pnmf/matrix.hpp"

namespace pnmf::nn {

enum class LayerKind { Dense, Conv1d, Relu, Flatten, Softmax };

std::string_view to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  // Conv1d only; input laid out channel-major as in_channels x length.
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;

  std::size_t param_count() const noexcept;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv1d(std::size_t in_channels, std::size_t length, std::size_t out_channels,
                          std::size_t kernel, std::size_t stride = 1);
  static LayerSpec relu(std::size_t dim);
  static LayerSpec flatten(std::size_t dim);
  static LayerSpec softmax(std::size_t dim);
};

enum class Loss { CrossEntropy, Mse };

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 60;
  std::uint64_t seed = 1;
};

struct NetModel {
  std::vector<LayerSpec> layers;
  std::vector<float> weights;
  TrainConfig train_config;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const noexcept;
  /// Start of each layer's parameters in `weights`.
  std::vector<std::size_t> offsets() const;
  /// Throws BadConfig unless the stack chains and the weight count matches.
  void validate() const;
};

/// Builds a model with Glorot-uniform weights and zero biases from a keyed seed.
NetModel make_model(std::vector<LayerSpec> layers, const TrainConfig& config);

/// Per-layer values recorded by a forward pass; values[0] is the input batch,
/// values[l + 1] the output of layer l.
struct Tape {
  std::size_t batch = 0;
  std::vector<std::vector<double>> values;

  std::span<const double> output() const { return values.back(); }
};

struct Gradients {
  std::vector<double> params;
  std::vector<double> input;
};

/// Evaluation engine over 64-bit parameters. Immutable and thread-safe.
class Network {
 public:
  Network(std::vector<LayerSpec> layers, std::vector<double> params);
  explicit Network(const NetModel& model);

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t input_dim() const noexcept { return layers_.front().in_dim; }
  std::size_t output_dim() const noexcept { return layers_.back().out_dim; }

  Tape forward(std::span<const double> batch, std::size_t batch_size) const;
  std::vector<double> predict(std::span<const double> sample) const;

  /// Reverse pass from the output of layer `from_layer - 1` (default: network
  /// output) down to the input. `upstream` has batch x dim(that output) entries.
  Gradients backward(const Tape& tape, std::span<const double> upstream,
                     std::size_t from_layer = static_cast<std::size_t>(-1)) const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<double> params_;
  std::vector<std::size_t> offsets_;
};

struct LossResult {
  double loss = 0.0;
  /// Gradient w.r.t. the output of layer `from_layer - 1`.
  std::vector<double> grad;
  std::size_t from_layer = 0;
};

/// Batch-mean loss. Cross-entropy expects a trailing softmax and returns the
/// combined (p - y) / B gradient at the logits; MSE is mean ||y - t||^2 / D.
LossResult evaluate_loss(const Network& net, const Tape& tape, Loss loss,
                         std::span<const double> targets);

Tape forward(const NetModel& model, const DenseMatrix& batch);
/// Parameter gradient for an upstream gradient on the network output.
std::vector<double> backward(const NetModel& model, const Tape& tape, const DenseMatrix& upstream);
/// Gradient of the batch-mean loss with respect to every input entry (batch x in).
DenseMatrix input_gradient(const NetModel& model, const DenseMatrix& batch, Loss loss,
                           const DenseMatrix& targets);

struct TrainLog {
  std::vector<double> iteration_loss;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_train_metric;
  std::vector<double> epoch_val_metric;
  std::size_t best_epoch = 0;
};

struct TrainHooks {
  std::function<double(const Network&)> train_metric;
  std::function<double(const Network&)> val_metric;
  bool higher_is_better = true;
};

struct TrainResult {
  NetModel model;
  TrainLog log;
};

/// Adam over seeded shuffled mini-batches. With a val_metric the weights of
/// the best epoch (evaluated after rounding to 32-bit) are returned.
TrainResult train(NetModel model, const DenseMatrix& data, const DenseMatrix& targets, Loss loss,
                  const TrainConfig& config, const TrainHooks& hooks = {});

/// Architecture as JSON text (layers + train config).
std::string architecture_json(const NetModel& model);
NetModel model_from_json(std::string_view json_text, std::vector<float> weights);

}  // namespace pnmf::nn
