#include "pnmf/neuralkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/rng.hpp"

namespace pnmf::nn {
namespace {

using nlohmann::json;

std::size_t conv_length(const LayerSpec& l) { return l.in_dim / l.in_channels; }
std::size_t conv_out_length(const LayerSpec& l) { return l.out_dim / l.out_channels; }

void forward_layer(const LayerSpec& l, const double* p, const double* x, double* y) {
  switch (l.kind) {
    case LayerKind::Dense: {
      const double* bias = p + l.in_dim * l.out_dim;
      for (std::size_t o = 0; o < l.out_dim; ++o) {
        const double* w = p + o * l.in_dim;
        double acc = bias[o];
        for (std::size_t i = 0; i < l.in_dim; ++i) acc += w[i] * x[i];
        y[o] = acc;
      }
      break;
    }
    case LayerKind::Conv1d: {
      const std::size_t len = conv_length(l);
      const std::size_t out_len = conv_out_length(l);
      const double* bias = p + l.out_channels * l.in_channels * l.kernel;
      for (std::size_t o = 0; o < l.out_channels; ++o) {
        for (std::size_t j = 0; j < out_len; ++j) {
          double acc = bias[o];
          for (std::size_t c = 0; c < l.in_channels; ++c) {
            const double* w = p + (o * l.in_channels + c) * l.kernel;
            const double* xs = x + c * len + j * l.stride;
            for (std::size_t q = 0; q < l.kernel; ++q) acc += w[q] * xs[q];
          }
          y[o * out_len + j] = acc;
        }
      }
      break;
    }
    case LayerKind::Relu:
      for (std::size_t i = 0; i < l.in_dim; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case LayerKind::Flatten:
      std::copy(x, x + l.in_dim, y);
      break;
    case LayerKind::Softmax: {
      const double mx = *std::max_element(x, x + l.in_dim);
      double sum = 0.0;
      for (std::size_t i = 0; i < l.in_dim; ++i) {
        y[i] = std::exp(x[i] - mx);
        sum += y[i];
      }
      for (std::size_t i = 0; i < l.in_dim; ++i) y[i] /= sum;
      break;
    }
  }
}

// dx = dL/dx for one sample; parameter gradients are accumulated into gp.
void backward_layer(const LayerSpec& l, const double* p, const double* x, const double* y,
                    const double* dy, double* dx, double* gp) {
  switch (l.kind) {
    case LayerKind::Dense: {
      std::fill(dx, dx + l.in_dim, 0.0);
      double* gbias = gp + l.in_dim * l.out_dim;
      for (std::size_t o = 0; o < l.out_dim; ++o) {
        const double g = dy[o];
        const double* w = p + o * l.in_dim;
        double* gw = gp + o * l.in_dim;
        for (std::size_t i = 0; i < l.in_dim; ++i) {
          gw[i] += g * x[i];
          dx[i] += g * w[i];
        }
        gbias[o] += g;
      }
      break;
    }
    case LayerKind::Conv1d: {
      std::fill(dx, dx + l.in_dim, 0.0);
      const std::size_t len = conv_length(l);
      const std::size_t out_len = conv_out_length(l);
      double* gbias = gp + l.out_channels * l.in_channels * l.kernel;
      for (std::size_t o = 0; o < l.out_channels; ++o) {
        for (std::size_t j = 0; j < out_len; ++j) {
          const double g = dy[o * out_len + j];
          gbias[o] += g;
          for (std::size_t c = 0; c < l.in_channels; ++c) {
            const double* w = p + (o * l.in_channels + c) * l.kernel;
            double* gw = gp + (o * l.in_channels + c) * l.kernel;
            const std::size_t base = c * len + j * l.stride;
            for (std::size_t q = 0; q < l.kernel; ++q) {
              gw[q] += g * x[base + q];
              dx[base + q] += g * w[q];
            }
          }
        }
      }
      break;
    }
    case LayerKind::Relu:
      for (std::size_t i = 0; i < l.in_dim; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
      break;
    case LayerKind::Flatten:
      std::copy(dy, dy + l.in_dim, dx);
      break;
    case LayerKind::Softmax: {
      double dot = 0.0;
      for (std::size_t i = 0; i < l.in_dim; ++i) dot += dy[i] * y[i];
      for (std::size_t i = 0; i < l.in_dim; ++i) dx[i] = y[i] * (dy[i] - dot);
      break;
    }
  }
}

std::vector<std::size_t> layer_offsets(const std::vector<LayerSpec>& layers) {
  std::vector<std::size_t> out;
  std::size_t acc = 0;
  for (const auto& l : layers) {
    out.push_back(acc);
    acc += l.param_count();
  }
  out.push_back(acc);
  return out;
}

void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) fail(ErrorCode::BadConfig, "network has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_dim == 0 || l.out_dim == 0) fail(ErrorCode::BadConfig, "layer " + std::to_string(i) + " has a zero dimension");
    if (l.kind == LayerKind::Conv1d) {
      if (l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 ||
          l.in_dim % l.in_channels != 0) {
        fail(ErrorCode::BadConfig, "conv1d layer " + std::to_string(i) + " has invalid parameters");
      }
      const std::size_t len = l.in_dim / l.in_channels;
      if (l.kernel > len || l.out_dim != l.out_channels * ((len - l.kernel) / l.stride + 1)) {
        fail(ErrorCode::BadConfig, "conv1d layer " + std::to_string(i) + " has inconsistent dims");
      }
    } else if (l.kind != LayerKind::Dense && l.in_dim != l.out_dim) {
      fail(ErrorCode::BadConfig, "layer " + std::to_string(i) + " must preserve its dimension");
    }
    if (i > 0 && layers[i - 1].out_dim != l.in_dim) {
      fail(ErrorCode::BadConfig, "layer " + std::to_string(i) + " input does not match previous output");
    }
  }
}

std::vector<double> widen(std::span<const float> w) { return {w.begin(), w.end()}; }

std::vector<float> narrow(std::span<const double> w) {
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<float>(w[i]);
  return out;
}

std::vector<double> flat(const DenseMatrix& m) { return {m.data().begin(), m.data().end()}; }

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
  }
  return "dense";
}

std::size_t LayerSpec::param_count() const noexcept {
  switch (kind) {
    case LayerKind::Dense: return in_dim * out_dim + out_dim;
    case LayerKind::Conv1d: return out_channels * in_channels * kernel + out_channels;
    default: return 0;
  }
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  return {LayerKind::Dense, in, out, 1, 1, 1, 1};
}

LayerSpec LayerSpec::conv1d(std::size_t in_channels, std::size_t length, std::size_t out_channels,
                            std::size_t kernel, std::size_t stride) {
  const std::size_t out_len = length >= kernel && stride > 0 ? (length - kernel) / stride + 1 : 0;
  return {LayerKind::Conv1d, in_channels * length, out_channels * out_len,
          in_channels, out_channels, kernel, stride};
}

LayerSpec LayerSpec::relu(std::size_t dim) { return {LayerKind::Relu, dim, dim, 1, 1, 1, 1}; }
LayerSpec LayerSpec::flatten(std::size_t dim) { return {LayerKind::Flatten, dim, dim, 1, 1, 1, 1}; }
LayerSpec LayerSpec::softmax(std::size_t dim) { return {LayerKind::Softmax, dim, dim, 1, 1, 1, 1}; }

std::size_t NetModel::input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
std::size_t NetModel::output_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }

std::size_t NetModel::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

std::vector<std::size_t> NetModel::offsets() const {
  auto out = layer_offsets(layers);
  out.pop_back();
  return out;
}

void NetModel::validate() const {
  validate_layers(layers);
  if (weights.size() != parameter_count()) {
    fail(ErrorCode::BadConfig, "weight count " + std::to_string(weights.size()) +
                                   " != parameter count " + std::to_string(parameter_count()));
  }
}

NetModel make_model(std::vector<LayerSpec> layers, const TrainConfig& config) {
  validate_layers(layers);
  NetModel model;
  model.layers = std::move(layers);
  model.train_config = config;
  model.weights.assign(model.parameter_count(), 0.0f);
  KeyedRng rng(config.seed, "init");
  const auto offs = layer_offsets(model.layers);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    std::size_t fan_in = 0, fan_out = 0, n_weights = 0;
    if (l.kind == LayerKind::Dense) {
      fan_in = l.in_dim;
      fan_out = l.out_dim;
      n_weights = l.in_dim * l.out_dim;
    } else if (l.kind == LayerKind::Conv1d) {
      fan_in = l.in_channels * l.kernel;
      fan_out = l.out_channels * l.kernel;
      n_weights = l.out_channels * l.in_channels * l.kernel;
    } else {
      continue;
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t k = 0; k < n_weights; ++k) {
      model.weights[offs[i] + k] = static_cast<float>(rng.uniform(-limit, limit));
    }
  }
  return model;
}

Network::Network(std::vector<LayerSpec> layers, std::vector<double> params)
    : layers_(std::move(layers)), params_(std::move(params)) {
  validate_layers(layers_);
  offsets_ = layer_offsets(layers_);
  if (params_.size() != offsets_.back()) fail(ErrorCode::BadConfig, "parameter vector has wrong length");
}

Network::Network(const NetModel& model) : Network(model.layers, widen(model.weights)) {}

Tape Network::forward(std::span<const double> batch, std::size_t batch_size) const {
  if (batch.size() != batch_size * input_dim()) {
    fail(ErrorCode::ShapeError, "input has " + std::to_string(batch.size()) + " values, expected " +
                                    std::to_string(batch_size) + "x" + std::to_string(input_dim()));
  }
  Tape tape;
  tape.batch = batch_size;
  tape.values.reserve(layers_.size() + 1);
  tape.values.emplace_back(batch.begin(), batch.end());
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& l = layers_[li];
    std::vector<double> out(batch_size * l.out_dim);
    const auto& in = tape.values.back();
    for (std::size_t b = 0; b < batch_size; ++b) {
      forward_layer(l, params_.data() + offsets_[li], in.data() + b * l.in_dim, out.data() + b * l.out_dim);
    }
    tape.values.push_back(std::move(out));
  }
  return tape;
}

std::vector<double> Network::predict(std::span<const double> sample) const {
  Tape t = forward(sample, 1);
  return std::move(t.values.back());
}

Gradients Network::backward(const Tape& tape, std::span<const double> upstream,
                            std::size_t from_layer) const {
  if (from_layer == static_cast<std::size_t>(-1)) from_layer = layers_.size();
  if (tape.values.size() != layers_.size() + 1 || tape.batch == 0 ||
      tape.values.front().size() != tape.batch * input_dim()) {
    fail(ErrorCode::StateError, "no forward cache for this network and batch");
  }
  if (from_layer == 0 || from_layer > layers_.size()) fail(ErrorCode::StateError, "invalid start layer");
  const std::size_t B = tape.batch;
  if (upstream.size() != B * layers_[from_layer - 1].out_dim) {
    fail(ErrorCode::ShapeError, "upstream gradient has wrong size");
  }
  Gradients g;
  g.params.assign(params_.size(), 0.0);
  std::vector<double> dy(upstream.begin(), upstream.end());
  for (std::size_t li = from_layer; li-- > 0;) {
    const auto& l = layers_[li];
    std::vector<double> dx(B * l.in_dim);
    const auto& x = tape.values[li];
    const auto& y = tape.values[li + 1];
    for (std::size_t b = 0; b < B; ++b) {
      backward_layer(l, params_.data() + offsets_[li], x.data() + b * l.in_dim, y.data() + b * l.out_dim,
                     dy.data() + b * l.out_dim, dx.data() + b * l.in_dim, g.params.data() + offsets_[li]);
    }
    dy = std::move(dx);
  }
  g.input = std::move(dy);
  return g;
}

LossResult evaluate_loss(const Network& net, const Tape& tape, Loss loss, std::span<const double> targets) {
  const std::size_t B = tape.batch;
  const std::size_t D = net.output_dim();
  const auto out = tape.output();
  if (targets.size() != B * D) fail(ErrorCode::ShapeError, "targets have wrong size");
  LossResult r;
  r.grad.assign(B * D, 0.0);
  if (loss == Loss::CrossEntropy) {
    if (net.layers().back().kind != LayerKind::Softmax) {
      fail(ErrorCode::BadConfig, "cross-entropy requires a trailing softmax layer");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < B * D; ++i) {
      if (targets[i] != 0.0) total -= targets[i] * std::log(std::max(out[i], 1e-300));
      r.grad[i] = (out[i] - targets[i]) / static_cast<double>(B);
    }
    r.loss = total / static_cast<double>(B);
    r.from_layer = net.layers().size() - 1;
  } else {
    double total = 0.0;
    for (std::size_t i = 0; i < B * D; ++i) {
      const double d = out[i] - targets[i];
      total += d * d;
      r.grad[i] = 2.0 * d / static_cast<double>(B * D);
    }
    r.loss = total / static_cast<double>(B * D);
    r.from_layer = net.layers().size();
  }
  return r;
}

Tape forward(const NetModel& model, const DenseMatrix& batch) {
  model.validate();
  if (batch.cols() != model.input_dim()) {
    fail(ErrorCode::ShapeError, "batch width " + std::to_string(batch.cols()) + " != input dim " +
                                    std::to_string(model.input_dim()));
  }
  return Network(model).forward(flat(batch), batch.rows());
}

std::vector<double> backward(const NetModel& model, const Tape& tape, const DenseMatrix& upstream) {
  const Network net(model);
  return net.backward(tape, flat(upstream)).params;
}

DenseMatrix input_gradient(const NetModel& model, const DenseMatrix& batch, Loss loss,
                           const DenseMatrix& targets) {
  const Network net(model);
  if (batch.cols() != net.input_dim()) fail(ErrorCode::ShapeError, "batch width mismatch");
  const Tape tape = net.forward(flat(batch), batch.rows());
  const LossResult lr = evaluate_loss(net, tape, loss, flat(targets));
  const Gradients g = net.backward(tape, lr.grad, lr.from_layer);
  return DenseMatrix::from_doubles(batch.rows(), batch.cols(), g.input);
}

TrainResult train(NetModel model, const DenseMatrix& data, const DenseMatrix& targets, Loss loss,
                  const TrainConfig& config, const TrainHooks& hooks) {
  model.validate();
  const std::size_t N = data.rows();
  const std::size_t in = model.input_dim();
  const std::size_t out = model.output_dim();
  if (data.cols() != in || targets.cols() != out || targets.rows() != N || N == 0) {
    fail(ErrorCode::ShapeError, "training data/targets do not match the network");
  }
  if (config.epochs < 1 || config.batch_size < 1) fail(ErrorCode::BadConfig, "epochs and batch size must be >= 1");
  model.train_config = config;

  std::vector<double> w = widen(model.weights);
  std::vector<double> m(w.size(), 0.0), v(w.size(), 0.0);
  std::vector<float> best = model.weights;
  double best_metric = 0.0;
  bool have_best = false;

  TrainLog log;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> xb, yb;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    KeyedRng rng(config.seed, "shuffle", epoch);
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < N; start += config.batch_size) {
      const std::size_t B = std::min(config.batch_size, N - start);
      xb.assign(B * in, 0.0);
      yb.assign(B * out, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const auto xr = data.row(order[start + b]);
        const auto yr = targets.row(order[start + b]);
        std::copy(xr.begin(), xr.end(), xb.begin() + static_cast<std::ptrdiff_t>(b * in));
        std::copy(yr.begin(), yr.end(), yb.begin() + static_cast<std::ptrdiff_t>(b * out));
      }
      const Network net(model.layers, w);
      const Tape tape = net.forward(xb, B);
      const LossResult lr = evaluate_loss(net, tape, loss, yb);
      if (!std::isfinite(lr.loss)) {
        fail(ErrorCode::TrainingDiverged, "non-finite loss at iteration " + std::to_string(step));
      }
      log.iteration_loss.push_back(lr.loss);
      epoch_total += lr.loss * static_cast<double>(B);
      const Gradients g = net.backward(tape, lr.grad, lr.from_layer);
      ++step;
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g.params[k];
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g.params[k] * g.params[k];
        w[k] -= config.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_epsilon);
      }
    }
    log.epoch_loss.push_back(epoch_total / static_cast<double>(N));

    model.weights = narrow(w);
    if (hooks.train_metric || hooks.val_metric) {
      const Network rounded(model);
      if (hooks.train_metric) log.epoch_train_metric.push_back(hooks.train_metric(rounded));
      if (hooks.val_metric) {
        const double metric = hooks.val_metric(rounded);
        log.epoch_val_metric.push_back(metric);
        const bool better = !have_best || (hooks.higher_is_better ? metric > best_metric : metric < best_metric);
        if (better) {
          best_metric = metric;
          best = model.weights;
          log.best_epoch = epoch;
          have_best = true;
        }
      }
    }
  }
  if (have_best) {
    model.weights = best;
  } else {
    log.best_epoch = config.epochs - 1;
  }
  return {std::move(model), std::move(log)};
}

std::string architecture_json(const NetModel& model) {
  json layers = json::array();
  for (const auto& l : model.layers) {
    json j = {{"kind", std::string(to_string(l.kind))}, {"in_dim", l.in_dim}, {"out_dim", l.out_dim}};
    if (l.kind == LayerKind::Conv1d) {
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
    }
    layers.push_back(j);
  }
  const auto& c = model.train_config;
  json doc = {{"layers", layers},
              {"parameter_count", model.parameter_count()},
              {"offsets", model.offsets()},
              {"train_config",
               {{"optimizer", "adam"},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"epsilon", c.adam_epsilon},
                {"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"seed", c.seed}}}};
  return doc.dump(2);
}

NetModel model_from_json(std::string_view json_text, std::vector<float> weights) {
  NetModel model;
  try {
    const json doc = json::parse(json_text);
    for (const auto& j : doc.at("layers")) {
      LayerSpec l;
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "dense") l.kind = LayerKind::Dense;
      else if (kind == "conv1d") l.kind = LayerKind::Conv1d;
      else if (kind == "relu") l.kind = LayerKind::Relu;
      else if (kind == "flatten") l.kind = LayerKind::Flatten;
      else if (kind == "softmax") l.kind = LayerKind::Softmax;
      else fail(ErrorCode::FormatError, "unknown layer kind '" + kind + "'");
      l.in_dim = j.at("in_dim").get<std::size_t>();
      l.out_dim = j.at("out_dim").get<std::size_t>();
      if (l.kind == LayerKind::Conv1d) {
        l.in_channels = j.at("in_channels").get<std::size_t>();
        l.out_channels = j.at("out_channels").get<std::size_t>();
        l.kernel = j.at("kernel").get<std::size_t>();
        l.stride = j.at("stride").get<std::size_t>();
      }
      model.layers.push_back(l);
    }
    const auto& c = doc.at("train_config");
    model.train_config.beta1 = c.at("beta1").get<double>();
    model.train_config.beta2 = c.at("beta2").get<double>();
    model.train_config.adam_epsilon = c.at("epsilon").get<double>();
    model.train_config.learning_rate = c.at("learning_rate").get<double>();
    model.train_config.batch_size = c.at("batch_size").get<std::size_t>();
    model.train_config.epochs = c.at("epochs").get<std::size_t>();
    model.train_config.seed = c.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("architecture JSON: ") + e.what());
  }
  model.weights = std::move(weights);
  model.validate();
  return model;
}

}  // namespace pnmf::nn
