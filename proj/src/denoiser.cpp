#include "pnmf/denoiser.hpp"

#include <cmath>

#include "pnmf/error.hpp"

namespace pnmf::denoiser {

std::vector<double> embed_time(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) fail(ErrorCode::BadConfig, "embedding dim must be even and positive");
  if (t < 0.0) fail(ErrorCode::BadConfig, "timestep must be non-negative");
  std::vector<double> emb(dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
    emb[2 * i] = std::sin(t / freq);
    emb[2 * i + 1] = std::cos(t / freq);
  }
  return emb;
}

nn::NetModel build_denoiser(std::size_t M, const DenoiserConfig& config) {
  using nn::LayerSpec;
  const std::size_t H = config.hidden;
  return nn::make_model({LayerSpec::dense(M + config.embed_dim, H), LayerSpec::relu(H), LayerSpec::dense(H, H),
                         LayerSpec::relu(H), LayerSpec::dense(H, M)},
                        config.train);
}

DenseMatrix make_inputs(const DenseMatrix& xt, std::span<const std::uint32_t> t, std::size_t embed_dim) {
  if (xt.cols() != t.size()) fail(ErrorCode::ShapeError, "timestep count does not match pairs");
  const std::size_t M = xt.rows();
  DenseMatrix in(xt.cols(), M + embed_dim);
  for (std::size_t p = 0; p < xt.cols(); ++p) {
    for (std::size_t i = 0; i < M; ++i) in(p, i) = xt(i, p);
    const auto emb = embed_time(static_cast<double>(t[p]), embed_dim);
    for (std::size_t i = 0; i < embed_dim; ++i) in(p, M + i) = static_cast<float>(emb[i]);
  }
  return in;
}

namespace {

double mse_on(const nn::Network& net, const DenseMatrix& inputs, const DenseMatrix& targets) {
  const std::size_t M = targets.cols();
  double total = 0.0;
  for (std::size_t p = 0; p < inputs.rows(); ++p) {
    const auto out = net.predict(inputs.row_as_double(p));
    for (std::size_t i = 0; i < M; ++i) {
      const double d = out[i] - targets(p, i);
      total += d * d;
    }
  }
  return total / static_cast<double>(inputs.rows() * M);
}

}  // namespace

DenoiserBundle train_denoiser(const diffusion::DiffusionPairSet& pairs, const diffusion::DiffusionPairSet& val_pairs,
                              const diffusion::DiffusionSchedule& schedule, const DenoiserConfig& config) {
  if (pairs.size() == 0) fail(ErrorCode::BadConfig, "no training pairs");
  const std::size_t M = pairs.x0.rows();
  const DenseMatrix inputs = make_inputs(pairs.xt, pairs.t, config.embed_dim);
  const DenseMatrix targets = pairs.x0.transposed();

  nn::TrainHooks hooks;
  DenseMatrix val_inputs, val_targets;
  if (val_pairs.size() > 0) {
    if (val_pairs.x0.rows() != M) fail(ErrorCode::ShapeError, "validation pairs have a different dimension");
    val_inputs = make_inputs(val_pairs.xt, val_pairs.t, config.embed_dim);
    val_targets = val_pairs.x0.transposed();
    hooks.val_metric = [&](const nn::Network& net) { return mse_on(net, val_inputs, val_targets); };
    hooks.higher_is_better = false;
  }
  auto result = nn::train(build_denoiser(M, config), inputs, targets, nn::Loss::Mse, config.train, hooks);
  DenoiserBundle bundle;
  bundle.net = std::move(result.model);
  bundle.schedule_ref = schedule.checksum();
  bundle.embed_dim = config.embed_dim;
  bundle.train_log = std::move(result.log);
  return bundle;
}

void check_schedule(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule) {
  if (bundle.schedule_ref != schedule.checksum()) {
    fail(ErrorCode::ScheduleMismatch, "denoiser was trained with a different diffusion schedule");
  }
}

std::vector<double> denoise(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                            std::span<const double> xt, std::size_t t) {
  check_schedule(bundle, schedule);
  if (t < 1 || t > schedule.T) fail(ErrorCode::BadConfig, "timestep outside [1, T]");
  const std::size_t M = bundle.feature_dim();
  if (xt.size() != M) fail(ErrorCode::ShapeError, "denoiser expects " + std::to_string(M) + " features");
  std::vector<double> input(xt.begin(), xt.end());
  const auto emb = embed_time(static_cast<double>(t), bundle.embed_dim);
  input.insert(input.end(), emb.begin(), emb.end());
  return nn::Network(bundle.net).predict(input);
}

DenseMatrix denoise_pairs(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                          const diffusion::DiffusionPairSet& pairs) {
  check_schedule(bundle, schedule);
  const nn::Network net(bundle.net);
  const DenseMatrix inputs = make_inputs(pairs.xt, pairs.t, bundle.embed_dim);
  DenseMatrix out(pairs.x0.rows(), pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) out.set_column(p, net.predict(inputs.row_as_double(p)));
  return out;
}

PairErrors pair_errors(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                       const diffusion::DiffusionPairSet& pairs) {
  const DenseMatrix est = denoise_pairs(bundle, schedule, pairs);
  PairErrors e;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    double noisy = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pairs.x0.rows(); ++i) {
      const double x0 = pairs.x0(i, p);
      noisy += (pairs.xt(i, p) - x0) * (pairs.xt(i, p) - x0);
      den += (est(i, p) - x0) * (est(i, p) - x0);
    }
    e.noisy.push_back(std::sqrt(noisy));
    e.denoised.push_back(std::sqrt(den));
  }
  return e;
}

}  // namespace pnmf::denoiser
