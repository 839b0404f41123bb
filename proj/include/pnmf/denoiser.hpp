#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pnmf/diffusion.hpp"
#include "pnmf/neuralkit.hpp"

namespace pnmf::denoiser {

/// emb[2i] = sin(t / 10000^(2i/dim)), emb[2i+1] = cos(t / 10000^(2i/dim)).
std::vector<double> embed_time(double t, std::size_t dim = 16);

struct DenoiserConfig {
  std::size_t embed_dim = 16;
  std::size_t hidden = 64;
  nn::TrainConfig train{.epochs = 200};
};

struct DenoiserBundle {
  nn::NetModel net;
  std::uint64_t schedule_ref = 0;
  std::size_t embed_dim = 16;
  nn::TrainLog train_log;

  std::size_t feature_dim() const { return net.output_dim(); }
};

/// dense(M+E -> H) -> relu -> dense(H -> H) -> relu -> dense(H -> M).
nn::NetModel build_denoiser(std::size_t M, const DenoiserConfig& config);

/// Network inputs (P x (M+E)): rows are [xt, embed_time(t)].
DenseMatrix make_inputs(const DenseMatrix& xt, std::span<const std::uint32_t> t, std::size_t embed_dim);

/// MSE regression of x0 from (xt, t); keeps the best validation-MSE epoch.
DenoiserBundle train_denoiser(const diffusion::DiffusionPairSet& pairs, const diffusion::DiffusionPairSet& val_pairs,
                              const diffusion::DiffusionSchedule& schedule, const DenoiserConfig& config);

void check_schedule(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule);

/// Single forward pass estimating x0. Throws ScheduleMismatch on a foreign schedule.
std::vector<double> denoise(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                            std::span<const double> xt, std::size_t t);

/// Runs the denoiser over every pair; returns x0 estimates (M x P).
DenseMatrix denoise_pairs(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                          const diffusion::DiffusionPairSet& pairs);

struct PairErrors {
  std::vector<double> noisy;     // ||xt - x0|| per pair
  std::vector<double> denoised;  // ||x0_hat - x0|| per pair
};

PairErrors pair_errors(const DenoiserBundle& bundle, const diffusion::DiffusionSchedule& schedule,
                       const diffusion::DiffusionPairSet& pairs);

}  // namespace pnmf::denoiser
