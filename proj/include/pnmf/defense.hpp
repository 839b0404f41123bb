#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pnmf/classifier.hpp"
#include "pnmf/denoiser.hpp"
#include "pnmf/diffusion.hpp"

namespace pnmf::defense {

struct DefenseConfig {
  std::size_t t_pur = 10;
  std::size_t K = 8;
  std::uint64_t seed_base = 2024;

  void validate(const diffusion::DiffusionSchedule& schedule) const;
};

/// Forward-noise to t_pur, denoise, classify. Noise for (sample, draw) comes
/// from the stream (noise_seed, "purify", sample, draw), so the same call is
/// reproducible from any thread.
class DefendedPipeline {
 public:
  DefendedPipeline(const classifier::ClassifierBundle& classifier, const denoiser::DenoiserBundle& denoiser,
                   const diffusion::DiffusionSchedule& schedule, const DefenseConfig& config);

  const DefenseConfig& config() const noexcept { return config_; }
  std::size_t input_dim() const noexcept { return classifier_.input_dim(); }

  std::vector<double> purify(std::span<const double> x, std::uint64_t noise_seed, std::size_t sample_index,
                             std::size_t draw_index) const;

  /// Mean class probabilities over the K draws.
  std::vector<double> probabilities(std::span<const double> x, std::uint64_t noise_seed,
                                    std::size_t sample_index) const;

  /// -log of the EOT-mean probability of `label` and its gradient w.r.t. x
  /// (gradient of the mean over the K fixed draws).
  double ce_loss_and_gradient(std::span<const double> x, int label, std::uint64_t noise_seed,
                              std::size_t sample_index, std::span<double> grad,
                              std::vector<double>* mean_probs = nullptr) const;

 private:
  std::vector<double> draw_noise(std::uint64_t noise_seed, std::size_t sample_index, std::size_t draw_index) const;

  nn::Network classifier_;
  nn::Network denoiser_;
  std::vector<double> embedding_;
  double signal_scale_;
  double noise_scale_;
  DefenseConfig config_;
};

/// Purified copy of x for one draw, seeded by (seed_base, "purify", sample, draw).
std::vector<double> purify(std::span<const double> x, const DefenseConfig& config,
                           const denoiser::DenoiserBundle& denoiser, const diffusion::DiffusionSchedule& schedule,
                           std::size_t sample_index, std::size_t draw_index);

/// EOT-averaged defended probabilities (N x 2) for selected features X (M x N).
DenseMatrix predict_defended(const DenseMatrix& X, const DefenseConfig& config,
                             const denoiser::DenoiserBundle& denoiser, const diffusion::DiffusionSchedule& schedule,
                             const classifier::ClassifierBundle& classifier, unsigned threads = 1);

struct EvalBundle {
  DenseMatrix X_test;  // M x N selected features
  std::vector<int> labels;
  DenseMatrix defended_probs;  // N x 2
  DenseMatrix clean_probs;     // N x 2
  /// Component checksums (classifier, denoiser, schedule, config, ...).
  std::map<std::string, std::string> components;
};

/// Writes tensors plus bundle.json enumerating each file's checksum and the
/// component checksums.
void export_eval_bundle(const std::filesystem::path& dir, const EvalBundle& bundle);

/// Re-reads a bundle; any file whose checksum differs from bundle.json is CorruptFile.
EvalBundle load_eval_bundle(const std::filesystem::path& dir);

}  // namespace pnmf::defense
