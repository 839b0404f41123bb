#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pnmf/matrix.hpp"
#include "pnmf/rng.hpp"

namespace pnmf::diffusion {

/// Linear beta schedule; arrays are indexed by t - 1 for t in [1, T].
struct DiffusionSchedule {
  std::size_t T = 0;
  double beta_1 = 0.0;
  double beta_T = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
  /// Identity of the schedule: FNV-1a over (T, beta_1, beta_T).
  std::uint64_t checksum() const noexcept;
  /// 3 x T matrix with rows beta, alpha, alpha_bar.
  DenseMatrix to_matrix() const;
};

DiffusionSchedule build_schedule(std::size_t T = 50, double beta_1 = 1e-4, double beta_T = 0.02);

struct NoisedSample {
  std::vector<double> xt;
  std::vector<double> eps;
};

/// xt = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps for a caller-supplied eps.
std::vector<double> q_sample_with(std::span<const double> x0, std::size_t t, const DiffusionSchedule& schedule,
                                  std::span<const double> eps);

/// Draws eps ~ N(0, I) from rng and noises x0 to step t.
NoisedSample q_sample(std::span<const double> x0, std::size_t t, const DiffusionSchedule& schedule, KeyedRng& rng);

/// Pair columns align: x0/xt/eps are M x P, t and sample_index have length P.
struct DiffusionPairSet {
  DenseMatrix x0;
  DenseMatrix xt;
  DenseMatrix eps;
  std::vector<std::uint32_t> t;
  std::vector<std::uint32_t> sample_index;

  std::size_t size() const noexcept { return t.size(); }
};

/// For every column of X (M x N) and repetition, draws t ~ U{1..T} (or uses
/// fixed_t) and eps from a stream keyed by (seed, "diffusion", sample, rep).
DiffusionPairSet generate_pairs(const DenseMatrix& X, const DiffusionSchedule& schedule,
                                std::size_t pairs_per_sample, std::uint64_t seed,
                                std::optional<std::size_t> fixed_t = std::nullopt, unsigned threads = 1);

/// Closed-form E||xt - x0||^2 for a given ||x0||^2 and dimension M.
double expected_noise_energy(double x0_norm_sq, std::size_t M, double alpha_bar);

/// Monte-Carlo mean ||xt - x0||^2 per t (length T), averaged over samples and draws.
std::vector<double> noise_energy_curve(const DenseMatrix& X, const DiffusionSchedule& schedule, std::size_t draws,
                                       std::uint64_t seed);

}  // namespace pnmf::diffusion
