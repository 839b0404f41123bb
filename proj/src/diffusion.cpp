#include "pnmf/diffusion.hpp"

#include <cmath>
#include <cstring>

#include "pnmf/error.hpp"
#include "pnmf/parallel.hpp"

namespace pnmf::diffusion {

std::uint64_t DiffusionSchedule::checksum() const noexcept {
  unsigned char buf[24];
  const std::uint64_t steps = T;
  std::memcpy(buf, &steps, 8);
  std::memcpy(buf + 8, &beta_1, 8);
  std::memcpy(buf + 16, &beta_T, 8);
  return fnv1a64(std::as_bytes(std::span(buf)));
}

DenseMatrix DiffusionSchedule::to_matrix() const {
  DenseMatrix m(3, T);
  for (std::size_t i = 0; i < T; ++i) {
    m(0, i) = static_cast<float>(beta[i]);
    m(1, i) = static_cast<float>(alpha[i]);
    m(2, i) = static_cast<float>(alpha_bar[i]);
  }
  return m;
}

DiffusionSchedule build_schedule(std::size_t T, double beta_1, double beta_T) {
  if (T < 2) fail(ErrorCode::BadConfig, "T must be >= 2");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) {
    fail(ErrorCode::BadConfig, "need 0 < beta_1 <= beta_T < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  s.beta_1 = beta_1;
  s.beta_T = beta_T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double running = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    s.beta[i] = beta_1 + static_cast<double>(i) * (beta_T - beta_1) / static_cast<double>(T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    running *= s.alpha[i];
    s.alpha_bar[i] = running;
  }
  return s;
}

std::vector<double> q_sample_with(std::span<const double> x0, std::size_t t, const DiffusionSchedule& schedule,
                                  std::span<const double> eps) {
  if (t < 1 || t > schedule.T) fail(ErrorCode::BadConfig, "timestep " + std::to_string(t) + " outside [1, T]");
  if (eps.size() != x0.size()) fail(ErrorCode::ShapeError, "eps and x0 differ in length");
  const double ab = schedule.alpha_bar_at(t);
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = signal * x0[i] + noise * eps[i];
  return xt;
}

NoisedSample q_sample(std::span<const double> x0, std::size_t t, const DiffusionSchedule& schedule, KeyedRng& rng) {
  NoisedSample out;
  out.eps.resize(x0.size());
  for (auto& e : out.eps) e = rng.normal();
  out.xt = q_sample_with(x0, t, schedule, out.eps);
  return out;
}

DiffusionPairSet generate_pairs(const DenseMatrix& X, const DiffusionSchedule& schedule,
                                std::size_t pairs_per_sample, std::uint64_t seed,
                                std::optional<std::size_t> fixed_t, unsigned threads) {
  if (fixed_t && (*fixed_t < 1 || *fixed_t > schedule.T)) fail(ErrorCode::BadConfig, "fixed_t outside [1, T]");
  const std::size_t M = X.rows();
  const std::size_t N = X.cols();
  const std::size_t P = N * pairs_per_sample;
  DiffusionPairSet set;
  set.x0 = DenseMatrix(M, P);
  set.xt = DenseMatrix(M, P);
  set.eps = DenseMatrix(M, P);
  set.t.resize(P);
  set.sample_index.resize(P);
  parallel_for(N, threads, [&](std::size_t n) {
    const std::vector<double> x0 = X.column(n);
    for (std::size_t rep = 0; rep < pairs_per_sample; ++rep) {
      KeyedRng rng(seed, "diffusion", n, rep);
      const std::size_t t = fixed_t ? *fixed_t : 1 + static_cast<std::size_t>(rng.below(schedule.T));
      // eps and xt are stored as float; xt is recomputed from the stored eps so
      // the construction identity holds for what is on disk.
      std::vector<double> eps(M);
      for (auto& e : eps) e = static_cast<float>(rng.normal());
      const std::size_t p = n * pairs_per_sample + rep;
      const std::vector<double> xt = q_sample_with(x0, t, schedule, eps);
      set.x0.set_column(p, x0);
      set.eps.set_column(p, eps);
      set.xt.set_column(p, xt);
      set.t[p] = static_cast<std::uint32_t>(t);
      set.sample_index[p] = static_cast<std::uint32_t>(n);
    }
  });
  return set;
}

double expected_noise_energy(double x0_norm_sq, std::size_t M, double alpha_bar) {
  const double shrink = 1.0 - std::sqrt(alpha_bar);
  return shrink * shrink * x0_norm_sq + (1.0 - alpha_bar) * static_cast<double>(M);
}

std::vector<double> noise_energy_curve(const DenseMatrix& X, const DiffusionSchedule& schedule, std::size_t draws,
                                       std::uint64_t seed) {
  if (draws < 1) fail(ErrorCode::BadConfig, "draws must be >= 1");
  std::vector<double> curve(schedule.T, 0.0);
  const std::size_t N = X.cols();
  for (std::size_t t = 1; t <= schedule.T; ++t) {
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::vector<double> x0 = X.column(n);
      for (std::size_t d = 0; d < draws; ++d) {
        KeyedRng rng(seed, "noise-energy", t * N + n, d);
        const NoisedSample s = q_sample(x0, t, schedule, rng);
        double e = 0.0;
        for (std::size_t i = 0; i < x0.size(); ++i) e += (s.xt[i] - x0[i]) * (s.xt[i] - x0[i]);
        total += e;
      }
    }
    curve[t - 1] = total / static_cast<double>(N * draws);
  }
  return curve;
}

}  // namespace pnmf::diffusion
