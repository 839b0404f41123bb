#pragma once

#include <cstdint>
#include <vector>

#include "pnmf/matrix.hpp"

namespace pnmf::nnmf {

enum class Divergence { KL, Euclidean };

struct FitOptions {
  std::size_t rank = 15;
  std::size_t max_iters = 300;
  /// Stop once the relative objective change falls below this; 0 disables.
  double tolerance = 1e-6;
  double epsilon_floor = 1e-9;
  Divergence divergence = Divergence::KL;
  std::uint64_t seed = 1;
};

struct FactorModel {
  DenseMatrix W;        // K x R
  DenseMatrix H_train;  // R x N_train
  std::size_t rank = 0;
  Divergence divergence = Divergence::KL;
  double epsilon_floor = 1e-9;
  /// Objective after each completed iteration.
  std::vector<double> iter_log;
};

/// sum V log(V / WH) - V + WH with 0 log 0 = 0 and WH floored at epsilon_floor.
double kl_divergence(const DenseMatrix& V, const DenseMatrix& W, const DenseMatrix& H,
                     double epsilon_floor = 1e-9);

/// 0.5 * ||V - WH||_F^2
double euclidean_objective(const DenseMatrix& V, const DenseMatrix& W, const DenseMatrix& H);

/// Multiplicative-update factorization from a seeded Uniform(0.1, 1.1) start.
FactorModel fit(const DenseMatrix& V, const FitOptions& options);

/// Same iteration started from caller-supplied factors.
FactorModel fit_from(const DenseMatrix& V, const DenseMatrix& W0, const DenseMatrix& H0,
                     const FitOptions& options);

enum class ProjectionMode { LeastSquares, KL };

struct ProjectOptions {
  std::size_t max_iters = 5000;
  /// Relative objective change that ends the per-column solve.
  double tolerance = 1e-8;
  ProjectionMode mode = ProjectionMode::LeastSquares;
  double epsilon_floor = 1e-9;
  unsigned threads = 1;
};

/// Encodes new samples on a fixed basis: per column, min ||v - W h||^2 s.t. h >= 0
/// by projected gradient with step 1/||W^T W||_F (or KL updates of H with W fixed).
DenseMatrix project(const DenseMatrix& W, const DenseMatrix& V_new, const ProjectOptions& options = {});

/// Divides each column by its L2 norm. Throws ZeroVector naming the column.
DenseMatrix l2_normalize(const DenseMatrix& X);

}  // namespace pnmf::nnmf
