#include "pnmf/nnmf.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "eigen_bridge.hpp"
#include "pnmf/error.hpp"
#include "pnmf/parallel.hpp"
#include "pnmf/rng.hpp"

namespace pnmf::nnmf {
namespace {

using detail::MatrixD;
using Eigen::VectorXd;

void check_conformable(const DenseMatrix& V, const DenseMatrix& W, const DenseMatrix& H) {
  if (W.rows() != V.rows() || H.cols() != V.cols() || W.cols() != H.rows()) {
    fail(ErrorCode::ShapeError, "V (" + std::to_string(V.rows()) + "x" + std::to_string(V.cols()) +
                                    ") is not conformable with W (" + std::to_string(W.rows()) + "x" +
                                    std::to_string(W.cols()) + ") * H (" + std::to_string(H.rows()) +
                                    "x" + std::to_string(H.cols()) + ")");
  }
}

double kl_of(const MatrixD& V, const MatrixD& WH, double eps) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < V.size(); ++i) {
    const double v = V.data()[i];
    const double wh = std::max(WH.data()[i], eps);
    total += v > 0.0 ? v * std::log(v / wh) - v + wh : wh;
  }
  return std::max(total, 0.0);
}

double euclid_of(const MatrixD& V, const MatrixD& WH) { return 0.5 * (V - WH).squaredNorm(); }

void validate_input(const MatrixD& V) {
  if ((V.array() < 0.0).any()) fail(ErrorCode::DegenerateInput, "V has negative entries");
  if (!(V.array() > 0.0).any()) fail(ErrorCode::DegenerateInput, "V is all zero");
}

FactorModel run(const MatrixD& V, MatrixD W, MatrixD H, const FitOptions& opt) {
  const double eps = opt.epsilon_floor;
  FactorModel model;
  model.rank = static_cast<std::size_t>(W.cols());
  model.divergence = opt.divergence;
  model.epsilon_floor = eps;
  model.iter_log.reserve(opt.max_iters);

  MatrixD WH = W * H;
  double prev = opt.divergence == Divergence::KL ? kl_of(V, WH, eps) : euclid_of(V, WH);
  for (std::size_t it = 0; it < opt.max_iters; ++it) {
    if (opt.divergence == Divergence::KL) {
      // W <- W .* ((V ./ WH) H^T) ./ (1 H^T)
      MatrixD Q = V.array() / WH.array().max(eps);
      const Eigen::RowVectorXd h_sums = H.rowwise().sum().transpose();
      MatrixD numer = Q * H.transpose();
      for (Eigen::Index r = 0; r < W.rows(); ++r)
        for (Eigen::Index c = 0; c < W.cols(); ++c)
          W(r, c) *= numer(r, c) / std::max(h_sums(c), eps);
      WH.noalias() = W * H;
      // H <- H .* (W^T (V ./ WH)) ./ (W^T 1)
      Q = V.array() / WH.array().max(eps);
      const VectorXd w_sums = W.colwise().sum().transpose();
      numer = W.transpose() * Q;
      for (Eigen::Index r = 0; r < H.rows(); ++r)
        for (Eigen::Index c = 0; c < H.cols(); ++c)
          H(r, c) *= numer(r, c) / std::max(w_sums(r), eps);
    } else {
      MatrixD numer = V * H.transpose();
      MatrixD denom = W * (H * H.transpose());
      W.array() *= numer.array() / denom.array().max(eps);
      numer = W.transpose() * V;
      denom = (W.transpose() * W) * H;
      H.array() *= numer.array() / denom.array().max(eps);
    }
    WH.noalias() = W * H;
    const double obj = opt.divergence == Divergence::KL ? kl_of(V, WH, eps) : euclid_of(V, WH);
    model.iter_log.push_back(obj);
    if (opt.tolerance > 0.0 && std::abs(prev - obj) <= opt.tolerance * std::max(prev, 1e-300)) break;
    prev = obj;
  }
  model.W = detail::from_eigen(W);
  model.H_train = detail::from_eigen(H);
  return model;
}

void validate_options(const FitOptions& opt, std::size_t K, std::size_t N) {
  if (opt.rank < 1) fail(ErrorCode::BadConfig, "rank must be >= 1");
  if (opt.rank > std::min(K, N)) {
    fail(ErrorCode::BadConfig, "rank " + std::to_string(opt.rank) + " exceeds min(K, N) = " +
                                   std::to_string(std::min(K, N)));
  }
  if (opt.max_iters < 1) fail(ErrorCode::BadConfig, "iters must be >= 1");
  if (!(opt.epsilon_floor > 0.0)) fail(ErrorCode::BadConfig, "epsilon_floor must be positive");
}

}  // namespace

double kl_divergence(const DenseMatrix& V, const DenseMatrix& W, const DenseMatrix& H,
                     double epsilon_floor) {
  check_conformable(V, W, H);
  const MatrixD WH = detail::to_eigen(W) * detail::to_eigen(H);
  return kl_of(detail::to_eigen(V), WH, epsilon_floor);
}

double euclidean_objective(const DenseMatrix& V, const DenseMatrix& W, const DenseMatrix& H) {
  check_conformable(V, W, H);
  return euclid_of(detail::to_eigen(V), detail::to_eigen(W) * detail::to_eigen(H));
}

FactorModel fit(const DenseMatrix& V, const FitOptions& options) {
  validate_options(options, V.rows(), V.cols());
  const MatrixD Vd = detail::to_eigen(V);
  validate_input(Vd);
  KeyedRng rng(options.seed, "nnmf-init");
  MatrixD W(V.rows(), options.rank);
  MatrixD H(options.rank, V.cols());
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = rng.uniform(0.1, 1.1);
  for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = rng.uniform(0.1, 1.1);
  return run(Vd, std::move(W), std::move(H), options);
}

FactorModel fit_from(const DenseMatrix& V, const DenseMatrix& W0, const DenseMatrix& H0,
                     const FitOptions& options) {
  check_conformable(V, W0, H0);
  FitOptions opt = options;
  opt.rank = W0.cols();
  validate_options(opt, V.rows(), V.cols());
  const MatrixD Vd = detail::to_eigen(V);
  validate_input(Vd);
  MatrixD W = detail::to_eigen(W0);
  MatrixD H = detail::to_eigen(H0);
  if ((W.array() < 0.0).any() || (H.array() < 0.0).any()) {
    fail(ErrorCode::DegenerateInput, "initial factors must be non-negative");
  }
  return run(Vd, std::move(W), std::move(H), opt);
}

DenseMatrix project(const DenseMatrix& W, const DenseMatrix& V_new, const ProjectOptions& options) {
  if (W.rows() != V_new.rows()) {
    fail(ErrorCode::ShapeError, "basis has " + std::to_string(W.rows()) + " rows but samples have " +
                                    std::to_string(V_new.rows()));
  }
  const MatrixD Wd = detail::to_eigen(W);
  const MatrixD Vd = detail::to_eigen(V_new);
  if ((Vd.array() < 0.0).any()) fail(ErrorCode::DegenerateInput, "samples must be non-negative");
  const auto R = Wd.cols();
  const auto N = Vd.cols();
  MatrixD Hd = MatrixD::Zero(R, N);

  if (options.mode == ProjectionMode::LeastSquares) {
    const MatrixD G = Wd.transpose() * Wd;
    const double L = G.norm();  // Frobenius norm bounds the largest eigenvalue
    const MatrixD B = Wd.transpose() * Vd;
    const VectorXd vv = Vd.colwise().squaredNorm().transpose();
    parallel_for(static_cast<std::size_t>(N), options.threads, [&](std::size_t n) {
      const auto col = static_cast<Eigen::Index>(n);
      const VectorXd b = B.col(col);
      VectorXd h = VectorXd::Zero(R);
      if (L <= 0.0) return;
      auto objective = [&](const VectorXd& x) { return x.dot(G * x) - 2.0 * b.dot(x) + vv(col); };
      double prev = objective(h);
      for (std::size_t it = 0; it < options.max_iters; ++it) {
        const VectorXd grad = G * h - b;
        h = (h - grad / L).cwiseMax(0.0);
        const double obj = objective(h);
        if (std::abs(prev - obj) <= options.tolerance * std::max(std::abs(prev), 1e-300)) break;
        prev = obj;
      }
      for (Eigen::Index r = 0; r < R; ++r) Hd(r, col) = h(r);
    });
  } else {
    const double eps = options.epsilon_floor;
    const VectorXd w_sums = Wd.colwise().sum().transpose();
    parallel_for(static_cast<std::size_t>(N), options.threads, [&](std::size_t n) {
      const auto col = static_cast<Eigen::Index>(n);
      const VectorXd v = Vd.col(col);
      VectorXd h = VectorXd::Constant(R, 1.0);
      if (!(v.array() > 0.0).any()) {
        for (Eigen::Index r = 0; r < R; ++r) Hd(r, col) = 0.0;
        return;
      }
      auto kl = [&](const VectorXd& wh) {
        double s = 0.0;
        for (Eigen::Index k = 0; k < v.size(); ++k) {
          const double whk = std::max(wh(k), eps);
          s += v(k) > 0.0 ? v(k) * std::log(v(k) / whk) - v(k) + whk : whk;
        }
        return s;
      };
      VectorXd wh = Wd * h;
      double prev = kl(wh);
      for (std::size_t it = 0; it < options.max_iters; ++it) {
        const VectorXd q = v.array() / wh.array().max(eps);
        const VectorXd numer = Wd.transpose() * q;
        h = h.array() * numer.array() / w_sums.array().max(eps);
        wh = Wd * h;
        const double obj = kl(wh);
        if (std::abs(prev - obj) <= options.tolerance * std::max(prev, 1e-300)) break;
        prev = obj;
      }
      for (Eigen::Index r = 0; r < R; ++r) Hd(r, col) = h(r);
    });
  }
  return detail::from_eigen(Hd);
}

DenseMatrix l2_normalize(const DenseMatrix& X) {
  DenseMatrix out(X.rows(), X.cols());
  for (std::size_t c = 0; c < X.cols(); ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < X.rows(); ++r) sq += static_cast<double>(X(r, c)) * X(r, c);
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) fail(ErrorCode::ZeroVector, "column " + std::to_string(c) + " has zero norm");
    for (std::size_t r = 0; r < X.rows(); ++r) out(r, c) = static_cast<float>(X(r, c) / norm);
  }
  return out;
}

}  // namespace pnmf::nnmf
