#include "pnmf/featstats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>

#include "pnmf/error.hpp"

namespace pnmf::featstats {
namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // n-1 denominator
  double n = 0.0;
};

Moments moments(std::span<const double> xs) {
  Moments m;
  m.n = static_cast<double>(xs.size());
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / m.n;
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.var = xs.size() > 1 ? ss / (m.n - 1.0) : 0.0;
  return m;
}

}  // namespace

double auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) fail(ErrorCode::EmptyClass, "auc needs both classes");
  struct Item {
    double value;
    bool positive;
  };
  std::vector<Item> items;
  items.reserve(positives.size() + negatives.size());
  for (double v : positives) items.push_back({v, true});
  for (double v : negatives) items.push_back({v, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.value < b.value; });

  // Sum of midranks (1-based) over positives; ties share the average rank.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    while (j < items.size() && items[j].value == items[i].value) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (items[k].positive) rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  const double u = rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

double cohens_d(std::span<const double> group_tumor, std::span<const double> group_normal) {
  if (group_tumor.size() < 2 || group_normal.size() < 2) {
    fail(ErrorCode::DegenerateVariance, "cohens_d needs at least two samples per group");
  }
  const Moments t = moments(group_tumor);
  const Moments n = moments(group_normal);
  const double pooled = ((t.n - 1.0) * t.var + (n.n - 1.0) * n.var) / (t.n + n.n - 2.0);
  if (!(pooled > 0.0)) fail(ErrorCode::DegenerateVariance, "pooled variance is zero");
  return (t.mean - n.mean) / std::sqrt(pooled);
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) fail(ErrorCode::BadConfig, "degrees of freedom must be positive");
  if (t == 0.0) return 1.0;
  if (!std::isfinite(t)) return std::numeric_limits<double>::min();
  // P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)
  const double x = df / (df + t * t);
  const double p = boost::math::ibeta(df / 2.0, 0.5, x);
  return std::clamp(p, std::numeric_limits<double>::min(), 1.0);
}

WelchResult welch_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    fail(ErrorCode::DegenerateVariance, "welch_test needs at least two samples per group");
  }
  const Moments ma = moments(a);
  const Moments mb = moments(b);
  const double va = ma.var / ma.n;
  const double vb = mb.var / mb.n;
  if (!(va + vb > 0.0)) fail(ErrorCode::DegenerateVariance, "both groups have zero variance");
  WelchResult r;
  r.t = (ma.mean - mb.mean) / std::sqrt(va + vb);
  const double denom = va * va / (ma.n - 1.0) + vb * vb / (mb.n - 1.0);
  r.df = (va + vb) * (va + vb) / denom;
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

FeatureScore score_component(std::size_t index, std::span<const double> tumor,
                             std::span<const double> normal) {
  FeatureScore s;
  s.component_index = index;
  s.auc = auc(tumor, normal);
  try {
    s.cohens_d = cohens_d(tumor, normal);
    const WelchResult w = welch_test(tumor, normal);
    s.welch_t = w.t;
    s.welch_df = w.df;
    s.p_value = w.p;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateVariance) throw;
    // A constant component carries no evidence.
    s.cohens_d = 0.0;
    s.welch_t = 0.0;
    s.welch_df = std::max(1.0, static_cast<double>(tumor.size() + normal.size()) - 2.0);
    s.p_value = 1.0;
  }
  return s;
}

SelectionResult rank_and_select(const FeatureSet& X_train, std::size_t M, double p_max) {
  const std::size_t R = X_train.dim();
  if (M < 1 || M > R) {
    fail(ErrorCode::BadConfig, "M = " + std::to_string(M) + " must lie in [1, " + std::to_string(R) + "]");
  }
  if (X_train.labels.size() != X_train.count()) fail(ErrorCode::ShapeError, "labels/columns mismatch");

  SelectionResult result;
  result.M = M;
  result.p_max = p_max;
  for (std::size_t r = 0; r < R; ++r) {
    std::vector<double> tumor, normal;
    for (std::size_t c = 0; c < X_train.count(); ++c) {
      (X_train.labels[c] == 1 ? tumor : normal).push_back(X_train.X(r, c));
    }
    if (tumor.empty() || normal.empty()) fail(ErrorCode::EmptyClass, "training split lacks a class");
    result.ranked.push_back(score_component(r, tumor, normal));
  }
  std::stable_sort(result.ranked.begin(), result.ranked.end(),
                   [p_max](const FeatureScore& a, const FeatureScore& b) {
                     const bool pa = a.p_value <= p_max;
                     const bool pb = b.p_value <= p_max;
                     if (pa != pb) return pa;
                     const double ka = std::abs(a.auc - 0.5);
                     const double kb = std::abs(b.auc - 0.5);
                     if (ka != kb) return ka > kb;
                     const double da = std::abs(a.cohens_d);
                     const double db = std::abs(b.cohens_d);
                     if (da != db) return da > db;
                     if (a.p_value != b.p_value) return a.p_value < b.p_value;
                     return a.component_index < b.component_index;
                   });
  for (std::size_t i = 0; i < M; ++i) result.selected.push_back(result.ranked[i].component_index);
  return result;
}

DenseMatrix select_rows(const DenseMatrix& X, std::span<const std::size_t> indices) {
  DenseMatrix out(indices.size(), X.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= X.rows()) fail(ErrorCode::ShapeError, "selected index out of range");
    auto src = X.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace pnmf::featstats
