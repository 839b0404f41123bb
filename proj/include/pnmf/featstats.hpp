#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pnmf/dataset.hpp"

namespace pnmf::featstats {

struct FeatureScore {
  std::size_t component_index = 0;
  double auc = 0.5;
  double cohens_d = 0.0;  // tumor mean minus normal mean
  double welch_t = 0.0;
  double welch_df = 1.0;
  double p_value = 1.0;
};

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

struct SelectionResult {
  std::vector<FeatureScore> ranked;     // best first
  std::vector<std::size_t> selected;    // first M of ranked, in rank order
  std::size_t M = 0;
  double p_max = 0.05;
  std::string ranking_key = "|auc-0.5| desc, |cohens_d| desc, p asc; p>p_max demoted";
};

/// Mann-Whitney AUC: P(positive > negative) + 0.5 P(tie). Tumor is positive.
double auc(std::span<const double> positives, std::span<const double> negatives);

/// Standardized mean difference with pooled (n-1) variances.
double cohens_d(std::span<const double> group_tumor, std::span<const double> group_normal);

/// Two-sample t-test without equal-variance assumption; two-sided p.
WelchResult welch_test(std::span<const double> a, std::span<const double> b);

/// Two-sided Student-t tail probability P(|T_df| >= |t|).
double student_t_two_sided_p(double t, double df);

FeatureScore score_component(std::size_t index, std::span<const double> tumor,
                             std::span<const double> normal);

/// Scores every component of the training features and selects the top M.
SelectionResult rank_and_select(const FeatureSet& X_train, std::size_t M, double p_max = 0.05);

/// Rows of X (components) picked in `indices` order.
DenseMatrix select_rows(const DenseMatrix& X, std::span<const std::size_t> indices);

}  // namespace pnmf::featstats
