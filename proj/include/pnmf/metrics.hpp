#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "pnmf/classifier.hpp"

namespace pnmf::metrics {

using classifier::Confusion;

/// Mean squared error of tumor probabilities against 0/1 labels.
double brier(std::span<const double> p, std::span<const int> y);

double log_loss(std::span<const double> p, std::span<const int> y, double clip = 1e-7);

struct MccResult {
  double value = 0.0;
  bool degenerate = false;  // some marginal is zero; value forced to 0
};

MccResult mcc(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
double balanced_accuracy(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
double accuracy(const Confusion& c);
double precision(const Confusion& c);  // 0 when nothing is predicted positive
double recall(const Confusion& c);     // 0 when there are no positives
double f1(const Confusion& c);

/// Mann-Whitney ROC-AUC of tumor probabilities.
double roc_auc(std::span<const double> p, std::span<const int> y);

struct MetricRow {
  std::string tag;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
  bool mcc_degenerate = false;
  double balanced_accuracy = 0.0;
  double roc_auc = 0.0;
  double brier = 0.0;
  double log_loss = 0.0;
  Confusion confusion;
};

struct RunData {
  std::vector<double> p_tumor;
  std::vector<int> predictions;
  std::vector<int> labels;
};

inline constexpr const char* kTableTags[] = {"Clean_Baseline", "Clean_Defended", "Robust_Baseline",
                                             "Robust_Defended"};

MetricRow compute_row(const std::string& tag, const RunData& run);

struct MetricTable {
  std::vector<MetricRow> rows;

  const MetricRow& at(const std::string& tag) const;
  /// Header: Model,Acc,Prec,Rec,F1,MCC,BalAcc,ROC-AUC,Brier,LogLoss
  std::string to_csv() const;
  std::string to_json() const;
};

/// Rows in canonical tag order. Unknown tags are rejected; missing tags are
/// allowed only when `allow_subset` is set.
MetricTable assemble_table(const std::map<std::string, RunData>& runs, bool allow_subset = false);

}  // namespace pnmf::metrics
