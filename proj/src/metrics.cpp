#include "pnmf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/featstats.hpp"

namespace pnmf::metrics {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) fail(ErrorCode::ShapeError, "probabilities and labels differ in length");
  if (a == 0) fail(ErrorCode::ShapeError, "no samples");
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double brier(std::span<const double> p, std::span<const int> y) {
  check_lengths(p.size(), y.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - y[i];
    s += d * d;
  }
  return s / static_cast<double>(p.size());
}

double log_loss(std::span<const double> p, std::span<const int> y, double clip) {
  check_lengths(p.size(), y.size());
  if (!(clip > 0.0 && clip < 0.5)) fail(ErrorCode::BadConfig, "clip must lie in (0, 0.5)");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], clip, 1.0 - clip);
    s += y[i] == 1 ? std::log(q) : std::log(1.0 - q);
  }
  return -s / static_cast<double>(p.size());
}

MccResult mcc(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  const double a = static_cast<double>(tp + fp), b = static_cast<double>(tp + fn);
  const double c = static_cast<double>(tn + fp), d = static_cast<double>(tn + fn);
  if (a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0) return {0.0, true};
  const double num = static_cast<double>(tp) * static_cast<double>(tn) - static_cast<double>(fp) * static_cast<double>(fn);
  return {std::clamp(num / std::sqrt(a * b * c * d), -1.0, 1.0), false};
}

double balanced_accuracy(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  if (tp + fn == 0 || tn + fp == 0) fail(ErrorCode::EmptyClass, "balanced accuracy needs both classes");
  return 0.5 * (ratio(tp, tp + fn) + ratio(tn, tn + fp));
}

double accuracy(const Confusion& c) { return ratio(c.tp + c.tn, c.total()); }
double precision(const Confusion& c) { return ratio(c.tp, c.tp + c.fp); }
double recall(const Confusion& c) { return ratio(c.tp, c.tp + c.fn); }

double f1(const Confusion& c) {
  const double p = precision(c), r = recall(c);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double roc_auc(std::span<const double> p, std::span<const int> y) {
  check_lengths(p.size(), y.size());
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < p.size(); ++i) (y[i] == 1 ? pos : neg).push_back(p[i]);
  return featstats::auc(pos, neg);
}

MetricRow compute_row(const std::string& tag, const RunData& run) {
  check_lengths(run.p_tumor.size(), run.labels.size());
  check_lengths(run.predictions.size(), run.labels.size());
  MetricRow r;
  r.tag = tag;
  r.confusion = classifier::confusion(run.labels, run.predictions);
  const auto& c = r.confusion;
  r.accuracy = accuracy(c);
  r.precision = precision(c);
  r.recall = recall(c);
  r.f1 = f1(c);
  const auto m = mcc(c.tp, c.fp, c.fn, c.tn);
  r.mcc = m.value;
  r.mcc_degenerate = m.degenerate;
  r.balanced_accuracy = balanced_accuracy(c.tp, c.fp, c.fn, c.tn);
  r.roc_auc = roc_auc(run.p_tumor, run.labels);
  r.brier = brier(run.p_tumor, run.labels);
  r.log_loss = log_loss(run.p_tumor, run.labels);
  return r;
}

const MetricRow& MetricTable::at(const std::string& tag) const {
  for (const auto& r : rows) {
    if (r.tag == tag) return r;
  }
  fail(ErrorCode::BadConfig, "metric table has no row " + tag);
}

std::string MetricTable::to_csv() const {
  std::ostringstream out;
  out << "Model,Acc,Prec,Rec,F1,MCC,BalAcc,ROC-AUC,Brier,LogLoss\n" << std::setprecision(6) << std::fixed;
  for (const auto& r : rows) {
    out << r.tag << ',' << r.accuracy << ',' << r.precision << ',' << r.recall << ',' << r.f1 << ',' << r.mcc
        << ',' << r.balanced_accuracy << ',' << r.roc_auc << ',' << r.brier << ',' << r.log_loss << '\n';
  }
  return out.str();
}

std::string MetricTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"model", r.tag},
                         {"Acc", r.accuracy},
                         {"Prec", r.precision},
                         {"Rec", r.recall},
                         {"F1", r.f1},
                         {"MCC", r.mcc},
                         {"MCC_degenerate", r.mcc_degenerate},
                         {"BalAcc", r.balanced_accuracy},
                         {"ROC-AUC", r.roc_auc},
                         {"Brier", r.brier},
                         {"LogLoss", r.log_loss},
                         {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp},
                                        {"fn", r.confusion.fn}, {"tn", r.confusion.tn}}}});
  }
  return nlohmann::json{{"rows", rows_json}}.dump(2);
}

MetricTable assemble_table(const std::map<std::string, RunData>& runs, bool allow_subset) {
  for (const auto& [tag, run] : runs) {
    if (std::find_if(std::begin(kTableTags), std::end(kTableTags), [&](const char* t) { return tag == t; }) ==
        std::end(kTableTags)) {
      fail(ErrorCode::BadConfig, "unknown table row " + tag);
    }
  }
  MetricTable table;
  for (const char* tag : kTableTags) {
    auto it = runs.find(tag);
    if (it == runs.end()) {
      if (!allow_subset) fail(ErrorCode::BadConfig, std::string("missing table row ") + tag);
      continue;
    }
    table.rows.push_back(compute_row(tag, it->second));
  }
  return table;
}

}  // namespace pnmf::metrics
