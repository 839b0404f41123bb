#include "pnmf/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/parallel.hpp"

namespace pnmf::attacks {
using nlohmann::json;

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) fail(ErrorCode::BadConfig, "epsilon must be non-negative");
  if (apgd_iters == 0) fail(ErrorCode::BadConfig, "apgd_iters must be positive");
  if (apgd_restarts == 0) fail(ErrorCode::BadConfig, "apgd_restarts must be positive");
  if (!(apgd_momentum > 0.0 && apgd_momentum <= 1.0)) fail(ErrorCode::BadConfig, "apgd_momentum must lie in (0, 1]");
  if (!(apgd_rho > 0.0 && apgd_rho <= 1.0)) fail(ErrorCode::BadConfig, "apgd_rho must lie in (0, 1]");
  if (!(square_p_init > 0.0 && square_p_init <= 1.0)) fail(ErrorCode::BadConfig, "square_p_init must lie in (0, 1]");
  if (!(clamp_lo < clamp_hi)) fail(ErrorCode::BadConfig, "clamp box is empty");
}

int decide(std::span<const double> probs) {
  if (probs.size() == 2) return probs[1] >= 0.5 ? 1 : 0;
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

TargetEval AttackTarget::evaluate(std::span<const double> x, int label, std::size_t sample_index) const {
  if (!has_gradient()) fail(ErrorCode::TargetContractError, "target does not expose an input gradient");
  TargetEval e;
  e.probs = probabilities(x, sample_index);
  e.loss = -std::log(std::max(e.probs.at(static_cast<std::size_t>(label)), 1e-300));
  return e;
}

namespace {

void check_label(int label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    fail(ErrorCode::BadConfig, "label " + std::to_string(label) + " outside the class range");
  }
}

// log-softmax based cross-entropy and its gradient at the logits.
double softmax_ce(std::span<const double> logits, int label, std::vector<double>& probs, std::vector<double>& dlogits) {
  const double zmax = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - zmax);
  const double lse = zmax + std::log(sum);
  probs.resize(logits.size());
  dlogits.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    probs[c] = std::exp(logits[c] - lse);
    dlogits[c] = probs[c] - (static_cast<int>(c) == label ? 1.0 : 0.0);
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

}  // namespace

std::vector<double> ClassifierTarget::probabilities(std::span<const double> x, std::size_t) const {
  return net_.predict(x);
}

TargetEval ClassifierTarget::evaluate(std::span<const double> x, int label, std::size_t) const {
  check_label(label, net_.output_dim());
  const nn::Tape tape = net_.forward(x, 1);
  const std::size_t L = net_.layers().size();
  TargetEval e;
  std::vector<double> dlogits;
  if (net_.layers().back().kind == nn::LayerKind::Softmax) {
    const auto& logits = tape.values[L - 1];
    e.loss = softmax_ce(logits, label, e.probs, dlogits);
    e.probs.assign(tape.output().begin(), tape.output().end());
    e.grad = net_.backward(tape, dlogits, L - 1).input;
  } else {
    fail(ErrorCode::TargetContractError, "classifier target needs a trailing softmax");
  }
  return e;
}

std::vector<double> DefendedTarget::probabilities(std::span<const double> x, std::size_t sample_index) const {
  return pipeline_.probabilities(x, noise_seed_, sample_index);
}

TargetEval DefendedTarget::evaluate(std::span<const double> x, int label, std::size_t sample_index) const {
  check_label(label, 2);
  TargetEval e;
  e.grad.resize(x.size());
  e.loss = pipeline_.ce_loss_and_gradient(x, label, noise_seed_, sample_index, e.grad, &e.probs);
  return e;
}

LinearTarget::LinearTarget(std::vector<std::vector<double>> weights, std::vector<double> bias)
    : weights_(std::move(weights)), bias_(std::move(bias)) {
  if (weights_.size() < 2 || weights_.size() != bias_.size()) fail(ErrorCode::ShapeError, "linear target needs C >= 2 rows");
  for (const auto& row : weights_) {
    if (row.empty() || row.size() != weights_.front().size()) fail(ErrorCode::ShapeError, "ragged linear weights");
  }
}

std::vector<double> LinearTarget::logits(std::span<const double> x) const {
  if (x.size() != input_dim()) fail(ErrorCode::ShapeError, "linear target input size mismatch");
  std::vector<double> z(weights_.size());
  for (std::size_t c = 0; c < z.size(); ++c) {
    double acc = bias_[c];
    for (std::size_t i = 0; i < x.size(); ++i) acc += weights_[c][i] * x[i];
    z[c] = acc;
  }
  return z;
}

std::vector<double> LinearTarget::probabilities(std::span<const double> x, std::size_t) const {
  std::vector<double> p, d;
  softmax_ce(logits(x), 0, p, d);
  return p;
}

TargetEval LinearTarget::evaluate(std::span<const double> x, int label, std::size_t sample_index) const {
  if (!gradient_) return AttackTarget::evaluate(x, label, sample_index);
  check_label(label, weights_.size());
  TargetEval e;
  std::vector<double> dz;
  e.loss = softmax_ce(logits(x), label, e.probs, dz);
  e.grad.assign(x.size(), 0.0);
  for (std::size_t c = 0; c < dz.size(); ++c) {
    for (std::size_t i = 0; i < x.size(); ++i) e.grad[i] += dz[c] * weights_[c][i];
  }
  return e;
}

namespace {

struct Box {
  std::vector<double> lo, hi;

  Box(std::span<const double> x, const AttackConfig& cfg) : lo(x.size()), hi(x.size()) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      lo[i] = std::max(x[i] - cfg.epsilon, cfg.clamp_lo);
      hi[i] = std::min(x[i] + cfg.epsilon, cfg.clamp_hi);
    }
  }

  void project(std::vector<double>& v) const {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
  }
};

void check_input(const AttackTarget& target, std::span<const double> x, const AttackConfig& cfg) {
  cfg.validate();
  if (x.size() != target.input_dim()) fail(ErrorCode::ShapeError, "attack input has the wrong dimension");
  for (double v : x) {
    if (v < cfg.clamp_lo || v > cfg.clamp_hi) fail(ErrorCode::BadConfig, "clean input lies outside the clamp box");
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::vector<std::size_t> apgd_checkpoints(const AttackConfig& cfg) {
  const auto n = static_cast<double>(cfg.apgd_iters);
  const std::size_t first = std::max<std::size_t>(static_cast<std::size_t>(cfg.apgd_first_checkpoint * n), 1);
  const std::size_t decr = std::max<std::size_t>(static_cast<std::size_t>(cfg.apgd_gap_decrement * n), 1);
  const std::size_t min_gap = std::max<std::size_t>(static_cast<std::size_t>(cfg.apgd_min_gap * n), 1);
  std::vector<std::size_t> out;
  std::size_t gap = first;
  std::size_t at = first;
  while (at < cfg.apgd_iters) {
    out.push_back(at);
    gap = std::max(gap > decr ? gap - decr : 0, min_gap);
    at += gap;
  }
  return out;
}

AttackResult apgd_single(const AttackTarget& target, std::span<const double> x, int y, const AttackConfig& cfg,
                         KeyedRng& rng, std::size_t sample_index) {
  const std::size_t M = x.size();
  const Box box(x, cfg);
  AttackResult res;

  // Random start: x + eps * t / ||t||_inf with t uniform in [-1, 1]^M.
  std::vector<double> t(M);
  double tmax = 0.0;
  for (auto& v : t) {
    v = rng.uniform(-1.0, 1.0);
    tmax = std::max(tmax, std::abs(v));
  }
  std::vector<double> x_cur(M);
  for (std::size_t i = 0; i < M; ++i) x_cur[i] = x[i] + (tmax > 0.0 ? cfg.epsilon * t[i] / tmax : 0.0);
  box.project(x_cur);

  TargetEval ev = target.evaluate(x_cur, y, sample_index);
  ++res.evaluations;
  if (ev.grad.size() != M) fail(ErrorCode::TargetContractError, "target gradient has the wrong size");
  std::vector<double> x_best = x_cur, grad = ev.grad, grad_best = ev.grad;
  double loss_best = ev.loss;
  if (decide(ev.probs) != y) return {x_cur, true, ev.loss, res.evaluations};

  const auto checkpoints = apgd_checkpoints(cfg);
  std::size_t next_cp = 0;
  std::size_t last_cp = 0;
  std::size_t improving = 0;
  double loss_prev = ev.loss;
  double loss_best_last_cp = loss_best;
  bool reduced_last_cp = false;
  double step = 2.0 * cfg.epsilon;
  std::vector<double> x_prev = x_cur, z(M), x_next(M);

  for (std::size_t it = 0; it < cfg.apgd_iters; ++it) {
    const double a = it == 0 ? 1.0 : cfg.apgd_momentum;
    for (std::size_t i = 0; i < M; ++i) z[i] = x_cur[i] + step * sign(grad[i]);
    box.project(z);
    for (std::size_t i = 0; i < M; ++i) x_next[i] = x_cur[i] + a * (z[i] - x_cur[i]) + (1.0 - a) * (x_cur[i] - x_prev[i]);
    box.project(x_next);
    x_prev = x_cur;
    x_cur = x_next;

    ev = target.evaluate(x_cur, y, sample_index);
    ++res.evaluations;
    if (decide(ev.probs) != y) return {x_cur, true, ev.loss, res.evaluations};
    grad = ev.grad;
    if (ev.loss > loss_prev) ++improving;
    loss_prev = ev.loss;
    if (ev.loss > loss_best) {
      loss_best = ev.loss;
      x_best = x_cur;
      grad_best = grad;
    }

    if (next_cp < checkpoints.size() && it + 1 == checkpoints[next_cp]) {
      const std::size_t span_len = checkpoints[next_cp] - last_cp;
      const bool oscillating = static_cast<double>(improving) <= cfg.apgd_rho * static_cast<double>(span_len);
      const bool stagnant = !reduced_last_cp && loss_best_last_cp >= loss_best;
      const bool halve = oscillating || stagnant;
      reduced_last_cp = halve;
      loss_best_last_cp = loss_best;
      if (halve) {
        step /= 2.0;
        x_cur = x_best;
        x_prev = x_best;
        grad = grad_best;
      }
      improving = 0;
      last_cp = checkpoints[next_cp];
      ++next_cp;
    }
  }
  return {x_best, false, loss_best, res.evaluations};
}

}  // namespace

AttackResult apgd_ce(const AttackTarget& target, std::span<const double> x, int y, const AttackConfig& cfg,
                     KeyedRng& rng, std::size_t sample_index) {
  check_input(target, x, cfg);
  if (!target.has_gradient()) fail(ErrorCode::TargetContractError, "APGD needs a target with an input gradient");
  AttackResult best;
  bool have = false;
  std::size_t evals = 0;
  for (std::size_t r = 0; r < cfg.apgd_restarts; ++r) {
    AttackResult cur = apgd_single(target, x, y, cfg, rng, sample_index);
    evals += cur.evaluations;
    if (!have || cur.fooled || cur.loss > best.loss) {
      best = std::move(cur);
      have = true;
    }
    if (best.fooled) break;
  }
  best.evaluations = evals;
  return best;
}

double square_p_selection(double p_init, std::size_t it, std::size_t n_queries) {
  if (n_queries == 0) return p_init;
  const auto i = static_cast<long>(static_cast<double>(it) / static_cast<double>(n_queries) * 10000.0);
  if (i <= 10) return p_init;
  if (i <= 50) return p_init / 2;
  if (i <= 200) return p_init / 4;
  if (i <= 500) return p_init / 8;
  if (i <= 1000) return p_init / 16;
  if (i <= 2000) return p_init / 32;
  if (i <= 4000) return p_init / 64;
  if (i <= 6000) return p_init / 128;
  if (i <= 8000) return p_init / 256;
  return p_init / 512;
}

namespace {

double log_margin(std::span<const double> probs, int y) {
  double other = -INFINITY;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    if (static_cast<int>(c) != y) other = std::max(other, std::log(std::max(probs[c], 1e-300)));
  }
  return std::log(std::max(probs[static_cast<std::size_t>(y)], 1e-300)) - other;
}

}  // namespace

AttackResult square_attack(const AttackTarget& target, std::span<const double> x, int y, const AttackConfig& cfg,
                           KeyedRng& rng, std::size_t sample_index) {
  check_input(target, x, cfg);
  const std::size_t M = x.size();
  AttackResult res;
  res.x_adv.assign(x.begin(), x.end());
  if (cfg.square_queries == 0) {
    const auto p = target.probabilities(x, sample_index);
    res.fooled = decide(p) != y;
    res.loss = log_margin(p, y);
    return res;
  }
  auto perturbed = [&](std::size_t i, double s) { return std::clamp(x[i] + s * cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi); };

  std::vector<double> best(M);
  for (std::size_t i = 0; i < M; ++i) best[i] = perturbed(i, rng.uniform() < 0.5 ? -1.0 : 1.0);
  auto probs = target.probabilities(best, sample_index);
  res.evaluations = 1;
  double margin_best = log_margin(probs, y);
  if (decide(probs) != y) return {best, true, margin_best, res.evaluations};

  std::vector<double> cand(M);
  for (std::size_t q = 1; q < cfg.square_queries; ++q) {
    const double p = square_p_selection(cfg.square_p_init, q, cfg.square_queries);
    const std::size_t width = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(p * static_cast<double>(M))), 1, M);
    const std::size_t start = static_cast<std::size_t>(rng.below(M - width + 1));
    double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
    bool changed = false;
    for (int attempt = 0; attempt < 2 && !changed; ++attempt, s = -s) {
      cand = best;
      for (std::size_t i = start; i < start + width; ++i) {
        cand[i] = perturbed(i, s);
        changed = changed || cand[i] != best[i];
      }
    }
    if (!changed) continue;
    probs = target.probabilities(cand, sample_index);
    ++res.evaluations;
    const double margin = log_margin(probs, y);
    if (decide(probs) != y) return {cand, true, margin, res.evaluations};
    if (margin < margin_best) {
      margin_best = margin;
      best = cand;
    }
  }
  return {best, false, margin_best, res.evaluations};
}

std::string AttackReport::to_json() const {
  json samples = json::array();
  for (const auto& s : per_sample) {
    samples.push_back({{"clean_correct", s.clean_correct},
                       {"survived_apgd", s.survived_apgd},
                       {"survived_square", s.survived_square},
                       {"survived_all", s.survived_all}});
  }
  json doc = {{"target", target_name},
              {"clean_accuracy", clean_accuracy},
              {"per_attack_accuracy", {{"apgd-ce", apgd_accuracy}, {"square", square_accuracy}}},
              {"robust_accuracy", robust_accuracy},
              {"config",
               {{"norm", "Linf"},
                {"epsilon", config.epsilon},
                {"apgd_iters", config.apgd_iters},
                {"apgd_restarts", config.apgd_restarts},
                {"apgd_momentum", config.apgd_momentum},
                {"apgd_rho", config.apgd_rho},
                {"square_queries", config.square_queries},
                {"square_p_init", config.square_p_init},
                {"clamp_box", {config.clamp_lo, config.clamp_hi}},
                {"seed", config.seed}}},
              {"per_sample", samples}};
  return doc.dump(2);
}

std::string AttackReport::to_csv() const {
  std::ostringstream out;
  out << "sample,clean_correct,survived_apgd,survived_square,survived_all\n";
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    const auto& s = per_sample[i];
    out << i << ',' << s.clean_correct << ',' << s.survived_apgd << ',' << s.survived_square << ','
        << s.survived_all << '\n';
  }
  return out.str();
}

void tally(AttackReport& report) {
  std::size_t clean = 0, apgd = 0, square = 0, all = 0;
  for (auto& s : report.per_sample) {
    s.survived_all = s.clean_correct && s.survived_apgd && s.survived_square;
    clean += s.clean_correct;
    apgd += s.clean_correct && s.survived_apgd;
    square += s.clean_correct && s.survived_square;
    all += s.survived_all;
  }
  const double n = report.per_sample.empty() ? 1.0 : static_cast<double>(report.per_sample.size());
  report.clean_accuracy = static_cast<double>(clean) / n;
  report.apgd_accuracy = static_cast<double>(apgd) / n;
  report.square_accuracy = static_cast<double>(square) / n;
  report.robust_accuracy = static_cast<double>(all) / n;
}

EnsembleOutcome run_ensemble(const AttackTarget& attack_view, const AttackTarget& eval_view, const DenseMatrix& X,
                             std::span<const int> labels, const AttackConfig& cfg, unsigned threads,
                             std::string target_name) {
  cfg.validate();
  const std::size_t M = X.rows();
  const std::size_t N = X.cols();
  if (labels.size() != N) fail(ErrorCode::ShapeError, "labels and samples differ in count");
  if (attack_view.input_dim() != M || eval_view.input_dim() != M) {
    fail(ErrorCode::ShapeError, "target dimension differs from the feature dimension");
  }
  using clock = std::chrono::steady_clock;
  const auto wall_start = clock::now();

  EnsembleOutcome out;
  out.adversarial = DenseMatrix(M, N);
  out.probs = DenseMatrix(N, 2);
  out.report.target_name = std::move(target_name);
  out.report.config = cfg;
  out.report.per_sample.resize(N);
  std::vector<double> apgd_time(N, 0.0), square_time(N, 0.0);

  // Survival is judged on the probabilities as stored (32-bit), so the report
  // agrees with any metric recomputed from the saved tensors.
  auto view = [&](std::span<const double> x, std::size_t n) {
    auto p = eval_view.probabilities(x, n);
    for (auto& v : p) v = static_cast<float>(v);
    return p;
  };

  parallel_for(N, threads, [&](std::size_t n) {
    const std::vector<double> x = X.column(n);
    const int y = labels[n];
    SampleOutcome s;
    std::vector<double> chosen = x;
    auto chosen_probs = view(x, n);
    s.clean_correct = decide(chosen_probs) == y;
    if (s.clean_correct) {
      auto t0 = clock::now();
      KeyedRng apgd_rng(cfg.seed, "apgd-ce", n);
      const AttackResult a = apgd_ce(attack_view, x, y, cfg, apgd_rng, n);
      const auto pa = view(a.x_adv, n);
      s.survived_apgd = decide(pa) == y;
      auto t1 = clock::now();
      KeyedRng square_rng(cfg.seed, "square", n);
      const AttackResult q = square_attack(attack_view, x, y, cfg, square_rng, n);
      const auto pq = view(q.x_adv, n);
      s.survived_square = decide(pq) == y;
      auto t2 = clock::now();
      apgd_time[n] = std::chrono::duration<double>(t1 - t0).count();
      square_time[n] = std::chrono::duration<double>(t2 - t1).count();
      if (!s.survived_apgd || s.survived_square) {
        chosen = a.x_adv;
        chosen_probs = pa;
      } else {
        chosen = q.x_adv;
        chosen_probs = pq;
      }
    }
    out.report.per_sample[n] = s;
    out.adversarial.set_column(n, chosen);
    out.probs(n, 0) = static_cast<float>(chosen_probs[0]);
    out.probs(n, 1) = static_cast<float>(chosen_probs[1]);
  });

  auto& r = out.report;
  tally(r);
  for (std::size_t n = 0; n < N; ++n) {
    r.apgd_seconds += apgd_time[n];
    r.square_seconds += square_time[n];
  }
  r.wall_seconds = std::chrono::duration<double>(clock::now() - wall_start).count();
  return out;
}

}  // namespace pnmf::attacks
