#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pnmf/defense.hpp"
#include "pnmf/matrix.hpp"
#include "pnmf/neuralkit.hpp"
#include "pnmf/rng.hpp"

namespace pnmf::attacks {

struct AttackConfig {
  double epsilon = 0.10;
  std::size_t apgd_iters = 100;
  std::size_t apgd_restarts = 1;
  double apgd_momentum = 0.75;
  double apgd_rho = 0.75;
  // Checkpoint schedule as fractions of the iteration budget: first
  // checkpoint, per-checkpoint gap decrement, minimum gap.
  double apgd_first_checkpoint = 0.22;
  double apgd_gap_decrement = 0.03;
  double apgd_min_gap = 0.06;
  std::size_t square_queries = 5000;
  double square_p_init = 0.8;
  double clamp_lo = -1.0;
  double clamp_hi = 1.0;
  std::uint64_t seed = 99;

  void validate() const;
};

/// Decision rule shared by every target: tumor when p1 >= 0.5 for two
/// classes, argmax otherwise.
int decide(std::span<const double> probs);

struct TargetEval {
  std::vector<double> probs;
  double loss = 0.0;          // cross-entropy of the true label
  std::vector<double> grad;   // d loss / d x, empty without gradient
};

/// Model under attack in feature space. `sample_index` keys any internal
/// randomness so that per-sample evaluations are reproducible.
class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  virtual std::size_t input_dim() const = 0;
  virtual std::vector<double> probabilities(std::span<const double> x, std::size_t sample_index) const = 0;
  virtual bool has_gradient() const { return false; }
  virtual TargetEval evaluate(std::span<const double> x, int label, std::size_t sample_index) const;
};

/// Undefended classifier (softmax network).
class ClassifierTarget final : public AttackTarget {
 public:
  explicit ClassifierTarget(const nn::NetModel& model) : net_(model) {}
  std::size_t input_dim() const override { return net_.input_dim(); }
  std::vector<double> probabilities(std::span<const double> x, std::size_t sample_index) const override;
  bool has_gradient() const override { return true; }
  TargetEval evaluate(std::span<const double> x, int label, std::size_t sample_index) const override;

 private:
  nn::Network net_;
};

/// EOT-averaged purify-then-classify pipeline with a chosen noise seed.
class DefendedTarget final : public AttackTarget {
 public:
  DefendedTarget(const defense::DefendedPipeline& pipeline, std::uint64_t noise_seed)
      : pipeline_(pipeline), noise_seed_(noise_seed) {}
  std::size_t input_dim() const override { return pipeline_.input_dim(); }
  std::vector<double> probabilities(std::span<const double> x, std::size_t sample_index) const override;
  bool has_gradient() const override { return true; }
  TargetEval evaluate(std::span<const double> x, int label, std::size_t sample_index) const override;

 private:
  const defense::DefendedPipeline& pipeline_;
  std::uint64_t noise_seed_;
};

/// Softmax over logits W x + b (W is C x M).
class LinearTarget final : public AttackTarget {
 public:
  LinearTarget(std::vector<std::vector<double>> weights, std::vector<double> bias);
  std::size_t input_dim() const override { return weights_.front().size(); }
  std::vector<double> probabilities(std::span<const double> x, std::size_t sample_index) const override;
  bool has_gradient() const override { return gradient_; }
  TargetEval evaluate(std::span<const double> x, int label, std::size_t sample_index) const override;
  /// Hides the gradient to exercise the contract check.
  void set_gradient_available(bool on) { gradient_ = on; }

 private:
  std::vector<double> logits(std::span<const double> x) const;
  std::vector<std::vector<double>> weights_;
  std::vector<double> bias_;
  bool gradient_ = true;
};

struct AttackResult {
  std::vector<double> x_adv;
  bool fooled = false;
  double loss = 0.0;  // best cross-entropy (APGD) or margin (Square)
  std::size_t evaluations = 0;
};

/// L-inf APGD on cross-entropy with momentum, checkpointed step halving and
/// restart from the best point; stops at the first misclassified iterate.
AttackResult apgd_ce(const AttackTarget& target, std::span<const double> x, int y, const AttackConfig& cfg,
                     KeyedRng& rng, std::size_t sample_index = 0);

/// Fraction of coordinates touched by a Square proposal at query `it`.
double square_p_selection(double p_init, std::size_t it, std::size_t n_queries);

/// Score-only random search with contiguous +-eps blocks on the log-probability margin.
AttackResult square_attack(const AttackTarget& target, std::span<const double> x, int y, const AttackConfig& cfg,
                           KeyedRng& rng, std::size_t sample_index = 0);

struct SampleOutcome {
  bool clean_correct = false;
  bool survived_apgd = false;
  bool survived_square = false;
  bool survived_all = false;
};

struct AttackReport {
  std::string target_name;
  std::vector<SampleOutcome> per_sample;
  double clean_accuracy = 0.0;
  double apgd_accuracy = 0.0;
  double square_accuracy = 0.0;
  double robust_accuracy = 0.0;
  AttackConfig config;
  double apgd_seconds = 0.0;    // summed over samples
  double square_seconds = 0.0;
  double wall_seconds = 0.0;

  std::string to_json() const;
  std::string to_csv() const;
};

/// Recomputes survived_all and the accuracy columns from the per-sample flags.
void tally(AttackReport& report);

struct EnsembleOutcome {
  AttackReport report;
  DenseMatrix adversarial;  // M x N: the point that broke the sample, else the APGD output
  DenseMatrix probs;        // N x 2 evaluation-view probabilities at that point
};

/// Attacks each clean-correct sample with APGD-CE and Square against
/// `attack_view` and judges survival on `eval_view`. Per-sample seeds are
/// keyed by (cfg.seed, attack name, sample index).
EnsembleOutcome run_ensemble(const AttackTarget& attack_view, const AttackTarget& eval_view, const DenseMatrix& X,
                             std::span<const int> labels, const AttackConfig& cfg, unsigned threads = 1,
                             std::string target_name = "model");

}  // namespace pnmf::attacks
