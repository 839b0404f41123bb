#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pnmf/attacks.hpp"
#include "pnmf/classifier.hpp"
#include "unit/support.hpp"

using namespace pnmf;
using attacks::AttackConfig;
using attacks::LinearTarget;

namespace {

struct LinearCase {
  std::vector<std::vector<double>> W;
  std::vector<double> b;
  std::vector<double> x;
  int y = 0;
  std::vector<double> d;
  double c = 0.0;
};

// Logit gap z = d.x + c drawn within +-0.3 so roughly half the cases are flippable at eps 0.1.
LinearCase random_case(std::mt19937_64& gen, std::size_t M = 2) {
  std::uniform_real_distribution<double> w(-1.0, 1.0), xs(-0.8, 0.8), zs(-0.3, 0.3);
  LinearCase k;
  k.W.assign(2, std::vector<double>(M));
  for (auto& row : k.W)
    for (auto& v : row) v = w(gen);
  k.x.resize(M);
  for (auto& v : k.x) v = xs(gen);
  k.d.resize(M);
  double dx = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    k.d[i] = k.W[1][i] - k.W[0][i];
    dx += k.d[i] * k.x[i];
  }
  k.c = zs(gen) - dx;
  k.b = {0.0, k.c};
  k.y = dx + k.c >= 0.0 ? 1 : 0;
  return k;
}

double linf(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool in_box(std::span<const double> v, const AttackConfig& cfg) {
  return std::all_of(v.begin(), v.end(), [&](double e) { return e >= cfg.clamp_lo && e <= cfg.clamp_hi; });
}

nn::NetModel small_mlp(std::size_t M, std::uint64_t seed) {
  using nn::LayerSpec;
  return nn::make_model({LayerSpec::dense(M, 12), LayerSpec::relu(12), LayerSpec::dense(12, 2), LayerSpec::softmax(2)},
                        nn::TrainConfig{.seed = seed});
}

}  // namespace

TEST_SUITE("attacks") {
  TEST_CASE("decision rule") {
    CHECK(attacks::decide(std::vector<double>{0.5, 0.5}) == 1);
    CHECK(attacks::decide(std::vector<double>{0.51, 0.49}) == 0);
    CHECK(attacks::decide(std::vector<double>{0.2, 0.5, 0.3}) == 1);
  }

  TEST_CASE("config validation") {
    AttackConfig c;
    CHECK_NOTHROW(c.validate());
    c.epsilon = -0.1;
    CHECK_ERROR_CODE(c.validate(), ErrorCode::BadConfig);
    c = {};
    c.apgd_iters = 0;
    CHECK_ERROR_CODE(c.validate(), ErrorCode::BadConfig);
    c = {};
    c.clamp_lo = 1.0;
    c.clamp_hi = -1.0;
    CHECK_ERROR_CODE(c.validate(), ErrorCode::BadConfig);
  }

  TEST_CASE("square p schedule") {
    CHECK(attacks::square_p_selection(0.8, 0, 10000) == 0.8);
    CHECK(attacks::square_p_selection(0.8, 30, 10000) == 0.4);
    CHECK(attacks::square_p_selection(0.8, 100, 10000) == 0.2);
    CHECK(attacks::square_p_selection(0.8, 3000, 10000) == doctest::Approx(0.8 / 64));
    CHECK(attacks::square_p_selection(0.8, 9999, 10000) == doctest::Approx(0.8 / 512));
    CHECK(attacks::square_p_selection(0.8, 5, 500) == 0.2);  // same fractions at another budget
    double prev = 1.0;
    for (std::size_t it = 0; it < 5000; ++it) {
      const double p = attacks::square_p_selection(0.8, it, 5000);
      CHECK(p <= prev);
      prev = p;
    }
  }

  TEST_CASE("empty ball and empty budget return the input") {
    std::mt19937_64 gen(1);
    const auto k = random_case(gen);
    const LinearTarget t(k.W, k.b);
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    KeyedRng r1(1, "a"), r2(1, "s");
    CHECK(attacks::apgd_ce(t, k.x, k.y, cfg, r1).x_adv == k.x);
    CHECK(attacks::square_attack(t, k.x, k.y, cfg, r2).x_adv == k.x);
    cfg.epsilon = 0.1;
    cfg.square_queries = 0;
    KeyedRng r3(1, "s");
    const auto s = attacks::square_attack(t, k.x, k.y, cfg, r3);
    CHECK(s.x_adv == k.x);
    CHECK_FALSE(s.fooled);
  }

  TEST_CASE("APGD flips exactly the cases corner enumeration proves flippable") {
    std::mt19937_64 gen(2);
    AttackConfig cfg;
    int flippable = 0;
    for (int i = 0; i < 100; ++i) {
      const auto k = random_case(gen);
      const LinearTarget t(k.W, k.b);
      const bool oracle = oracle::linear_flippable(k.d, k.c, k.x, k.y, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi);
      flippable += oracle;
      KeyedRng rng(cfg.seed, "apgd", static_cast<std::uint64_t>(i));
      const auto r = attacks::apgd_ce(t, k.x, k.y, cfg, rng, static_cast<std::size_t>(i));
      CHECK(r.fooled == oracle);
      CHECK(attacks::decide(t.probabilities(r.x_adv, 0)) == (r.fooled ? 1 - k.y : k.y));
      CHECK(linf(r.x_adv, k.x) <= cfg.epsilon + 1e-6);
      CHECK(in_box(r.x_adv, cfg));
    }
    CHECK(flippable > 20);
    CHECK(flippable < 80);
  }

  TEST_CASE("spec linear fixture") {
    const LinearTarget t({{0.0, 0.0}, {-1.0, 1.0}}, {0.0, 0.0});  // z1 - z0 = -(x0 - x1)
    const std::vector<double> x{0.05, -0.05};
    AttackConfig cfg;
    for (double eps : {0.02, 0.04, 0.06}) {
      cfg.epsilon = eps;
      KeyedRng rng(1, "apgd");
      const bool oracle = oracle::linear_flippable(std::vector<double>{-1.0, 1.0}, 0.0, x, 0, eps, -1.0, 1.0);
      CHECK(oracle == (eps > 0.05));
      CHECK(attacks::apgd_ce(t, x, 0, cfg, rng).fooled == oracle);
    }
  }

  TEST_CASE("Square finds flips on flippable linear cases within 500 queries") {
    std::mt19937_64 gen(3);
    AttackConfig cfg;
    cfg.square_queries = 500;
    std::size_t trials = 0, wins = 0, cases = 0;
    for (int i = 0; cases < 30 && i < 400; ++i) {
      const auto k = random_case(gen);
      if (!oracle::linear_flippable(k.d, k.c, k.x, k.y, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)) {
        const LinearTarget t(k.W, k.b);
        KeyedRng rng(5, "square", static_cast<std::uint64_t>(i));
        const auto r = attacks::square_attack(t, k.x, k.y, cfg, rng);
        CHECK_FALSE(r.fooled);
        continue;
      }
      ++cases;
      const LinearTarget t(k.W, k.b);
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        KeyedRng rng(seed, "square", static_cast<std::uint64_t>(i));
        const auto r = attacks::square_attack(t, k.x, k.y, cfg, rng);
        ++trials;
        wins += r.fooled;
        CHECK(r.evaluations <= 501);
        CHECK(linf(r.x_adv, k.x) <= cfg.epsilon + 1e-6);
        CHECK(in_box(r.x_adv, cfg));
      }
    }
    CHECK(cases == 30);
    CHECK(static_cast<double>(wins) >= 0.95 * static_cast<double>(trials));
  }

  TEST_CASE("gradient contract") {
    LinearTarget t({{1.0, 0.0}, {0.0, 1.0}}, {0.0, 0.0});
    t.set_gradient_available(false);
    AttackConfig cfg;
    KeyedRng rng(1, "apgd");
    CHECK_ERROR_CODE(attacks::apgd_ce(t, std::vector<double>{0.1, 0.2}, 1, cfg, rng), ErrorCode::TargetContractError);
    KeyedRng r2(1, "square");
    CHECK_NOTHROW(attacks::square_attack(t, std::vector<double>{0.1, 0.2}, 1, cfg, r2));
  }

  TEST_CASE("ensemble tally is a set intersection") {
    attacks::AttackReport r;
    r.per_sample.resize(5);
    const bool apgd[] = {true, true, true, false, false}, square[] = {false, true, true, true, false};
    for (std::size_t i = 0; i < 5; ++i) {
      r.per_sample[i].clean_correct = true;
      r.per_sample[i].survived_apgd = apgd[i];
      r.per_sample[i].survived_square = square[i];
    }
    attacks::tally(r);
    CHECK(r.robust_accuracy == doctest::Approx(0.4));
    CHECK(r.apgd_accuracy == doctest::Approx(0.6));
    CHECK(r.square_accuracy == doctest::Approx(0.6));
    CHECK(r.clean_accuracy == 1.0);
    CHECK(r.per_sample[1].survived_all);
    CHECK_FALSE(r.per_sample[0].survived_all);
  }

  TEST_CASE("ensemble on a small network: constraints, monotonicity, determinism") {
    const std::size_t M = 5, N = 30;
    const auto model = small_mlp(M, 4);
    const attacks::ClassifierTarget target(model);
    std::mt19937_64 gen(5);
    DenseMatrix X = testing::random_matrix(M, N, gen, -0.5, 0.5);
    const nn::Network net(model);
    std::vector<int> labels(N);
    for (std::size_t n = 0; n < N; ++n) labels[n] = (n % 3 == 0) ? 1 - attacks::decide(net.predict(X.column(n)))
                                                                 : attacks::decide(net.predict(X.column(n)));
    AttackConfig cfg;
    cfg.square_queries = 300;
    double prev = 1.0;
    for (double eps : {0.02, 0.05, 0.10}) {
      cfg.epsilon = eps;
      const auto out = attacks::run_ensemble(target, target, X, labels, cfg);
      const auto& rep = out.report;
      CHECK(rep.clean_accuracy == doctest::Approx(20.0 / 30.0));
      CHECK(rep.robust_accuracy <= rep.clean_accuracy);
      CHECK(rep.robust_accuracy <= std::min(rep.apgd_accuracy, rep.square_accuracy));
      CHECK(rep.robust_accuracy <= prev);
      prev = rep.robust_accuracy;
      for (std::size_t n = 0; n < N; ++n) {
        const auto xa = out.adversarial.column(n);
        CHECK(linf(xa, X.column(n)) <= eps + 1e-6);
        CHECK(in_box(xa, cfg));
        const auto& s = rep.per_sample[n];
        CHECK(s.survived_all == (s.clean_correct && s.survived_apgd && s.survived_square));
        if (!s.clean_correct) CHECK(xa == X.column(n));
      }
    }
    const auto a = attacks::run_ensemble(target, target, X, labels, cfg, 1);
    const auto b = attacks::run_ensemble(target, target, X, labels, cfg, 4);
    CHECK(a.adversarial == b.adversarial);
    CHECK(a.probs == b.probs);
    CHECK(a.report.to_csv() == b.report.to_csv());
  }
}
