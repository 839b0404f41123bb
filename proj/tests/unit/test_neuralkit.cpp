#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "pnmf/neuralkit.hpp"
#include "unit/support.hpp"

using namespace pnmf;
using nn::LayerSpec;

namespace {

std::vector<double> random_params(const std::vector<LayerSpec>& layers, std::mt19937_64& gen) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return testing::random_vector(n, gen, -1.0, 1.0);
}

nn::TrainConfig quick(std::size_t epochs, double lr = 1e-2) {
  nn::TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.batch_size = 8;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_SUITE("neuralkit") {
  TEST_CASE("trivial forward fixtures") {
    const nn::Network zero({LayerSpec::dense(3, 2)}, std::vector<double>(8, 0.0));
    for (double v : zero.predict(std::vector<double>{1.0, -2.0, 3.0})) CHECK(v == 0.0);

    const nn::Network sm({LayerSpec::softmax(2)}, {});
    const auto p = sm.predict(std::vector<double>{0.0, 0.0});
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 0.5);

    // kernel [1], zero bias, stride 1: identity
    const nn::Network conv({LayerSpec::conv1d(1, 5, 1, 1)}, {1.0, 0.0});
    const std::vector<double> x{0.5, -1.0, 2.0, 0.0, 3.5};
    CHECK(conv.predict(x) == x);
  }

  TEST_CASE("conv1d multi-channel stride matches a hand computation") {
    // 2 input channels of length 4, 1 output channel, kernel 2, stride 2
    const auto spec = LayerSpec::conv1d(2, 4, 1, 2, 2);
    CHECK(spec.out_dim == 2);
    const nn::Network conv({spec}, {1.0, 2.0, 3.0, 4.0, 0.5});
    const std::vector<double> x{1, 2, 3, 4, 10, 20, 30, 40};
    const auto y = conv.predict(x);
    CHECK(y[0] == doctest::Approx(1 * 1 + 2 * 2 + 3 * 10 + 4 * 20 + 0.5));
    CHECK(y[1] == doctest::Approx(1 * 3 + 2 * 4 + 3 * 30 + 4 * 40 + 0.5));
  }

  TEST_CASE("softmax rows sum to one and cross-entropy is non-negative") {
    std::mt19937_64 gen(1);
    for (int t = 0; t < 50; ++t) {
      const auto layers = gradcheck::random_layers(gen, true);
      const nn::Network net(layers, random_params(layers, gen));
      const auto batch = testing::random_vector(3 * net.input_dim(), gen, -3.0, 3.0);
      const auto tape = net.forward(batch, 3);
      const std::size_t D = net.output_dim();
      std::vector<double> targets(3 * D, 0.0);
      for (std::size_t b = 0; b < 3; ++b) {
        double s = 0.0;
        for (std::size_t j = 0; j < D; ++j) s += tape.output()[b * D + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        targets[b * D + b % D] = 1.0;
      }
      CHECK(nn::evaluate_loss(net, tape, nn::Loss::CrossEntropy, targets).loss >= 0.0);
    }
  }

  TEST_CASE("parameter gradients match central differences on a 10-parameter net") {
    const std::vector<LayerSpec> layers{LayerSpec::dense(1, 2), LayerSpec::relu(2), LayerSpec::dense(2, 2)};
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    REQUIRE(n == 10);
    std::mt19937_64 gen(2);
    const auto params = random_params(layers, gen);
    const auto batch = testing::random_vector(4, gen);
    const auto up = testing::random_vector(4 * 2, gen);
    const auto r = gradcheck::check_parameters(layers, params, batch, 4, up);
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("gradient check over random nets") {
    std::mt19937_64 gen(3);
    for (int t = 0; t < 40; ++t) {
      const bool sm = t % 2 == 0;
      const auto layers = gradcheck::random_layers(gen, sm);
      const auto params = random_params(layers, gen);
      const nn::Network net(layers, params);
      const std::size_t B = 3;
      const auto batch = testing::random_vector(B * net.input_dim(), gen);
      const auto up = testing::random_vector(B * net.output_dim(), gen);
      const auto rp = gradcheck::check_parameters(layers, params, batch, B, up);
      CHECK(rp.max_rel_error < 1e-4);
      std::vector<double> targets(B * net.output_dim(), 0.0);
      if (sm) {
        for (std::size_t b = 0; b < B; ++b) targets[b * net.output_dim() + (b % net.output_dim())] = 1.0;
      } else {
        targets = testing::random_vector(B * net.output_dim(), gen);
      }
      const auto ri = gradcheck::check_inputs(layers, params, batch, B, sm ? nn::Loss::CrossEntropy : nn::Loss::Mse,
                                              targets);
      CHECK(ri.max_rel_error < 1e-4);
      CHECK(rp.checked > 0);
    }
  }

  TEST_CASE("zero upstream gives zero gradient; constant model gives zero input gradient") {
    std::mt19937_64 gen(4);
    const auto layers = gradcheck::random_layers(gen, false);
    const nn::Network net(layers, random_params(layers, gen));
    const auto tape = net.forward(testing::random_vector(2 * net.input_dim(), gen), 2);
    const auto g = net.backward(tape, std::vector<double>(2 * net.output_dim(), 0.0));
    for (double v : g.params) CHECK(v == 0.0);
    for (double v : g.input) CHECK(v == 0.0);

    // All weights zero, bias nonzero: output constant in x.
    nn::NetModel m = nn::make_model({LayerSpec::dense(3, 2)}, {});
    std::fill(m.weights.begin(), m.weights.end(), 0.0f);
    m.weights[6] = 0.3f;
    DenseMatrix x(2, 3, 0.7f), t(2, 2, 1.0f);
    const auto gi = nn::input_gradient(m, x, nn::Loss::Mse, t);
    for (float v : gi.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("cross-entropy gradient at the logits is (p - y) / B") {
    const std::vector<LayerSpec> layers{LayerSpec::dense(2, 3), LayerSpec::softmax(3)};
    std::mt19937_64 gen(5);
    const nn::Network net(layers, random_params(layers, gen));
    const auto tape = net.forward(testing::random_vector(4, gen), 2);
    const std::vector<double> y{0, 1, 0, 1, 0, 0};
    const auto lr = nn::evaluate_loss(net, tape, nn::Loss::CrossEntropy, y);
    CHECK(lr.from_layer == 1);
    for (std::size_t i = 0; i < 6; ++i) CHECK(lr.grad[i] == doctest::Approx((tape.output()[i] - y[i]) / 2.0));
  }

  TEST_CASE("mse input gradient through an identity layer is 2(x - x0)/n") {
    nn::NetModel m = nn::make_model({LayerSpec::dense(3, 3)}, {});
    std::fill(m.weights.begin(), m.weights.end(), 0.0f);
    m.weights[0] = m.weights[4] = m.weights[8] = 1.0f;
    DenseMatrix x(1, 3), x0(1, 3);
    x(0, 0) = 1.0f, x(0, 1) = -2.0f, x(0, 2) = 0.5f;
    x0(0, 0) = 0.0f, x0(0, 1) = 1.0f, x0(0, 2) = 0.5f;
    const auto g = nn::input_gradient(m, x, nn::Loss::Mse, x0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(g(0, i) == doctest::Approx(2.0 * (x(0, i) - x0(0, i)) / 3.0));
  }

  TEST_CASE("shape and state errors") {
    const nn::Network net({LayerSpec::dense(2, 2)}, std::vector<double>(6, 0.1));
    CHECK_ERROR_CODE(net.forward(std::vector<double>(3, 0.0), 1), ErrorCode::ShapeError);
    CHECK_ERROR_CODE(net.backward(nn::Tape{}, std::vector<double>(2, 0.0)), ErrorCode::StateError);
    CHECK_ERROR_CODE(nn::Network({LayerSpec::dense(2, 3), LayerSpec::dense(2, 1)}, std::vector<double>(12, 0.0)),
                     ErrorCode::BadConfig);
  }

  TEST_CASE("learning rate zero leaves the weights unchanged") {
    const auto model = nn::make_model({LayerSpec::dense(2, 2), LayerSpec::softmax(2)}, quick(3));
    DenseMatrix x(4, 2, 0.5f), y(4, 2);
    for (std::size_t i = 0; i < 4; ++i) y(i, i % 2) = 1.0f;
    const auto r = nn::train(model, x, y, nn::Loss::CrossEntropy, quick(3, 0.0));
    CHECK(r.model.weights == model.weights);
  }

  TEST_CASE("linearly separable 2-D set is learned perfectly") {
    std::mt19937_64 gen(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::size_t N = 64;
    DenseMatrix x(N, 2), y(N, 2);
    for (std::size_t i = 0; i < N; ++i) {
      double a = u(gen), b = u(gen);
      while (std::abs(a + b) < 0.2) a = u(gen);  // keep a margin
      x(i, 0) = static_cast<float>(a);
      x(i, 1) = static_cast<float>(b);
      y(i, a + b > 0 ? 1 : 0) = 1.0f;
    }
    const auto model = nn::make_model({LayerSpec::dense(2, 2), LayerSpec::softmax(2)}, quick(200, 0.05));
    const auto r = nn::train(model, x, y, nn::Loss::CrossEntropy, quick(200, 0.05));
    const nn::Network net(r.model);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < N; ++i) {
      const auto p = net.predict(x.row_as_double(i));
      hit += (p[1] > p[0]) == (y(i, 1) == 1.0f);
    }
    CHECK(hit == N);
  }

  TEST_CASE("identity regression with dense(4->4) reaches train MSE below 1e-3") {
    std::mt19937_64 gen(7);
    const auto x = testing::random_matrix(128, 4, gen, -1.0, 1.0);
    const auto model = nn::make_model({LayerSpec::dense(4, 4)}, quick(200, 1e-2));
    const auto r = nn::train(model, x, x, nn::Loss::Mse, quick(200, 1e-2));
    const nn::Network net(r.model);
    const auto tape = net.forward(std::vector<double>(x.data().begin(), x.data().end()), x.rows());
    const auto loss = nn::evaluate_loss(net, tape, nn::Loss::Mse, std::vector<double>(x.data().begin(), x.data().end()));
    CHECK(loss.loss < 1e-3);
    CHECK(r.log.iteration_loss.size() == 200 * (128 / 8));
    CHECK(r.log.epoch_loss.size() == 200);
  }

  TEST_CASE("training is bit-deterministic for a fixed seed") {
    std::mt19937_64 gen(8);
    const auto x = testing::random_matrix(40, 3, gen);
    DenseMatrix y(40, 2);
    for (std::size_t i = 0; i < 40; ++i) y(i, x(i, 0) > 0.5f ? 1 : 0) = 1.0f;
    const std::vector<LayerSpec> L{LayerSpec::dense(3, 4), LayerSpec::relu(4), LayerSpec::dense(4, 2),
                                   LayerSpec::softmax(2)};
    const auto a = nn::train(nn::make_model(L, quick(10)), x, y, nn::Loss::CrossEntropy, quick(10));
    const auto b = nn::train(nn::make_model(L, quick(10)), x, y, nn::Loss::CrossEntropy, quick(10));
    CHECK(a.model.weights == b.model.weights);
    CHECK(a.log.iteration_loss == b.log.iteration_loss);
  }

  TEST_CASE("non-finite loss raises TrainingDiverged") {
    DenseMatrix x(4, 1, 1.0f), y(4, 1, 0.0f);
    y(2, 0) = std::numeric_limits<float>::quiet_NaN();
    const auto model = nn::make_model({LayerSpec::dense(1, 1)}, quick(2));
    CHECK_ERROR_CODE(nn::train(model, x, y, nn::Loss::Mse, quick(2)), ErrorCode::TrainingDiverged);
  }

  TEST_CASE("architecture json round trip") {
    const auto model = nn::make_model({LayerSpec::conv1d(1, 6, 2, 3), LayerSpec::relu(8), LayerSpec::flatten(8),
                                       LayerSpec::dense(8, 2), LayerSpec::softmax(2)},
                                      quick(4));
    const auto back = nn::model_from_json(nn::architecture_json(model), model.weights);
    CHECK(back.weights == model.weights);
    REQUIRE(back.layers.size() == model.layers.size());
    for (std::size_t i = 0; i < back.layers.size(); ++i) {
      CHECK(back.layers[i].kind == model.layers[i].kind);
      CHECK(back.layers[i].in_dim == model.layers[i].in_dim);
      CHECK(back.layers[i].out_dim == model.layers[i].out_dim);
      CHECK(back.layers[i].kernel == model.layers[i].kernel);
    }
    CHECK(back.train_config.epochs == 4);
    CHECK(model.parameter_count() == (2 * 3 + 2) + (8 * 2 + 2));
  }
}
