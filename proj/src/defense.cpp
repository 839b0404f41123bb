#include "pnmf/defense.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pnmf/error.hpp"
#include "pnmf/parallel.hpp"
#include "pnmf/rng.hpp"
#include "pnmf/tensor_store.hpp"

namespace pnmf::defense {
namespace fs = std::filesystem;
using nlohmann::json;

void DefenseConfig::validate(const diffusion::DiffusionSchedule& schedule) const {
  if (t_pur < 1 || t_pur > schedule.T) fail(ErrorCode::BadConfig, "t_pur must lie in [1, T]");
  if (K < 1) fail(ErrorCode::BadConfig, "K must be >= 1");
}

DefendedPipeline::DefendedPipeline(const classifier::ClassifierBundle& classifier,
                                   const denoiser::DenoiserBundle& denoiser,
                                   const diffusion::DiffusionSchedule& schedule, const DefenseConfig& config)
    : classifier_(classifier.net), denoiser_(denoiser.net), config_(config) {
  config.validate(schedule);
  denoiser::check_schedule(denoiser, schedule);
  if (denoiser.feature_dim() != classifier.net.input_dim()) {
    fail(ErrorCode::ShapeError, "denoiser and classifier disagree on feature dimension");
  }
  embedding_ = denoiser::embed_time(static_cast<double>(config.t_pur), denoiser.embed_dim);
  const double ab = schedule.alpha_bar_at(config.t_pur);
  signal_scale_ = std::sqrt(ab);
  noise_scale_ = std::sqrt(1.0 - ab);
}

std::vector<double> DefendedPipeline::draw_noise(std::uint64_t noise_seed, std::size_t sample_index,
                                                 std::size_t draw_index) const {
  KeyedRng rng(noise_seed, "purify", sample_index, draw_index);
  std::vector<double> eps(input_dim());
  for (auto& e : eps) e = rng.normal();
  return eps;
}

std::vector<double> DefendedPipeline::purify(std::span<const double> x, std::uint64_t noise_seed,
                                             std::size_t sample_index, std::size_t draw_index) const {
  const std::size_t M = input_dim();
  if (x.size() != M) fail(ErrorCode::ShapeError, "defended pipeline expects " + std::to_string(M) + " features");
  const auto eps = draw_noise(noise_seed, sample_index, draw_index);
  std::vector<double> input(M + embedding_.size());
  for (std::size_t i = 0; i < M; ++i) input[i] = signal_scale_ * x[i] + noise_scale_ * eps[i];
  std::copy(embedding_.begin(), embedding_.end(), input.begin() + static_cast<std::ptrdiff_t>(M));
  return denoiser_.predict(input);
}

std::vector<double> DefendedPipeline::probabilities(std::span<const double> x, std::uint64_t noise_seed,
                                                    std::size_t sample_index) const {
  std::vector<double> mean(classifier_.output_dim(), 0.0);
  for (std::size_t k = 0; k < config_.K; ++k) {
    const auto p = classifier_.predict(purify(x, noise_seed, sample_index, k));
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += p[c];
  }
  for (auto& v : mean) v /= static_cast<double>(config_.K);
  return mean;
}

double DefendedPipeline::ce_loss_and_gradient(std::span<const double> x, int label, std::uint64_t noise_seed,
                                              std::size_t sample_index, std::span<double> grad,
                                              std::vector<double>* mean_probs) const {
  const std::size_t M = input_dim();
  if (x.size() != M || grad.size() != M) fail(ErrorCode::ShapeError, "gradient buffer size mismatch");
  const std::size_t C = classifier_.output_dim();
  std::vector<double> mean(C, 0.0);
  std::vector<double> dmean(M, 0.0);  // sum_k d p_k[label] / dx
  std::vector<double> upstream(C, 0.0);
  upstream[static_cast<std::size_t>(label)] = 1.0;
  for (std::size_t k = 0; k < config_.K; ++k) {
    const auto eps = draw_noise(noise_seed, sample_index, k);
    std::vector<double> input(M + embedding_.size());
    for (std::size_t i = 0; i < M; ++i) input[i] = signal_scale_ * x[i] + noise_scale_ * eps[i];
    std::copy(embedding_.begin(), embedding_.end(), input.begin() + static_cast<std::ptrdiff_t>(M));
    const nn::Tape den_tape = denoiser_.forward(input, 1);
    const nn::Tape cls_tape = classifier_.forward(den_tape.output(), 1);
    const auto p = cls_tape.output();
    for (std::size_t c = 0; c < C; ++c) mean[c] += p[c];
    const nn::Gradients gc = classifier_.backward(cls_tape, upstream);
    const nn::Gradients gd = denoiser_.backward(den_tape, gc.input);
    for (std::size_t i = 0; i < M; ++i) dmean[i] += signal_scale_ * gd.input[i];
  }
  const double K = static_cast<double>(config_.K);
  for (auto& v : mean) v /= K;
  const double py = std::max(mean[static_cast<std::size_t>(label)], 1e-300);
  for (std::size_t i = 0; i < M; ++i) grad[i] = -dmean[i] / (K * py);
  if (mean_probs) *mean_probs = mean;
  return -std::log(py);
}

std::vector<double> purify(std::span<const double> x, const DefenseConfig& config,
                           const denoiser::DenoiserBundle& denoiser, const diffusion::DiffusionSchedule& schedule,
                           std::size_t sample_index, std::size_t draw_index) {
  config.validate(schedule);
  KeyedRng rng(config.seed_base, "purify", sample_index, draw_index);
  std::vector<double> eps(x.size());
  for (auto& e : eps) e = rng.normal();
  const auto xt = diffusion::q_sample_with(x, config.t_pur, schedule, eps);
  return denoiser::denoise(denoiser, schedule, xt, config.t_pur);
}

DenseMatrix predict_defended(const DenseMatrix& X, const DefenseConfig& config,
                             const denoiser::DenoiserBundle& denoiser, const diffusion::DiffusionSchedule& schedule,
                             const classifier::ClassifierBundle& classifier, unsigned threads) {
  const DefendedPipeline pipeline(classifier, denoiser, schedule, config);
  if (X.rows() != pipeline.input_dim()) fail(ErrorCode::ShapeError, "feature dimension mismatch");
  DenseMatrix probs(X.cols(), 2);
  parallel_for(X.cols(), threads, [&](std::size_t n) {
    const auto p = pipeline.probabilities(X.column(n), config.seed_base, n);
    probs(n, 0) = static_cast<float>(p[0]);
    probs(n, 1) = static_cast<float>(p[1]);
  });
  return probs;
}

namespace {

DenseMatrix labels_matrix(const std::vector<int>& labels) {
  DenseMatrix m(1, labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) m(0, i) = static_cast<float>(labels[i]);
  return m;
}

struct BundleFile {
  const char* name;
  TensorRole role;
};

constexpr BundleFile kBundleFiles[] = {{"X_test", TensorRole::X_test},
                                       {"labels", TensorRole::labels},
                                       {"probs_defended", TensorRole::probs},
                                       {"probs_clean", TensorRole::probs}};

}  // namespace

void export_eval_bundle(const fs::path& dir, const EvalBundle& bundle) {
  const std::size_t N = bundle.labels.size();
  if (bundle.X_test.cols() != N || bundle.defended_probs.rows() != N || bundle.clean_probs.rows() != N) {
    fail(ErrorCode::ShapeError, "eval bundle components disagree on sample count");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  const DenseMatrix* mats[] = {&bundle.X_test, nullptr, &bundle.defended_probs, &bundle.clean_probs};
  const DenseMatrix labels = labels_matrix(bundle.labels);
  json files = json::object();
  for (std::size_t i = 0; i < std::size(kBundleFiles); ++i) {
    const auto& f = kBundleFiles[i];
    TensorManifest m;
    m.name = f.name;
    m.role = f.role;
    m.created_by_stage = "purify-eval";
    const auto stored = write_tensor(mats[i] ? *mats[i] : labels, m, dir / (std::string(f.name) + ".pnmf"));
    files[f.name] = {{"role", std::string(to_string(f.role))}, {"checksum", checksum_hex(stored.checksum)}};
  }
  json doc = {{"files", files}, {"components", bundle.components}};
  std::ofstream out(dir / "bundle.json", std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write bundle manifest");
  out << doc.dump(2) << '\n';
}

EvalBundle load_eval_bundle(const fs::path& dir) {
  std::ifstream in(dir / "bundle.json");
  if (!in) fail(ErrorCode::FormatError, "missing " + (dir / "bundle.json").string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bundle.json: ") + e.what());
  }
  EvalBundle b;
  DenseMatrix loaded[4];
  for (std::size_t i = 0; i < std::size(kBundleFiles); ++i) {
    const auto& f = kBundleFiles[i];
    if (!doc["files"].contains(f.name)) fail(ErrorCode::FormatError, std::string("bundle lacks ") + f.name);
    auto [mat, manifest] = read_tensor(dir / (std::string(f.name) + ".pnmf"));
    if (checksum_hex(manifest.checksum) != doc["files"][f.name]["checksum"].get<std::string>()) {
      fail(ErrorCode::CorruptFile, std::string(f.name) + " does not match the bundle manifest");
    }
    loaded[i] = std::move(mat);
  }
  b.X_test = std::move(loaded[0]);
  for (float v : loaded[1].data()) b.labels.push_back(static_cast<int>(v));
  b.defended_probs = std::move(loaded[2]);
  b.clean_probs = std::move(loaded[3]);
  b.components = doc.value("components", std::map<std::string, std::string>{});
  return b;
}

}  // namespace pnmf::defense
