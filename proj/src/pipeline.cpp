#include "pnmf/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pnmf/diffusion.hpp"
#include "pnmf/error.hpp"
#include "pnmf/featstats.hpp"
#include "pnmf/metrics.hpp"
#include "pnmf/rng.hpp"
#include "pnmf/tensor_store.hpp"

namespace pnmf::pipeline {
namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t PipelineConfig::seed_for(std::string_view stream) const {
  if (auto it = seeds.find(std::string(stream)); it != seeds.end()) return it->second;
  return KeyedRng(global_seed, stream).next_u64();
}

void PipelineConfig::validate() const {
  if (synthetic) {
    synthetic_spec.validate();
  } else if (data_dir.empty()) {
    fail(ErrorCode::BadConfig, "folder ingest needs data_dir");
  }
  if (image_side < 4) fail(ErrorCode::BadConfig, "image_side must be >= 4");
  if (nnmf.rank < 1) fail(ErrorCode::BadConfig, "nnmf.rank must be >= 1");
  if (nnmf.max_iters < 1) fail(ErrorCode::BadConfig, "nnmf.iters must be >= 1");
  if (M < 1 || M > nnmf.rank) fail(ErrorCode::BadConfig, "selection.M must lie in [1, rank]");
  if (classifier.architecture == classifier::Architecture::Conv && M < 3) {
    fail(ErrorCode::BadConfig, "the conv classifier needs M >= 3");
  }
  if (!(p_max > 0.0 && p_max <= 1.0)) fail(ErrorCode::BadConfig, "selection.p_max must lie in (0, 1]");
  if (classifier.train.epochs < 1 || classifier.train.batch_size < 1) fail(ErrorCode::BadConfig, "classifier budgets must be positive");
  if (denoiser.train.epochs < 1 || denoiser.train.batch_size < 1) fail(ErrorCode::BadConfig, "denoiser budgets must be positive");
  if (denoiser.embed_dim == 0 || denoiser.embed_dim % 2 != 0) fail(ErrorCode::BadConfig, "denoiser.embed_dim must be even");
  const auto schedule = diffusion::build_schedule(T, beta_1, beta_T);
  if (pairs_per_sample < 1 || eval_pairs_per_sample < 1) fail(ErrorCode::BadConfig, "pair counts must be positive");
  if (example_t < 1 || example_t > T) fail(ErrorCode::BadConfig, "diffusion.example_t must lie in [1, T]");
  defense.validate(schedule);
  attack.validate();
  if (attack.epsilon <= 0.0) fail(ErrorCode::BadConfig, "attack.epsilon must be positive");
  if (attack.square_queries == 0) fail(ErrorCode::BadConfig, "attack.square_queries must be positive");
}

namespace {

// ---------------------------------------------------------------- config

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::BadConfig, where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::BadConfig, where() + "." + key + " has the wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Reader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(ErrorCode::BadConfig, "unknown config key " + where() + "." + k);
    }
  }

 private:
  std::string where() const { return path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& text, std::initializer_list<std::pair<const char*, E>> options, const char* what) {
  for (const auto& [name, value] : options) {
    if (text == name) return value;
  }
  fail(ErrorCode::BadConfig, std::string("unknown ") + what + " '" + text + "'");
}

void read_train(Reader r, nn::TrainConfig& t) {
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("learning_rate", t.learning_rate);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("adam_epsilon", t.adam_epsilon);
  r.finish();
}

}  // namespace

PipelineConfig parse_config(std::string_view json_text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::BadConfig, std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Reader root(doc, "config");
  std::string data_dir, work_dir;
  root.get("data_dir", data_dir);
  root.get("work_dir", work_dir);
  root.get("global_seed", c.global_seed);
  root.get("threads", c.threads);
  root.get("seeds", c.seeds);
  if (!data_dir.empty()) c.data_dir = fs::path(data_dir).is_absolute() ? fs::path(data_dir) : base_dir / data_dir;
  if (work_dir.empty()) {
    const char* env = std::getenv("PNMF_WORKDIR");
    work_dir = env && *env ? env : "work";
  }
  c.work_dir = fs::path(work_dir).is_absolute() ? fs::path(work_dir) : base_dir / work_dir;

  {
    Reader r = root.child("ingest");
    std::string source = "synthetic";
    r.get("source", source);
    c.synthetic = parse_enum<bool>(source, {{"synthetic", true}, {"folder", false}}, "ingest source");
    r.get("image_side", c.image_side);
    c.synthetic_spec.image_side = c.image_side;
    if (r.has("counts")) {
      Reader counts = r.child("counts");
      const char* names[] = {"train", "val", "test"};
      for (std::size_t s = 0; s < 3; ++s) {
        std::array<std::size_t, 2> pair = c.synthetic_spec.counts[s];
        counts.get(names[s], pair);
        c.synthetic_spec.counts[s] = pair;
      }
      counts.finish();
    }
    r.get("lesion_intensity", c.synthetic_spec.lesion_intensity);
    std::array<double, 2> radius{c.synthetic_spec.lesion_radius_min, c.synthetic_spec.lesion_radius_max};
    r.get("lesion_radius", radius);
    c.synthetic_spec.lesion_radius_min = radius[0];
    c.synthetic_spec.lesion_radius_max = radius[1];
    r.get("noise_sigma", c.synthetic_spec.noise_sigma);
    r.get("class_dirs", c.class_dirs);
    r.finish();
  }
  {
    Reader r = root.child("nnmf");
    r.get("rank", c.nnmf.rank);
    r.get("iters", c.nnmf.max_iters);
    r.get("tolerance", c.nnmf.tolerance);
    r.get("epsilon_floor", c.nnmf.epsilon_floor);
    std::string div = "kl", proj = "least_squares";
    r.get("divergence", div);
    r.get("projection", proj);
    c.nnmf.divergence = parse_enum<nnmf::Divergence>(div, {{"kl", nnmf::Divergence::KL}, {"euclidean", nnmf::Divergence::Euclidean}},
                                   "divergence");
    c.projection.mode = parse_enum<nnmf::ProjectionMode>(
        proj, {{"least_squares", nnmf::ProjectionMode::LeastSquares}, {"kl", nnmf::ProjectionMode::KL}}, "projection");
    c.projection.epsilon_floor = c.nnmf.epsilon_floor;
    r.get("projection_iters", c.projection.max_iters);
    r.get("projection_tolerance", c.projection.tolerance);
    r.finish();
  }
  {
    Reader r = root.child("selection");
    r.get("M", c.M);
    r.get("p_max", c.p_max);
    r.finish();
  }
  {
    Reader r = root.child("classifier");
    std::string arch = "conv";
    r.get("architecture", arch);
    c.classifier.architecture =
        parse_enum<classifier::Architecture>(arch, {{"conv", classifier::Architecture::Conv}, {"dense", classifier::Architecture::Dense}},
                   "classifier architecture");
    read_train(r.child("train"), c.classifier.train);
    r.finish();
  }
  {
    Reader r = root.child("diffusion");
    r.get("T", c.T);
    r.get("beta_1", c.beta_1);
    r.get("beta_T", c.beta_T);
    r.get("pairs_per_sample", c.pairs_per_sample);
    r.get("eval_pairs_per_sample", c.eval_pairs_per_sample);
    r.get("example_t", c.example_t);
    r.finish();
  }
  {
    Reader r = root.child("denoiser");
    r.get("embed_dim", c.denoiser.embed_dim);
    r.get("hidden", c.denoiser.hidden);
    read_train(r.child("train"), c.denoiser.train);
    r.finish();
  }
  {
    Reader r = root.child("defense");
    r.get("t_pur", c.defense.t_pur);
    r.get("K", c.defense.K);
    r.finish();
  }
  {
    Reader r = root.child("attack");
    auto& a = c.attack;
    r.get("epsilon", a.epsilon);
    r.get("apgd_iters", a.apgd_iters);
    r.get("apgd_restarts", a.apgd_restarts);
    r.get("apgd_momentum", a.apgd_momentum);
    r.get("apgd_rho", a.apgd_rho);
    r.get("square_queries", a.square_queries);
    r.get("square_p_init", a.square_p_init);
    std::array<double, 2> box{a.clamp_lo, a.clamp_hi};
    r.get("clamp_box", box);
    a.clamp_lo = box[0];
    a.clamp_hi = box[1];
    std::string mode = "both", eot = "independent";
    r.get("mode", mode);
    r.get("eot_seeds", eot);
    c.attack_mode = parse_enum<AttackMode>(
        mode, {{"baseline", AttackMode::Baseline}, {"defended", AttackMode::Defended}, {"both", AttackMode::Both}},
        "attack mode");
    c.eot_seeds = parse_enum<EotSeeds>(eot, {{"independent", EotSeeds::Independent}, {"shared", EotSeeds::Shared}}, "eot_seeds");
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorCode::BadConfig, "cannot open config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), file.parent_path());
}

std::string config_to_json(const PipelineConfig& c) {
  auto train = [](const nn::TrainConfig& t) {
    return json{{"epochs", t.epochs},     {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
                {"beta1", t.beta1},       {"beta2", t.beta2},           {"adam_epsilon", t.adam_epsilon}};
  };
  const auto& s = c.synthetic_spec;
  json doc = {
      {"data_dir", c.data_dir.string()},
      {"work_dir", c.work_dir.string()},
      {"global_seed", c.global_seed},
      {"seeds", c.seeds},
      {"ingest",
       {{"source", c.synthetic ? "synthetic" : "folder"},
        {"image_side", c.image_side},
        {"counts", {{"train", s.counts[0]}, {"val", s.counts[1]}, {"test", s.counts[2]}}},
        {"lesion_intensity", s.lesion_intensity},
        {"lesion_radius", {s.lesion_radius_min, s.lesion_radius_max}},
        {"noise_sigma", s.noise_sigma},
        {"class_dirs", c.class_dirs}}},
      {"nnmf",
       {{"rank", c.nnmf.rank},
        {"iters", c.nnmf.max_iters},
        {"tolerance", c.nnmf.tolerance},
        {"epsilon_floor", c.nnmf.epsilon_floor},
        {"divergence", c.nnmf.divergence == nnmf::Divergence::KL ? "kl" : "euclidean"},
        {"projection", c.projection.mode == nnmf::ProjectionMode::KL ? "kl" : "least_squares"},
        {"projection_iters", c.projection.max_iters},
        {"projection_tolerance", c.projection.tolerance}}},
      {"selection", {{"M", c.M}, {"p_max", c.p_max}}},
      {"classifier",
       {{"architecture", c.classifier.architecture == classifier::Architecture::Conv ? "conv" : "dense"},
        {"train", train(c.classifier.train)}}},
      {"diffusion",
       {{"T", c.T},
        {"beta_1", c.beta_1},
        {"beta_T", c.beta_T},
        {"pairs_per_sample", c.pairs_per_sample},
        {"eval_pairs_per_sample", c.eval_pairs_per_sample},
        {"example_t", c.example_t}}},
      {"denoiser", {{"embed_dim", c.denoiser.embed_dim}, {"hidden", c.denoiser.hidden}, {"train", train(c.denoiser.train)}}},
      {"defense", {{"t_pur", c.defense.t_pur}, {"K", c.defense.K}}},
      {"attack",
       {{"epsilon", c.attack.epsilon},
        {"apgd_iters", c.attack.apgd_iters},
        {"apgd_restarts", c.attack.apgd_restarts},
        {"apgd_momentum", c.attack.apgd_momentum},
        {"apgd_rho", c.attack.apgd_rho},
        {"square_queries", c.attack.square_queries},
        {"square_p_init", c.attack.square_p_init},
        {"clamp_box", {c.attack.clamp_lo, c.attack.clamp_hi}},
        {"mode", c.attack_mode == AttackMode::Baseline ? "baseline"
                 : c.attack_mode == AttackMode::Defended ? "defended"
                                                         : "both"},
        {"eot_seeds", c.eot_seeds == EotSeeds::Shared ? "shared" : "independent"}}}};
  return doc.dump(2);
}

std::string StageReport::to_json() const {
  return json{{"stage", stage}, {"status", status}, {"inputs", inputs}, {"outputs", outputs}}.dump(2);
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest",        "nnmf",           "rank",
                                              "train-classifier", "gen-diffusion", "train-denoiser",
                                              "purify-eval",   "attack",         "report"};
  return names;
}

namespace {

// ---------------------------------------------------------------- artifacts

std::string hex(std::uint64_t v) { return checksum_hex(v); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* stage_dir(std::string_view stage) {
  static const std::map<std::string_view, const char*> dirs{
      {"ingest", "ingest"},         {"nnmf", "nnmf"},           {"rank", "rank"},
      {"train-classifier", "classifier"}, {"gen-diffusion", "diffusion"}, {"train-denoiser", "denoiser"},
      {"purify-eval", "defense"},   {"attack", "attack"},       {"report", "report"}};
  return dirs.at(stage);
}

class Stage {
 public:
  Stage(const PipelineConfig& cfg, std::string_view name) : cfg_(cfg), root_(cfg.work_dir) {
    report_.stage = std::string(name);
    std::error_code ec;
    fs::remove_all(root_ / stage_dir(name), ec);
    fs::create_directories(root_ / stage_dir(name), ec);
    if (ec) fail(ErrorCode::IoError, "cannot create " + (root_ / stage_dir(name)).string());
  }

  const PipelineConfig& cfg() const { return cfg_; }

  void require(std::string_view upstream) {
    const fs::path rp = root_ / "reports" / (std::string(upstream) + ".json");
    const std::string hint = "run `pnmf " + std::string(upstream) + "` first";
    if (!fs::exists(rp)) fail(ErrorCode::DependencyError, "stage " + std::string(upstream) + " has not completed; " + hint);
    json doc;
    try {
      doc = json::parse(slurp(rp));
    } catch (const json::exception&) {
      fail(ErrorCode::DependencyError, "report of stage " + std::string(upstream) + " is unreadable; " + hint);
    }
    for (const auto& [rel, sum] : doc.at("outputs").items()) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p)) fail(ErrorCode::DependencyError, rel + " is missing; " + hint);
      if (hex(file_checksum(p)) != sum.get<std::string>()) {
        fail(ErrorCode::DependencyError, rel + " changed since stage " + std::string(upstream) + " ran; " + hint);
      }
    }
  }

  DenseMatrix read(const std::string& rel) {
    const fs::path p = root_ / rel;
    record_input(rel);
    record_input(fs::relative(sidecar_path(p), root_).generic_string());
    return read_tensor(p).first;
  }

  std::vector<int> read_labels(const std::string& rel) {
    const DenseMatrix m = read(rel);
    std::vector<int> out;
    for (float v : m.data()) out.push_back(static_cast<int>(v));
    return out;
  }

  std::string read_text(const std::string& rel) {
    record_input(rel);
    return slurp(root_ / rel);
  }

  void write(const DenseMatrix& m, const std::string& rel, TensorRole role, std::uint64_t seed = 0) {
    TensorManifest man;
    man.name = fs::path(rel).stem().string();
    man.role = role;
    man.created_by_stage = report_.stage;
    man.created_by_seed = seed;
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    write_tensor(m, man, p);
    record_output(rel);
    record_output(fs::relative(sidecar_path(p), root_).generic_string());
  }

  void write_labels(const std::vector<int>& labels, const std::string& rel) {
    DenseMatrix m(1, labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) m(0, i) = static_cast<float>(labels[i]);
    write(m, rel, TensorRole::labels);
  }

  void write_text(const std::string& rel, const std::string& text) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write " + p.string());
    out << text;
    if (!out.flush()) fail(ErrorCode::IoError, "cannot write " + p.string());
    record_output(rel);
  }

  /// Records files written by library calls (e.g. the eval bundle directory).
  void record_tree(const std::string& rel_dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root_ / rel_dir)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root_).generic_string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) record_output(f);
  }

  json extra_timing = json::object();

  StageReport finish(double seconds) {
    report_.seconds = seconds;
    fs::create_directories(root_ / "reports");
    fs::create_directories(root_ / "logs");
    {
      std::ofstream out(root_ / "reports" / (report_.stage + ".json"), std::ios::trunc);
      out << report_.to_json() << '\n';
    }
    json timing = {{"stage", report_.stage}, {"seconds", seconds}, {"threads", cfg_.threads}};
    for (const auto& [k, v] : extra_timing.items()) timing[k] = v;
    std::ofstream log(root_ / "logs" / (report_.stage + ".timing.json"), std::ios::trunc);
    log << timing.dump(2) << '\n';
    return report_;
  }

 private:
  void record_input(const std::string& rel) { report_.inputs[rel] = hex(file_checksum(root_ / rel)); }
  void record_output(const std::string& rel) { report_.outputs[rel] = hex(file_checksum(root_ / rel)); }

  const PipelineConfig& cfg_;
  fs::path root_;
  StageReport report_;
};

// ---------------------------------------------------------------- formatting

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

std::string train_log_csv(const nn::TrainLog& log, const char* metric) {
  std::ostringstream out;
  out << "epoch,loss,train_" << metric << ",val_" << metric << ",best\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    out << e + 1 << ',' << num(log.epoch_loss[e]) << ','
        << (e < log.epoch_train_metric.size() ? num(log.epoch_train_metric[e]) : "") << ','
        << (e < log.epoch_val_metric.size() ? num(log.epoch_val_metric[e]) : "") << ',' << (e == log.best_epoch) << '\n';
  }
  return out.str();
}

json confusion_json(const classifier::Confusion& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

std::vector<double> tumor_column(const DenseMatrix& probs) {
  std::vector<double> p(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) p[i] = probs(i, 1);
  return p;
}

DenseMatrix weights_tensor(const nn::NetModel& m) { return DenseMatrix(1, m.weights.size(), m.weights); }

// ---------------------------------------------------------------- bundles on disk

void save_classifier(Stage& s, const classifier::ClassifierBundle& b) {
  json doc = {{"architecture", json::parse(nn::architecture_json(b.net))},
              {"selected_indices", b.selected_indices},
              {"class_names", b.class_names},
              {"threshold", b.threshold}};
  s.write_text("classifier/bundle.json", doc.dump(2) + "\n");
  s.write(weights_tensor(b.net), "classifier/weights.pnmf", TensorRole::weights, b.net.train_config.seed);
}

classifier::ClassifierBundle load_classifier(Stage& s) {
  const json doc = json::parse(s.read_text("classifier/bundle.json"));
  const DenseMatrix w = s.read("classifier/weights.pnmf");
  classifier::ClassifierBundle b;
  b.net = nn::model_from_json(doc.at("architecture").dump(), {w.data().begin(), w.data().end()});
  b.selected_indices = doc.at("selected_indices").get<std::vector<std::size_t>>();
  b.class_names = doc.at("class_names").get<std::array<std::string, 2>>();
  b.threshold = doc.at("threshold").get<double>();
  return b;
}

void save_denoiser(Stage& s, const denoiser::DenoiserBundle& b) {
  json doc = {{"architecture", json::parse(nn::architecture_json(b.net))},
              {"schedule_ref", hex(b.schedule_ref)},
              {"embed_dim", b.embed_dim}};
  s.write_text("denoiser/bundle.json", doc.dump(2) + "\n");
  s.write(weights_tensor(b.net), "denoiser/weights.pnmf", TensorRole::weights, b.net.train_config.seed);
}

denoiser::DenoiserBundle load_denoiser(Stage& s) {
  const json doc = json::parse(s.read_text("denoiser/bundle.json"));
  const DenseMatrix w = s.read("denoiser/weights.pnmf");
  denoiser::DenoiserBundle b;
  b.net = nn::model_from_json(doc.at("architecture").dump(), {w.data().begin(), w.data().end()});
  b.schedule_ref = std::stoull(doc.at("schedule_ref").get<std::string>(), nullptr, 16);
  b.embed_dim = doc.at("embed_dim").get<std::size_t>();
  return b;
}

diffusion::DiffusionSchedule load_schedule(Stage& s) {
  const json doc = json::parse(s.read_text("diffusion/schedule.json"));
  auto sched = diffusion::build_schedule(doc.at("T").get<std::size_t>(), doc.at("beta_1").get<double>(),
                                         doc.at("beta_T").get<double>());
  if (hex(sched.checksum()) != doc.at("checksum").get<std::string>()) {
    fail(ErrorCode::CorruptFile, "diffusion/schedule.json checksum does not match its parameters");
  }
  return sched;
}

void save_pairs(Stage& s, const diffusion::DiffusionPairSet& p, const std::string& prefix, std::uint64_t seed) {
  s.write(p.x0, prefix + "_x0.pnmf", TensorRole::pairs, seed);
  s.write(p.xt, prefix + "_xt.pnmf", TensorRole::pairs, seed);
  s.write(p.eps, prefix + "_eps.pnmf", TensorRole::pairs, seed);
  DenseMatrix meta(2, p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    meta(0, i) = static_cast<float>(p.t[i]);
    meta(1, i) = static_cast<float>(p.sample_index[i]);
  }
  s.write(meta, prefix + "_t.pnmf", TensorRole::pairs, seed);
}

diffusion::DiffusionPairSet load_pairs(Stage& s, const std::string& prefix) {
  diffusion::DiffusionPairSet p;
  p.x0 = s.read(prefix + "_x0.pnmf");
  p.xt = s.read(prefix + "_xt.pnmf");
  p.eps = s.read(prefix + "_eps.pnmf");
  const DenseMatrix meta = s.read(prefix + "_t.pnmf");
  for (std::size_t i = 0; i < meta.cols(); ++i) {
    p.t.push_back(static_cast<std::uint32_t>(meta(0, i)));
    p.sample_index.push_back(static_cast<std::uint32_t>(meta(1, i)));
  }
  return p;
}

defense::DefenseConfig defense_config(const PipelineConfig& cfg) {
  auto d = cfg.defense;
  d.seed_base = cfg.seed_for("defense");
  return d;
}

// ---------------------------------------------------------------- stages

constexpr Split kSplits[] = {Split::Train, Split::Val, Split::Test};

std::string split_name(Split s) { return std::string(to_string(s)); }

void stage_ingest(Stage& s) {
  const auto& cfg = s.cfg();
  ingest::SplitSet set;
  if (cfg.synthetic) {
    auto spec = cfg.synthetic_spec;
    spec.image_side = cfg.image_side;
    spec.seed = cfg.seed_for("synthetic");
    set = ingest::generate_synthetic(spec, cfg.threads);
  } else {
    for (Split sp : kSplits) {
      fs::path dir = cfg.data_dir / split_name(sp);
      if (sp == Split::Val && !fs::exists(dir) && fs::exists(cfg.data_dir / "valid")) dir = cfg.data_dir / "valid";
      if (!fs::exists(dir)) fail(ErrorCode::BadConfig, "data directory " + dir.string() + " does not exist");
      set[sp] = ingest::load_split(dir, cfg.image_side, sp, cfg.threads, cfg.class_dirs);
    }
  }
  json summary = json::object();
  for (Split sp : kSplits) {
    const auto& d = set[sp];
    const std::string n = split_name(sp);
    const auto role = sp == Split::Train ? TensorRole::V_train : sp == Split::Val ? TensorRole::V_val : TensorRole::V_test;
    s.write(d.images, "ingest/V_" + n + ".pnmf", role, cfg.synthetic ? cfg.seed_for("synthetic") : 0);
    s.write_labels(d.labels, "ingest/y_" + n + ".pnmf");
    const auto tumors = static_cast<std::size_t>(std::count(d.labels.begin(), d.labels.end(), 1));
    summary[n] = {{"count", d.labels.size()},
                  {"normal", d.labels.size() - tumors},
                  {"tumor", tumors},
                  {"sources", d.sources},
                  {"skipped", d.skipped}};
  }
  s.write_text("ingest/summary.json", summary.dump(2) + "\n");
}

void stage_nnmf(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  auto opts = cfg.nnmf;
  opts.seed = cfg.seed_for("nnmf");
  const DenseMatrix V_train = s.read("ingest/V_train.pnmf");
  const auto model = nnmf::fit(V_train, opts);
  auto proj = cfg.projection;
  proj.threads = cfg.threads;
  s.write(model.W, "nnmf/W.pnmf", TensorRole::W, opts.seed);
  s.write(model.H_train, "nnmf/H_train.pnmf", TensorRole::H, opts.seed);
  s.write(nnmf::l2_normalize(model.H_train), "nnmf/F_train.pnmf", TensorRole::X_train, opts.seed);
  for (Split sp : {Split::Val, Split::Test}) {
    const std::string n = split_name(sp);
    const DenseMatrix H = nnmf::project(model.W, s.read("ingest/V_" + n + ".pnmf"), proj);
    s.write(H, "nnmf/H_" + n + ".pnmf", TensorRole::H, opts.seed);
    s.write(nnmf::l2_normalize(H), "nnmf/F_" + n + ".pnmf", sp == Split::Val ? TensorRole::X_val : TensorRole::X_test,
            opts.seed);
  }
  std::ostringstream log;
  log << "iteration,objective\n";
  for (std::size_t i = 0; i < model.iter_log.size(); ++i) log << i + 1 << ',' << num(model.iter_log[i]) << '\n';
  s.write_text("nnmf/iter_log.csv", log.str());
}

void stage_rank(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  s.require("nnmf");
  FeatureSet train{s.read("nnmf/F_train.pnmf"), s.read_labels("ingest/y_train.pnmf"), Split::Train, true};
  const auto sel = featstats::rank_and_select(train, cfg.M, cfg.p_max);
  json ranked = json::array();
  std::ostringstream csv;
  csv << "rank,component,auc,cohens_d,welch_t,welch_df,p_value,selected\n";
  for (std::size_t r = 0; r < sel.ranked.size(); ++r) {
    const auto& f = sel.ranked[r];
    ranked.push_back({{"component", f.component_index},
                      {"auc", f.auc},
                      {"cohens_d", f.cohens_d},
                      {"welch_t", f.welch_t},
                      {"welch_df", f.welch_df},
                      {"p_value", f.p_value}});
    csv << r + 1 << ',' << f.component_index << ',' << num(f.auc) << ',' << num(f.cohens_d) << ',' << num(f.welch_t)
        << ',' << num(f.welch_df) << ',' << num(f.p_value) << ',' << (r < sel.M) << '\n';
  }
  json doc = {{"M", sel.M}, {"p_max", sel.p_max}, {"ranking_key", sel.ranking_key}, {"selected", sel.selected},
              {"ranked", ranked}};
  s.write_text("rank/selection.json", doc.dump(2) + "\n");
  s.write_text("rank/scores.csv", csv.str());
  for (Split sp : kSplits) {
    const std::string n = split_name(sp);
    const auto role = sp == Split::Train ? TensorRole::X_train : sp == Split::Val ? TensorRole::X_val : TensorRole::X_test;
    s.write(featstats::select_rows(sp == Split::Train ? train.X : s.read("nnmf/F_" + n + ".pnmf"), sel.selected),
            "rank/Xs_" + n + ".pnmf", role);
  }
}

void stage_train_classifier(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  s.require("nnmf");
  s.require("rank");
  const json selj = json::parse(s.read_text("rank/selection.json"));
  featstats::SelectionResult sel;
  sel.selected = selj.at("selected").get<std::vector<std::size_t>>();
  sel.M = sel.selected.size();
  FeatureSet train{s.read("nnmf/F_train.pnmf"), s.read_labels("ingest/y_train.pnmf"), Split::Train, true};
  FeatureSet val{s.read("nnmf/F_val.pnmf"), s.read_labels("ingest/y_val.pnmf"), Split::Val, true};
  auto cc = cfg.classifier;
  cc.train.seed = cfg.seed_for("classifier");
  const auto [bundle, log] = classifier::train_classifier(train, val, sel, cc);
  save_classifier(s, bundle);
  s.write_text("classifier/train_log.csv", train_log_csv(log, "accuracy"));

  json conf = json::object();
  for (Split sp : {Split::Val, Split::Test}) {
    const std::string n = split_name(sp);
    const DenseMatrix Xs = s.read("rank/Xs_" + n + ".pnmf");
    const auto y = s.read_labels("ingest/y_" + n + ".pnmf");
    const DenseMatrix probs = classifier::predict_proba(bundle, Xs);
    const auto c = classifier::confusion(y, classifier::predict_labels(probs, bundle.threshold));
    conf[n] = confusion_json(c);
    conf[n]["accuracy"] = metrics::accuracy(c);
    s.write(probs, "classifier/probs_" + n + ".pnmf", TensorRole::probs, cc.train.seed);
  }
  s.write_text("classifier/confusion.json", conf.dump(2) + "\n");
}

void stage_gen_diffusion(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("rank");
  const auto sched = diffusion::build_schedule(cfg.T, cfg.beta_1, cfg.beta_T);
  s.write(sched.to_matrix(), "diffusion/schedule.pnmf", TensorRole::schedule);
  json sj = {{"T", sched.T}, {"beta_1", sched.beta_1}, {"beta_T", sched.beta_T}, {"checksum", hex(sched.checksum())}};
  s.write_text("diffusion/schedule.json", sj.dump(2) + "\n");

  const DenseMatrix Xtr = s.read("rank/Xs_train.pnmf");
  const DenseMatrix Xval = s.read("rank/Xs_val.pnmf");
  const DenseMatrix Xte = s.read("rank/Xs_test.pnmf");
  const struct {
    const DenseMatrix& X;
    const char* name;
    const char* stream;
    std::size_t per_sample;
    std::optional<std::size_t> fixed_t;
  } sets[] = {{Xtr, "train", "diffusion", cfg.pairs_per_sample, std::nullopt},
              {Xval, "val", "diffusion-val", cfg.eval_pairs_per_sample, std::nullopt},
              {Xte, "test", "diffusion-test", cfg.eval_pairs_per_sample, std::nullopt},
              {Xte, "example", "diffusion-example", 1, cfg.example_t}};
  for (const auto& set : sets) {
    const auto seed = cfg.seed_for(set.stream);
    const auto pairs = diffusion::generate_pairs(set.X, sched, set.per_sample, seed, set.fixed_t, cfg.threads);
    save_pairs(s, pairs, std::string("diffusion/") + set.name, seed);
  }

  const auto curve = diffusion::noise_energy_curve(Xtr, sched, 4, cfg.seed_for("noise-energy"));
  double mean_norm_sq = 0.0;
  for (std::size_t n = 0; n < Xtr.cols(); ++n) {
    for (double v : Xtr.column(n)) mean_norm_sq += v * v;
  }
  mean_norm_sq /= static_cast<double>(Xtr.cols());
  std::ostringstream csv;
  csv << "t,alpha_bar,empirical,closed_form\n";
  for (std::size_t t = 1; t <= sched.T; ++t) {
    csv << t << ',' << num(sched.alpha_bar_at(t)) << ',' << num(curve[t - 1]) << ','
        << num(diffusion::expected_noise_energy(mean_norm_sq, Xtr.rows(), sched.alpha_bar_at(t))) << '\n';
  }
  s.write_text("diffusion/noise_energy.csv", csv.str());
}

void stage_train_denoiser(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("gen-diffusion");
  const auto sched = load_schedule(s);
  const auto train = load_pairs(s, "diffusion/train");
  const auto val = load_pairs(s, "diffusion/val");
  const auto test = load_pairs(s, "diffusion/test");
  auto dc = cfg.denoiser;
  dc.train.seed = cfg.seed_for("denoiser");
  const auto bundle = denoiser::train_denoiser(train, val, sched, dc);
  save_denoiser(s, bundle);
  s.write_text("denoiser/train_log.csv", train_log_csv(bundle.train_log, "mse"));
  const auto err = denoiser::pair_errors(bundle, sched, test);
  std::ostringstream csv;
  csv << "pair,sample,t,noisy_error,denoised_error\n";
  for (std::size_t p = 0; p < test.size(); ++p) {
    csv << p << ',' << test.sample_index[p] << ',' << test.t[p] << ',' << num(err.noisy[p]) << ','
        << num(err.denoised[p]) << '\n';
  }
  s.write_text("denoiser/errors.csv", csv.str());
}

void stage_purify_eval(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  s.require("rank");
  s.require("train-classifier");
  s.require("gen-diffusion");
  s.require("train-denoiser");
  const auto cls = load_classifier(s);
  const auto den = load_denoiser(s);
  const auto sched = load_schedule(s);
  const DenseMatrix Xs = s.read("rank/Xs_test.pnmf");
  const auto y = s.read_labels("ingest/y_test.pnmf");
  const auto dcfg = defense_config(cfg);

  defense::EvalBundle b;
  b.X_test = Xs;
  b.labels = y;
  b.clean_probs = classifier::predict_proba(cls, Xs);
  b.defended_probs = defense::predict_defended(Xs, dcfg, den, sched, cls, cfg.threads);
  b.components = {{"classifier", hex(file_checksum(cfg.work_dir / "classifier/weights.pnmf"))},
                  {"classifier_architecture", hex(file_checksum(cfg.work_dir / "classifier/bundle.json"))},
                  {"denoiser", hex(file_checksum(cfg.work_dir / "denoiser/weights.pnmf"))},
                  {"denoiser_architecture", hex(file_checksum(cfg.work_dir / "denoiser/bundle.json"))},
                  {"schedule", hex(sched.checksum())},
                  {"config", hex(fnv1a64(json{{"t_pur", dcfg.t_pur}, {"K", dcfg.K}, {"seed_base", dcfg.seed_base}}.dump()))}};
  defense::export_eval_bundle(cfg.work_dir / "defense/bundle", b);
  s.record_tree("defense/bundle");

  const auto cc = classifier::confusion(y, classifier::predict_labels(b.clean_probs, cls.threshold));
  const auto cd = classifier::confusion(y, classifier::predict_labels(b.defended_probs, cls.threshold));
  json conf = {{"clean", confusion_json(cc)}, {"defended", confusion_json(cd)}};
  s.write_text("defense/confusion.json", conf.dump(2) + "\n");
  std::ostringstream csv;
  csv << "model,accuracy\n"
      << "clean," << num(metrics::accuracy(cc)) << "\n"
      << "defended," << num(metrics::accuracy(cd)) << "\n";
  s.write_text("defense/comparison.csv", csv.str());
}

void stage_attack(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  s.require("rank");
  s.require("train-classifier");
  s.require("gen-diffusion");
  s.require("train-denoiser");
  s.require("purify-eval");
  const auto cls = load_classifier(s);
  const DenseMatrix Xs = s.read("rank/Xs_test.pnmf");
  const auto y = s.read_labels("ingest/y_test.pnmf");
  auto acfg = cfg.attack;
  acfg.seed = cfg.seed_for("attack");

  auto save = [&](const attacks::EnsembleOutcome& o, const std::string& tag) {
    s.write_text("attack/" + tag + "_report.json", o.report.to_json() + "\n");
    s.write_text("attack/" + tag + "_report.csv", o.report.to_csv());
    s.write(o.adversarial, "attack/" + tag + "_adv.pnmf", TensorRole::X_test, acfg.seed);
    s.write(o.probs, "attack/" + tag + "_probs.pnmf", TensorRole::probs, acfg.seed);
    s.extra_timing[tag] = {{"apgd_seconds", o.report.apgd_seconds},
                           {"square_seconds", o.report.square_seconds},
                           {"wall_seconds", o.report.wall_seconds}};
  };

  if (cfg.attack_mode != AttackMode::Defended) {
    const attacks::ClassifierTarget target(cls.net);
    save(attacks::run_ensemble(target, target, Xs, y, acfg, cfg.threads, "baseline"), "baseline");
  }
  if (cfg.attack_mode != AttackMode::Baseline) {
    const auto den = load_denoiser(s);
    const auto sched = load_schedule(s);
    const auto dcfg = defense_config(cfg);
    const defense::DefendedPipeline pipe(cls, den, sched, dcfg);
    const attacks::DefendedTarget eval_view(pipe, dcfg.seed_base);
    const attacks::DefendedTarget attack_view(
        pipe, cfg.eot_seeds == EotSeeds::Shared ? dcfg.seed_base : cfg.seed_for("attack-eot"));
    save(attacks::run_ensemble(attack_view, eval_view, Xs, y, acfg, cfg.threads, "defended"), "defended");
  }
}

metrics::RunData run_from_probs(const DenseMatrix& probs, const std::vector<int>& labels) {
  metrics::RunData r;
  r.p_tumor = tumor_column(probs);
  r.predictions = classifier::predict_labels(probs);
  r.labels = labels;
  return r;
}

void stage_report(Stage& s) {
  const auto& cfg = s.cfg();
  s.require("ingest");
  s.require("train-classifier");
  s.require("purify-eval");
  s.require("attack");
  const auto y = s.read_labels("ingest/y_test.pnmf");
  std::map<std::string, metrics::RunData> runs;
  runs["Clean_Baseline"] = run_from_probs(s.read("classifier/probs_test.pnmf"), y);
  runs["Clean_Defended"] = run_from_probs(s.read("defense/bundle/probs_defended.pnmf"), y);
  if (cfg.attack_mode != AttackMode::Defended) {
    runs["Robust_Baseline"] = run_from_probs(s.read("attack/baseline_probs.pnmf"), y);
  }
  if (cfg.attack_mode != AttackMode::Baseline) {
    runs["Robust_Defended"] = run_from_probs(s.read("attack/defended_probs.pnmf"), y);
  }
  const auto table = metrics::assemble_table(runs, cfg.attack_mode != AttackMode::Both);
  s.write_text("report/metrics.csv", table.to_csv());
  s.write_text("report/metrics.json", table.to_json() + "\n");

  std::ostringstream drop;
  drop << "model,clean_accuracy,robust_accuracy,drop\n";
  for (const char* model : {"Baseline", "Defended"}) {
    const std::string clean = std::string("Clean_") + model, robust = std::string("Robust_") + model;
    if (!runs.count(robust)) continue;
    const double a = table.at(clean).accuracy, b = table.at(robust).accuracy;
    drop << model << ',' << num(a) << ',' << num(b) << ',' << num(a - b) << '\n';
  }
  s.write_text("report/accuracy_drop.csv", drop.str());

  std::ostringstream bars;
  bars << "model,metric,value\n";
  for (const auto& r : table.rows) {
    const std::pair<const char*, double> vals[] = {{"Acc", r.accuracy},   {"Prec", r.precision},
                                                   {"Rec", r.recall},     {"F1", r.f1},
                                                   {"MCC", r.mcc},        {"BalAcc", r.balanced_accuracy},
                                                   {"ROC-AUC", r.roc_auc}, {"Brier", r.brier},
                                                   {"LogLoss", r.log_loss}};
    for (const auto& [name, v] : vals) bars << r.tag << ',' << name << ',' << num(v) << '\n';
  }
  s.write_text("report/metric_bars.csv", bars.str());
}

}  // namespace

StageReport run_stage(std::string_view name, const PipelineConfig& cfg) {
  using Fn = void (*)(Stage&);
  static const std::map<std::string_view, Fn> stages{{"ingest", stage_ingest},
                                                     {"nnmf", stage_nnmf},
                                                     {"rank", stage_rank},
                                                     {"train-classifier", stage_train_classifier},
                                                     {"gen-diffusion", stage_gen_diffusion},
                                                     {"train-denoiser", stage_train_denoiser},
                                                     {"purify-eval", stage_purify_eval},
                                                     {"attack", stage_attack},
                                                     {"report", stage_report}};
  const auto it = stages.find(name);
  if (it == stages.end()) fail(ErrorCode::BadConfig, "unknown stage '" + std::string(name) + "'");
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  // A failed run must not leave a report that vouches for partial outputs.
  std::error_code ec;
  fs::remove(cfg.work_dir / "reports" / (std::string(name) + ".json"), ec);
  Stage stage(cfg, name);
  it->second(stage);
  return stage.finish(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
}

std::vector<StageReport> run_all(const PipelineConfig& cfg) {
  std::vector<StageReport> out;
  for (const auto& name : stage_names()) out.push_back(run_stage(name, cfg));
  emit_plots(cfg);
  return out;
}

// ---------------------------------------------------------------- plots

fs::path emit_plots(const PipelineConfig& cfg) {
  const fs::path root = cfg.work_dir;
  const fs::path dir = root / "plots";
  for (const auto& stage : stage_names()) {
    if (!fs::exists(root / "reports" / (stage + ".json"))) {
      fail(ErrorCode::DependencyError, "stage " + stage + " has not completed; run `pnmf " + stage + "` first");
    }
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot write plot data " + std::string(name));
    out << text;
  };
  auto tensor = [&](const std::string& rel) {
    if (!fs::exists(root / rel)) fail(ErrorCode::DependencyError, rel + " is missing; re-run the pipeline");
    return read_tensor(root / rel).first;
  };
  auto labels = [&](const std::string& rel) {
    const DenseMatrix m = tensor(rel);
    std::vector<int> out;
    for (float v : m.data()) out.push_back(static_cast<int>(v));
    return out;
  };
  auto copy = [&](const char* name, const std::string& rel) {
    if (!fs::exists(root / rel)) fail(ErrorCode::DependencyError, rel + " is missing; re-run the pipeline");
    write(name, slurp(root / rel));
  };

  {
    const DenseMatrix W = tensor("nnmf/W.pnmf");
    std::ostringstream o;
    o << "component,pixel,value\n";
    for (std::size_t r = 0; r < W.cols(); ++r) {
      for (std::size_t k = 0; k < W.rows(); ++k) o << r << ',' << k << ',' << num(W(k, r)) << '\n';
    }
    write("basis_components.csv", o.str());
  }
  const DenseMatrix F_train = tensor("nnmf/F_train.pnmf");
  const auto y_train = labels("ingest/y_train.pnmf");
  {
    std::ostringstream o;
    o << "sample,label,component,value\n";
    for (std::size_t n = 0; n < std::min<std::size_t>(F_train.cols(), 8); ++n) {
      for (std::size_t r = 0; r < F_train.rows(); ++r) o << n << ',' << y_train[n] << ',' << r << ',' << num(F_train(r, n)) << '\n';
    }
    write("feature_vectors.csv", o.str());
  }
  {
    std::ostringstream o;
    o << "split,sample,l2_norm\n";
    for (Split sp : kSplits) {
      const DenseMatrix F = tensor("nnmf/F_" + split_name(sp) + ".pnmf");
      for (std::size_t n = 0; n < F.cols(); ++n) {
        double s2 = 0.0;
        for (double v : F.column(n)) s2 += v * v;
        o << split_name(sp) << ',' << n << ',' << num(std::sqrt(s2)) << '\n';
      }
    }
    write("norm_histogram.csv", o.str());
  }
  {
    std::ostringstream o;
    o << "component,mean_normal,mean_tumor\n";
    for (std::size_t r = 0; r < F_train.rows(); ++r) {
      double m[2] = {0, 0};
      std::size_t c[2] = {0, 0};
      for (std::size_t n = 0; n < F_train.cols(); ++n) {
        m[y_train[n]] += F_train(r, n);
        ++c[y_train[n]];
      }
      o << r << ',' << num(c[0] ? m[0] / c[0] : 0.0) << ',' << num(c[1] ? m[1] / c[1] : 0.0) << '\n';
    }
    write("class_means.csv", o.str());
  }
  copy("ranking.csv", "rank/scores.csv");
  {
    const json sel = json::parse(slurp(root / "rank/selection.json"));
    std::ostringstream o;
    o << "component,cohens_d,neg_log10_p\n";
    for (const auto& f : sel.at("ranked")) {
      o << f.at("component").get<std::size_t>() << ',' << num(f.at("cohens_d").get<double>()) << ','
        << num(-std::log10(f.at("p_value").get<double>())) << '\n';
    }
    write("effect_significance.csv", o.str());
  }
  copy("classifier_training.csv", "classifier/train_log.csv");
  copy("denoiser_training.csv", "denoiser/train_log.csv");
  copy("nnmf_convergence.csv", "nnmf/iter_log.csv");
  {
    const json rep = json::parse(slurp(root / "report/metrics.json"));
    std::ostringstream o;
    o << "model,tp,fp,fn,tn\n";
    for (const auto& r : rep.at("rows")) {
      const auto& c = r.at("confusion");
      o << r.at("model").get<std::string>() << ',' << c.at("tp") << ',' << c.at("fp") << ',' << c.at("fn") << ','
        << c.at("tn") << '\n';
    }
    write("confusion_matrices.csv", o.str());
  }
  copy("noise_energy.csv", "diffusion/noise_energy.csv");
  {
    const DenseMatrix x0 = tensor("diffusion/example_x0.pnmf");
    const DenseMatrix xt = tensor("diffusion/example_xt.pnmf");
    std::ostringstream o;
    o << "pair,feature,x0,xt\n";
    for (std::size_t p = 0; p < std::min<std::size_t>(x0.cols(), 4); ++p) {
      for (std::size_t i = 0; i < x0.rows(); ++i) o << p << ',' << i << ',' << num(x0(i, p)) << ',' << num(xt(i, p)) << '\n';
    }
    write("diffusion_examples.csv", o.str());
  }
  copy("denoiser_errors.csv", "denoiser/errors.csv");
  copy("accuracy_comparison.csv", "report/accuracy_drop.csv");
  copy("metric_bars.csv", "report/metric_bars.csv");
  return dir;
}

}  // namespace pnmf::pipeline
