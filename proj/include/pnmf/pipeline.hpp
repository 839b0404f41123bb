#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pnmf/attacks.hpp"
#include "pnmf/classifier.hpp"
#include "pnmf/defense.hpp"
#include "pnmf/denoiser.hpp"
#include "pnmf/ingest.hpp"
#include "pnmf/nnmf.hpp"

namespace pnmf::pipeline {

enum class AttackMode { Baseline, Defended, Both };
/// Independent: the attacker's EOT gradients use their own fixed draws and
/// survival is judged on the defense's draws. Shared: the attacker knows the
/// defense's draws exactly.
enum class EotSeeds { Independent, Shared };

struct PipelineConfig {
  std::filesystem::path data_dir;
  std::filesystem::path work_dir;
  std::uint64_t global_seed = 1234;
  unsigned threads = 1;
  /// Per-stream seed overrides; anything absent derives from global_seed.
  std::map<std::string, std::uint64_t> seeds;

  bool synthetic = true;
  ingest::SyntheticSpec synthetic_spec;
  std::size_t image_side = 64;
  std::map<std::string, int> class_dirs{{"normal", 0}, {"tumor", 1}};

  nnmf::FitOptions nnmf;
  nnmf::ProjectOptions projection;

  std::size_t M = 15;
  double p_max = 0.05;

  classifier::ClassifierConfig classifier;

  std::size_t T = 50;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  std::size_t pairs_per_sample = 10;
  std::size_t eval_pairs_per_sample = 2;
  std::size_t example_t = 41;

  denoiser::DenoiserConfig denoiser;
  defense::DefenseConfig defense;

  attacks::AttackConfig attack;
  AttackMode attack_mode = AttackMode::Both;
  EotSeeds eot_seeds = EotSeeds::Independent;

  std::uint64_t seed_for(std::string_view stream) const;
  void validate() const;
};

/// Parses the JSON config; unknown keys and bad values raise BadConfig.
/// A relative work_dir resolves against `base_dir`; an absent one falls back
/// to $PNMF_WORKDIR, then "work".
PipelineConfig parse_config(std::string_view json_text, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& file);
std::string config_to_json(const PipelineConfig& cfg);

struct StageReport {
  std::string stage;
  std::string status = "ok";
  double seconds = 0.0;
  std::map<std::string, std::string> inputs;   // relative path -> checksum hex
  std::map<std::string, std::string> outputs;

  std::string to_json() const;  // without timing
};

const std::vector<std::string>& stage_names();

/// Runs one stage. Upstream artifacts are verified against the producing
/// stage's report; a missing or altered artifact raises DependencyError
/// naming the stage to run first. Reports go to work_dir/reports, timings to
/// work_dir/logs.
StageReport run_stage(std::string_view name, const PipelineConfig& cfg);
std::vector<StageReport> run_all(const PipelineConfig& cfg);

/// Writes one CSV per figure family under work_dir/plots and returns that directory.
std::filesystem::path emit_plots(const PipelineConfig& cfg);

}  // namespace pnmf::pipeline
