#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pnmf/metrics.hpp"
#include "pnmf/pipeline.hpp"
#include "pnmf/tensor_store.hpp"
#include "unit/support.hpp"

using namespace pnmf;
namespace fs = std::filesystem;

namespace {

std::string tiny_config(const std::string& work_dir, unsigned threads = 1) {
  nlohmann::json j = {
      {"work_dir", work_dir},
      {"global_seed", 7},
      {"threads", threads},
      {"ingest",
       {{"image_side", 24},
        {"counts", {{"train", {30, 30}}, {"val", {10, 10}}, {"test", {10, 10}}}},
        {"lesion_radius", {2.0, 4.0}}}},
      {"nnmf", {{"rank", 6}, {"iters", 40}}},
      {"selection", {{"M", 4}}},
      {"classifier", {{"train", {{"epochs", 10}}}}},
      {"diffusion", {{"pairs_per_sample", 2}}},
      {"denoiser", {{"train", {{"epochs", 5}}}}},
      {"defense", {{"K", 2}}},
      {"attack", {{"apgd_iters", 10}, {"square_queries", 40}}},
  };
  return j.dump();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).generic_string();
    if (rel.rfind("logs/", 0) == 0) continue;
    out[rel] = slurp(e.path());
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config parsing") {
    const auto c = pipeline::parse_config("{}", "/base");
    CHECK(c.M == 15);
    CHECK(c.nnmf.rank == 15);
    CHECK(c.T == 50);
    CHECK(c.defense.K == 8);
    CHECK(c.defense.t_pur == 10);
    CHECK(c.attack.epsilon == 0.10);
    CHECK(c.attack_mode == pipeline::AttackMode::Both);

    const auto r = pipeline::parse_config(R"({"work_dir": "runs/a"})", "/base");
    CHECK(r.work_dir == fs::path("/base/runs/a"));
    ::setenv("PNMF_WORKDIR", "/tmp/pnmf_env_wd", 1);
    CHECK(pipeline::parse_config("{}", "/base").work_dir == fs::path("/tmp/pnmf_env_wd"));
    ::unsetenv("PNMF_WORKDIR");

    CHECK_ERROR_CODE(pipeline::parse_config(R"({"bogus": 1})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config(R"({"nnmf": {"rnak": 4}})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config(R"({"selection": {"M": 20}})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config(R"({"attack": {"mode": "sideways"}})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config(R"({"defense": {"t_pur": 99}})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config(R"({"nnmf": {"rank": "five"}})"), ErrorCode::BadConfig);
    CHECK_ERROR_CODE(pipeline::parse_config("{not json"), ErrorCode::BadConfig);

    const auto t = pipeline::parse_config(tiny_config("/tmp/x"));
    const auto again = pipeline::parse_config(pipeline::config_to_json(t));
    CHECK(pipeline::config_to_json(again) == pipeline::config_to_json(t));
    CHECK(t.seed_for("nnmf") == again.seed_for("nnmf"));
    CHECK(t.seed_for("nnmf") != t.seed_for("diffusion"));
  }

  TEST_CASE("stages refuse to run on missing upstream artifacts") {
    testing::TempDir tmp("deps");
    const auto cfg = pipeline::parse_config(tiny_config((tmp / "w").string()));
    try {
      pipeline::run_stage("nnmf", cfg);
      FAIL("nnmf ran without ingest");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DependencyError);
      CHECK(std::string(e.what()).find("ingest") != std::string::npos);
    }
    CHECK_ERROR_CODE(pipeline::run_stage("attack", cfg), ErrorCode::DependencyError);
    CHECK_ERROR_CODE(pipeline::run_stage("warp-drive", cfg), ErrorCode::BadConfig);
    CHECK(pipeline::stage_names().size() == 9);
  }

  TEST_CASE("tiny run-all: outputs, reruns, tamper detection, plots, thread invariance") {
    testing::TempDir tmp("runall");
    const auto cfg = pipeline::parse_config(tiny_config((tmp / "a").string(), 1));
    const auto reports = pipeline::run_all(cfg);
    REQUIRE(reports.size() == 9);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(reports[i].stage == pipeline::stage_names()[i]);
      CHECK(reports[i].status == "ok");
      CHECK_FALSE(reports[i].outputs.empty());
    }
    const auto rows = read_csv(cfg.work_dir / "report/metrics.csv");
    REQUIRE(rows.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(rows[i][0] == metrics::kTableTags[i]);

    const auto rerun = pipeline::run_stage("rank", cfg);
    CHECK(rerun.outputs == reports[2].outputs);

    const auto plots = pipeline::emit_plots(cfg);
    for (const auto& r : read_csv(plots / "norm_histogram.csv")) CHECK(std::stod(r[2]) == doctest::Approx(1.0).epsilon(1e-5));
    double prev = -1.0;
    for (const auto& r : read_csv(plots / "noise_energy.csv")) {
      CHECK(std::stod(r[3]) > prev);
      prev = std::stod(r[3]);
    }
    for (const auto& r : read_csv(plots / "accuracy_comparison.csv"))
      CHECK(std::stod(r[3]) == doctest::Approx(std::stod(r[1]) - std::stod(r[2])).epsilon(1e-6));
    CHECK(fs::exists(plots / "basis_components.csv"));
    CHECK(fs::exists(plots / "denoiser_errors.csv"));
    CHECK(fs::exists(plots / "confusion_matrices.csv"));

    auto cfg4 = pipeline::parse_config(tiny_config((tmp / "b").string(), 4));
    pipeline::run_all(cfg4);
    pipeline::emit_plots(cfg4);
    const auto ta = tree(cfg.work_dir), tb = tree(cfg4.work_dir);
    CHECK(ta.size() == tb.size());
    for (const auto& [rel, bytes] : ta) {
      INFO(rel);
      REQUIRE(tb.count(rel) == 1);
      CHECK((tb.at(rel) == bytes));
    }

    // Replace an upstream tensor with a self-consistent but different one.
    const auto target = cfg.work_dir / "nnmf/F_train.pnmf";
    auto [F, manifest] = read_tensor(target);
    F(0, 0) += 0.5f;
    write_tensor(F, manifest, target);
    CHECK_ERROR_CODE(pipeline::run_stage("rank", cfg), ErrorCode::DependencyError);
  }
}
