// pnmf <stage> --config <file> [--seed N] [--threads N]
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pnmf/error.hpp"
#include "pnmf/ingest.hpp"
#include "pnmf/pipeline.hpp"

namespace {

constexpr int kValidationExit = 2;
constexpr int kDependencyExit = 3;

int exit_code_for(pnmf::ErrorCode code) {
  using pnmf::ErrorCode;
  switch (code) {
    case ErrorCode::DependencyError: return kDependencyExit;
    case ErrorCode::BadConfig:
    case ErrorCode::ParseError:
    case ErrorCode::ShapeError:
    case ErrorCode::EmptyClass:
      return kValidationExit;
    default: return 1;
  }
}

void print_report(const pnmf::pipeline::StageReport& r) {
  std::printf("%-17s %-4s %8.2fs  %zu outputs\n", r.stage.c_str(), r.status.c_str(), r.seconds, r.outputs.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NNMF feature pipeline with diffusion purification and adversarial evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "pipeline JSON config")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed override");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  };

  std::vector<CLI::App*> stage_cmds;
  for (const auto& name : pnmf::pipeline::stage_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    add_common(sub);
    stage_cmds.push_back(sub);
  }
  auto* run_all = app.add_subcommand("run-all", "run every stage in order and emit plot data");
  add_common(run_all);
  auto* plots = app.add_subcommand("emit-plots", "write plot CSVs from completed stages");
  add_common(plots);

  std::string annotations, images, out_dir, split = "train";
  std::vector<std::string> category_map;
  auto* coco = app.add_subcommand("coco-reorganize", "sort a COCO-annotated split into class folders");
  coco->add_option("--annotations", annotations, "COCO annotation JSON")->required()->check(CLI::ExistingFile);
  coco->add_option("--images", images, "image directory")->required()->check(CLI::ExistingDirectory);
  coco->add_option("--out", out_dir, "output root")->required();
  coco->add_option("--split", split, "split name (train, val/valid, test)");
  coco->add_option("--map", category_map, "category=class pairs (class is normal or tumor)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kValidationExit;
  }

  try {
    if (coco->parsed()) {
      std::map<std::string, std::string> mapping{{"normal", "normal"}, {"tumor", "tumor"}};
      if (!category_map.empty()) mapping.clear();
      for (const auto& kv : category_map) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) pnmf::fail(pnmf::ErrorCode::BadConfig, "--map expects category=class, got " + kv);
        mapping[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      const auto summary = pnmf::ingest::reorganize_coco(annotations, images, out_dir, split, mapping);
      for (const auto& [cls, n] : summary.counts) std::printf("%-8s %zu\n", cls.c_str(), n);
      for (const auto& s : summary.skipped) std::fprintf(stderr, "skipped: %s\n", s.c_str());
      return 0;
    }

    auto cfg = pnmf::pipeline::load_config(config_path);
    if (seed) cfg.global_seed = *seed;
    if (threads) cfg.threads = *threads;
    cfg.validate();

    if (run_all->parsed()) {
      for (const auto& r : pnmf::pipeline::run_all(cfg)) print_report(r);
      std::printf("plots: %s\n", (cfg.work_dir / "plots").string().c_str());
      return 0;
    }
    if (plots->parsed()) {
      std::printf("%s\n", pnmf::pipeline::emit_plots(cfg).string().c_str());
      return 0;
    }
    for (auto* sub : stage_cmds) {
      if (sub->parsed()) print_report(pnmf::pipeline::run_stage(sub->get_name(), cfg));
    }
    return 0;
  } catch (const pnmf::Error& e) {
    std::fprintf(stderr, "pnmf: %s: %s\n", std::string(pnmf::to_string(e.code())).c_str(), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pnmf: %s\n", e.what());
    return 1;
  }
}
