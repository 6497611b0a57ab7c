#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "gradleak/container.hpp"
#include "gradleak/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
  cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", f.seed, "master seed (overrides seed)");
  cmd->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
}

gradleak::ExperimentConfig resolve(const CommonFlags& f) {
  auto c = gradleak::load_experiment(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.out.empty()) c.output_dir = f.out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient leakage from adversarially trained models in federated learning"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* dataset = app.add_subcommand("dataset", "prepare train/test datasets");
  auto* train = app.add_subcommand("train", "train the victim model");
  auto* capture = app.add_subcommand("capture", "simulate client steps and store gradient packets");
  auto* attack = app.add_subcommand("attack", "run label recovery, restoration and inversion");
  auto* evaluate = app.add_subcommand("evaluate", "score attacks against ground truth and report");
  auto* all = app.add_subcommand("run", "run every stage in order");
  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  for (auto* cmd : {dataset, train, capture, attack, evaluate, all, sweep}) add_common(cmd, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    gradleak::configure_logging();
    if (sweep->parsed()) {
      std::ifstream in(flags.config);
      if (!in) throw gradleak::MissingArtifact(flags.config);
      nlohmann::json grid;
      try {
        grid = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw gradleak::ValidationError(flags.config + ": " + e.what());
      }
      if (flags.seed) grid["base"]["seed"] = *flags.seed;
      const std::string out =
          !flags.out.empty() ? flags.out : grid.value(nlohmann::json::json_pointer("/base/output_dir"), std::string("runs/sweep"));
      gradleak::run_sweep(grid, out, flags.jobs);
      return 0;
    }
    const auto cfg = resolve(flags);
    const std::filesystem::path out = cfg.output_dir;
    if (dataset->parsed()) gradleak::run_dataset_stage(cfg, out);
    if (train->parsed()) gradleak::run_train_stage(cfg, out);
    if (capture->parsed()) gradleak::run_capture_stage(cfg, out);
    if (attack->parsed()) gradleak::run_attack_stage(cfg, out, flags.jobs);
    if (evaluate->parsed()) gradleak::run_evaluate_stage(cfg, out);
    if (all->parsed()) gradleak::run_all_stages(cfg, out, flags.jobs);
    return 0;
  } catch (const gradleak::ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}
