#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradleak/attack.hpp"
#include "gradleak/data.hpp"
#include "gradleak/model.hpp"
#include "gradleak/report.hpp"
#include "gradleak/training.hpp"

namespace gradleak {

// Bad configuration or missing inputs; the CLI maps it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifact : public ValidationError {
 public:
  explicit MissingArtifact(const std::filesystem::path& path)
      : ValidationError("missing upstream artifact: " + path.string()), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | idx | cifar
  SyntheticSpec synthetic;
  std::string idx_images, idx_labels;
  std::vector<std::string> cifar_files;
  double test_fraction = 0.2;
};

struct CaptureConfig {
  std::size_t batch_size = 8;
  std::size_t anchors = 10;
  std::size_t batches_per_anchor = 5;
  bool distinct_labels = true;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";
  DatasetConfig dataset;
  ModelSpec model;
  TrainConfig train;
  CaptureConfig capture;
  AttackSettings attack;
};

// Missing fields take defaults; unknown sections are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment(const std::filesystem::path& path);
// SHA-256 of the normalized JSON form.
std::string config_hash(const ExperimentConfig& c);

// Reads GRADLEAK_LOG (error | info | debug; default info).
void configure_logging();

// Stage outputs live under <out>/<stage>/ with a manifest.json each.
void run_dataset_stage(const ExperimentConfig& c, const std::filesystem::path& out);
void run_train_stage(const ExperimentConfig& c, const std::filesystem::path& out);
void run_capture_stage(const ExperimentConfig& c, const std::filesystem::path& out);
void run_attack_stage(const ExperimentConfig& c, const std::filesystem::path& out,
                      std::size_t jobs = 1);
ConfigResult load_config_result(const ExperimentConfig& c, const std::filesystem::path& out);
void run_evaluate_stage(const ExperimentConfig& c, const std::filesystem::path& out);
void run_all_stages(const ExperimentConfig& c, const std::filesystem::path& out,
                    std::size_t jobs = 1);

// A grid file is {"base": <experiment>, "grid": {"<json pointer>": [values...]}}.
// Cells are the Cartesian product in sorted pointer order.
struct SweepCell {
  std::string name;
  nlohmann::json overrides;
  ExperimentConfig config;
};
std::vector<SweepCell> expand_sweep(const nlohmann::json& grid);
// Runs every cell into <out>/<cell name>/ and writes a combined report to
// <out>/report/. Cells run on up to `jobs` threads.
void run_sweep(const nlohmann::json& grid, const std::filesystem::path& out, std::size_t jobs = 1);

void save_attack_results(const std::vector<AnchorAttack>& results, const std::filesystem::path& path);
std::vector<AnchorAttack> load_attack_results(const std::filesystem::path& path);

}  // namespace gradleak
