#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradleak/attack.hpp"
#include "gradleak/fl.hpp"

namespace gradleak {

struct BatchScore {
  bool label_set_exact = false;
  bool anchor_recovered = false;
  bool duplicate_warning = false;
  std::optional<double> feature_cosine;  // restored vs true anchor feature
  std::optional<double> objective;       // anchor inversion objective
  std::optional<double> baseline_objective;
};

// Evaluation of one anchor across its B batches. Image metrics refer to the
// attacker-side best batch (lowest inversion objective); the oracle best
// batch maximizes the feature cosine and is evaluation-only.
struct AnchorMetrics {
  std::size_t anchor = 0;
  int label = 0;
  std::vector<BatchScore> batches;
  std::optional<std::size_t> oracle_batch;
  std::optional<double> best_cosine_oracle;
  std::optional<std::size_t> attacker_batch;
  std::optional<double> attacker_cosine;
  std::optional<double> objective;
  std::optional<double> psnr_target, psnr_clean, ssim_target, ssim_clean;
  std::optional<double> baseline_psnr_target, baseline_psnr_clean;
  std::optional<Tensor> reconstruction, baseline_image;
  Tensor target_image, clean_image;
};

// `records[b]` is the ground truth of `attack.batches[b]`.
AnchorMetrics score_anchor(const AnchorAttack& attack, std::span<const ClientRoundRecord> records);

struct ConfigResult {
  std::string name;
  std::vector<AnchorMetrics> anchors;
};

nlohmann::json summarize(const ConfigResult& result);

// JSON with object keys sorted, floats printed with six decimals and
// non-finite floats as the strings "inf", "-inf", "nan".
std::string dump_fixed(const nlohmann::json& j);

// summary.json, curves.csv, curves.svg and anchors/*.ppm under out_dir.
void emit_report(std::span<const ConfigResult> results, const std::filesystem::path& out_dir);

}  // namespace gradleak
