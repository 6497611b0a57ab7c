#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradleak/data.hpp"
#include "gradleak/model.hpp"
#include "gradleak/optim.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

enum class Norm { kL2, kLinf };

std::string to_string(Norm n);
Norm norm_from_string(const std::string& s);

struct ATConfig {
  Norm norm = Norm::kL2;
  double epsilon = 1.0;  // pixel units, images in [0, 1]
  std::size_t steps = 10;
  double step_size = 0.0;  // 0 selects 2.5 * epsilon / steps
  bool random_start = true;

  double effective_step_size() const;
};

void validate(const ATConfig& cfg);
nlohmann::json to_json(const ATConfig& cfg);
ATConfig at_config_from_json(const nlohmann::json& j);

// Returns d(mean loss)/dx for a batch, [N x ...] like x.
using InputGradientFn = std::function<Tensor(const Tensor& x, std::span<const int> labels)>;

InputGradientFn model_input_gradient(const Model& model);

// Projected gradient ascent on the cross-entropy inside the epsilon ball
// (per-sample l2 over all pixels, or elementwise l-inf), clipped to [0, 1].
// Throws std::runtime_error on non-finite gradients.
Tensor pgd_attack(const InputGradientFn& grad, const Tensor& images, std::span<const int> labels,
                  const ATConfig& cfg, Rng& rng);
Tensor pgd_attack(const Model& model, const Tensor& images, std::span<const int> labels,
                  const ATConfig& cfg, Rng& rng);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer{OptimizerKind::kAdam, 3e-3};
  std::optional<ATConfig> at;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
  std::optional<double> robust_acc;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  // epoch,train_loss,train_acc,test_acc,robust_acc (empty cells when absent)
  std::string to_csv() const;
};

// With cfg.at set every gradient step uses PGD examples crafted against the
// current parameters. Throws TrainingDiverged if the loss becomes non-finite.
TrainHistory train(Model& model, const Dataset& train_set, const Dataset* test_set,
                   const TrainConfig& cfg);

// Fraction of correct argmax predictions, under PGD when `at` is given.
double evaluate(const Model& model, const Dataset& d, const std::optional<ATConfig>& at = {},
                std::uint64_t seed = 0, std::size_t batch_size = 256);

}  // namespace gradleak
