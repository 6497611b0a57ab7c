#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

enum class OptimizerKind { kSgdMomentum, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 0.1;
  double momentum = 0.9;  // sgd-momentum only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam (bias-corrected) or heavy-ball SGD. Moment buffers are created on the
// first step and bound to the parameter shapes seen then.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  // Applies one update to every tensor and clears its grad.
  // Throws std::logic_error if any tensor has no grad.
  void step(std::span<Tensor* const> params);
  void step(Tensor& param) {
    Tensor* p = &param;
    step(std::span<Tensor* const>(&p, 1));
  }

  std::uint64_t steps_taken() const { return step_; }
  const OptimizerConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  OptimizerConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> first_;
  std::vector<std::vector<float>> second_;
};

}  // namespace gradleak
