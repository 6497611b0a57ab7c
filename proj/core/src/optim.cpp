#include "gradleak/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace gradleak {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd-momentum";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd-momentum" || name == "sgd") return OptimizerKind::kSgdMomentum;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0)) {
    throw std::invalid_argument("optimizer learning rate must be positive");
  }
}

void Optimizer::step(std::span<Tensor* const> params) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& p = *params[k];
    if (!p.grad || p.grad->size() != p.numel()) {
      throw std::logic_error("optimizer step: parameter #" + std::to_string(k) +
                             " has no gradient");
    }
  }
  if (first_.empty()) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      first_[k].assign(params[k]->numel(), 0.0f);
      if (config_.kind == OptimizerKind::kAdam) second_[k].assign(params[k]->numel(), 0.0f);
    }
  } else if (first_.size() != params.size()) {
    throw std::logic_error("optimizer step: parameter list changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (first_[k].size() != params[k]->numel()) {
      throw std::logic_error("optimizer step: parameter #" + std::to_string(k) +
                             " changed shape");
    }
  }

  ++step_;
  const float lr = static_cast<float>(config_.learning_rate);
  if (config_.kind == OptimizerKind::kAdam) {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const float c1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(step_)));
    const float c2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(step_)));
    const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
    const float eps = static_cast<float>(config_.epsilon);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const auto& g = *p.grad;
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = fb1 * m[i] + (1.0f - fb1) * g[i];
        v[i] = fb2 * v[i] + (1.0f - fb2) * g[i] * g[i];
        const float mhat = m[i] / c1;
        const float vhat = v[i] / c2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
      p.grad.reset();
    }
  } else {
    const float mu = static_cast<float>(config_.momentum);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const auto& g = *p.grad;
      auto& buf = first_[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        buf[i] = mu * buf[i] + g[i];
        p.data[i] -= lr * buf[i];
      }
      p.grad.reset();
    }
  }
}

}  // namespace gradleak
