#include "gradleak/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gradleak {

std::string to_string(Norm n) { return n == Norm::kL2 ? "l2" : "linf"; }

Norm norm_from_string(const std::string& s) {
  if (s == "l2") return Norm::kL2;
  if (s == "linf") return Norm::kLinf;
  throw std::invalid_argument("unknown norm '" + s + "' (expected l2 or linf)");
}

double ATConfig::effective_step_size() const {
  if (step_size > 0.0) return step_size;
  return steps ? 2.5 * epsilon / static_cast<double>(steps) : 0.0;
}

void validate(const ATConfig& cfg) {
  if (!(cfg.epsilon >= 0.0) || !std::isfinite(cfg.epsilon)) {
    throw std::invalid_argument("AT epsilon must be finite and >= 0");
  }
  if (cfg.step_size < 0.0) throw std::invalid_argument("AT step size must be >= 0");
}

nlohmann::json to_json(const ATConfig& cfg) {
  return {{"norm", to_string(cfg.norm)},
          {"epsilon", cfg.epsilon},
          {"steps", cfg.steps},
          {"step_size", cfg.step_size},
          {"random_start", cfg.random_start}};
}

ATConfig at_config_from_json(const nlohmann::json& j) {
  ATConfig cfg;
  cfg.norm = norm_from_string(j.value("norm", std::string("l2")));
  cfg.epsilon = j.value("epsilon", cfg.epsilon);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.step_size = j.value("step_size", cfg.step_size);
  cfg.random_start = j.value("random_start", cfg.random_start);
  validate(cfg);
  return cfg;
}

InputGradientFn model_input_gradient(const Model& model) {
  return [&model](const Tensor& x, std::span<const int> labels) {
    Graph g;
    const auto p = bind_frozen(g, model);
    Var in = g.input(x, true);
    Var loss = g.softmax_cross_entropy(logits(g, model, p, in), labels);
    g.backward(loss);
    return g.grad_tensor(in);
  };
}

namespace {

void project(Tensor& adv, const Tensor& clean, std::size_t per_sample, const ATConfig& cfg) {
  const auto eps = static_cast<float>(cfg.epsilon);
  const std::size_t n = adv.numel() / per_sample;
  for (std::size_t s = 0; s < n; ++s) {
    float* a = adv.data.data() + s * per_sample;
    const float* c = clean.data.data() + s * per_sample;
    if (cfg.norm == Norm::kLinf) {
      for (std::size_t i = 0; i < per_sample; ++i) a[i] = std::clamp(a[i], c[i] - eps, c[i] + eps);
    } else {
      double sq = 0.0;
      for (std::size_t i = 0; i < per_sample; ++i) sq += double(a[i] - c[i]) * (a[i] - c[i]);
      const double norm = std::sqrt(sq);
      if (norm > cfg.epsilon) {
        const double f = cfg.epsilon / norm;
        for (std::size_t i = 0; i < per_sample; ++i) {
          a[i] = c[i] + static_cast<float>((a[i] - c[i]) * f);
        }
      }
    }
    // Clipping moves every coordinate toward the clean pixel, so the ball
    // constraint survives it.
    for (std::size_t i = 0; i < per_sample; ++i) a[i] = std::clamp(a[i], 0.0f, 1.0f);
  }
}

}  // namespace

Tensor pgd_attack(const InputGradientFn& grad, const Tensor& images, std::span<const int> labels,
                  const ATConfig& cfg, Rng& rng) {
  validate(cfg);
  Tensor adv(images.shape, images.data);
  if (cfg.epsilon == 0.0 || images.numel() == 0) return adv;
  const std::size_t n = images.dim(0);
  const std::size_t per_sample = images.numel() / n;

  if (cfg.random_start) {
    for (std::size_t s = 0; s < n; ++s) {
      float* a = adv.data.data() + s * per_sample;
      if (cfg.norm == Norm::kLinf) {
        for (std::size_t i = 0; i < per_sample; ++i) {
          a[i] += static_cast<float>(uniform(rng, -cfg.epsilon, cfg.epsilon));
        }
      } else {
        std::vector<double> dir(per_sample);
        double sq = 0.0;
        for (auto& v : dir) {
          v = standard_normal(rng);
          sq += v * v;
        }
        const double radius =
            cfg.epsilon * std::pow(uniform01(rng), 1.0 / static_cast<double>(per_sample));
        const double f = radius / std::max(std::sqrt(sq), 1e-300);
        for (std::size_t i = 0; i < per_sample; ++i) a[i] += static_cast<float>(dir[i] * f);
      }
    }
    project(adv, images, per_sample, cfg);
  }

  const double alpha = cfg.effective_step_size();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Tensor g = grad(adv, labels);
    for (float v : g.data) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("pgd_attack: non-finite input gradient at step " +
                                 std::to_string(step));
      }
    }
    for (std::size_t s = 0; s < n; ++s) {
      float* a = adv.data.data() + s * per_sample;
      const float* gs = g.data.data() + s * per_sample;
      if (cfg.norm == Norm::kLinf) {
        for (std::size_t i = 0; i < per_sample; ++i) {
          const float sign = gs[i] > 0.0f ? 1.0f : (gs[i] < 0.0f ? -1.0f : 0.0f);
          a[i] += static_cast<float>(alpha) * sign;
        }
      } else {
        double sq = 0.0;
        for (std::size_t i = 0; i < per_sample; ++i) sq += double(gs[i]) * gs[i];
        const double norm = std::sqrt(sq);
        if (norm == 0.0) continue;
        const double f = alpha / norm;
        for (std::size_t i = 0; i < per_sample; ++i) a[i] += static_cast<float>(gs[i] * f);
      }
    }
    project(adv, images, per_sample, cfg);
  }
  return adv;
}

Tensor pgd_attack(const Model& model, const Tensor& images, std::span<const int> labels,
                  const ATConfig& cfg, Rng& rng) {
  validate_batch(model, images, labels);
  return pgd_attack(model_input_gradient(model), images, labels, cfg, rng);
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = {{"epochs", cfg.epochs},
                      {"batch_size", cfg.batch_size},
                      {"seed", cfg.seed},
                      {"optimizer",
                       {{"kind", to_string(cfg.optimizer.kind)},
                        {"learning_rate", cfg.optimizer.learning_rate},
                        {"momentum", cfg.optimizer.momentum},
                        {"beta1", cfg.optimizer.beta1},
                        {"beta2", cfg.optimizer.beta2},
                        {"epsilon", cfg.optimizer.epsilon}}}};
  j["at"] = cfg.at ? to_json(*cfg.at) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    cfg.optimizer.kind = optimizer_kind_from_string(o.value("kind", std::string("adam")));
    cfg.optimizer.learning_rate = o.value("learning_rate", cfg.optimizer.learning_rate);
    cfg.optimizer.momentum = o.value("momentum", cfg.optimizer.momentum);
    cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
    cfg.optimizer.epsilon = o.value("epsilon", cfg.optimizer.epsilon);
  }
  if (j.contains("at") && !j.at("at").is_null()) cfg.at = at_config_from_json(j.at("at"));
  if (cfg.batch_size == 0) throw std::invalid_argument("train batch_size must be positive");
  return cfg;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(6);
  out << "epoch,train_loss,train_acc,test_acc,robust_acc\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',';
    if (e.test_acc) out << *e.test_acc;
    out << ',';
    if (e.robust_acc) out << *e.robust_acc;
    out << '\n';
  }
  return out.str();
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data.begin() + static_cast<std::ptrdiff_t>(i * k);
    const auto best = std::max_element(row, row + static_cast<std::ptrdiff_t>(k)) - row;
    if (best == labels[i]) ++correct;
  }
  return correct;
}

}  // namespace

TrainHistory train(Model& model, const Dataset& train_set, const Dataset* test_set,
                   const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (cfg.at) validate(*cfg.at);
  if (train_set.size() > 0) {
    validate_batch(model, slice_rows(train_set.images, 0),
                   std::span<const int>(train_set.labels.data(), 1));
  }
  Optimizer opt(cfg.optimizer);
  Rng pgd_rng(derive_seed(cfg.seed, "train-pgd"));
  TrainHistory history;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "train-shuffle", epoch));
    for (std::size_t k = order.size(); k > 1; --k) {
      std::swap(order[k - 1], order[uniform_index(shuffle, k)]);
    }
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      Batch b = gather(train_set, std::span<const std::size_t>(order.data() + start, count));
      if (cfg.at) b.images = pgd_attack(model, b.images, b.labels, *cfg.at, pgd_rng);

      Graph g;
      const auto p = bind_trainable(g, model);
      Var a = logits(g, model, p, g.constant(b.images));
      Var loss = g.softmax_cross_entropy(a, b.labels);
      const double value = g.scalar(loss);
      if (!std::isfinite(value)) {
        throw TrainingDiverged("training diverged: loss " + std::to_string(value) +
                               " at epoch " + std::to_string(epoch) + ", sample offset " +
                               std::to_string(start));
      }
      g.backward(loss);
      opt.step(model.parameter_ptrs());
      loss_sum += value * static_cast<double>(count);
      correct += count_correct(g.tensor(a), b.labels);
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    const double m = static_cast<double>(std::max<std::size_t>(order.size(), 1));
    stats.train_loss = loss_sum / m;
    stats.train_acc = static_cast<double>(correct) / m;
    if (test_set && test_set->size() > 0) {
      stats.test_acc = evaluate(model, *test_set);
      if (cfg.at) stats.robust_acc = evaluate(model, *test_set, cfg.at, derive_seed(cfg.seed, "eval", epoch));
    }
    spdlog::info("epoch {}/{}: loss {:.4f} train_acc {:.4f} test_acc {}", stats.epoch, cfg.epochs,
                 stats.train_loss, stats.train_acc,
                 stats.test_acc ? std::to_string(*stats.test_acc) : std::string("n/a"));
    history.epochs.push_back(stats);
  }
  return history;
}

double evaluate(const Model& model, const Dataset& d, const std::optional<ATConfig>& at,
                std::uint64_t seed, std::size_t batch_size) {
  if (d.size() == 0) return 0.0;
  Rng rng(derive_seed(seed, "evaluate"));
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, d.size() - start);
    idx.resize(count);
    std::iota(idx.begin(), idx.end(), start);
    Batch b = gather(d, idx);
    if (at) b.images = pgd_attack(model, b.images, b.labels, *at, rng);
    correct += count_correct(compute_logits(model, b.images), b.labels);
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

}  // namespace gradleak
