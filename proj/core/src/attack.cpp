#include "gradleak/attack.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include "gradleak/optim.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

Tensor analytic_head_gradient(const Tensor& probabilities, const Tensor& features,
                              std::span<const int> labels) {
  if (probabilities.rank() != 2 || features.rank() != 2 ||
      probabilities.dim(0) != features.dim(0) || labels.size() != features.dim(0)) {
    throw ShapeError("analytic_head_gradient: expected p [N x K], r [N x D], N labels; got " +
                     shape_to_string(probabilities.shape) + ", " +
                     shape_to_string(features.shape) + ", " + std::to_string(labels.size()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1), k = probabilities.dim(1);
  std::vector<double> acc(d * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("analytic_head_gradient: label " + std::to_string(labels[i]));
    }
    for (std::size_t c = 0; c < k; ++c) {
      const double coef = probabilities.data[i * k + c] - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0);
      for (std::size_t j = 0; j < d; ++j) acc[j * k + c] += coef * features.data[i * d + j];
    }
  }
  Tensor out({d, k});
  for (std::size_t i = 0; i < acc.size(); ++i) {
    out.data[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  }
  return out;
}

LabelRecovery recover_labels(const Tensor& head_grad, std::size_t n) {
  if (head_grad.rank() != 2) throw ShapeError("recover_labels: head gradient must be [D x K]");
  const std::size_t d = head_grad.dim(0), k = head_grad.dim(1);
  if (n > k) {
    throw std::invalid_argument("recover_labels: N=" + std::to_string(n) +
                                " exceeds class count " + std::to_string(k));
  }
  LabelRecovery out;
  out.column_minima.assign(k, std::numeric_limits<float>::infinity());
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t c = 0; c < k; ++c) {
      out.column_minima[c] = std::min(out.column_minima[c], head_grad.data[j * k + c]);
    }
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return out.column_minima[static_cast<std::size_t>(a)] <
           out.column_minima[static_cast<std::size_t>(b)];
  });
  out.labels.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  out.negative_columns = static_cast<std::size_t>(
      std::count_if(out.column_minima.begin(), out.column_minima.end(),
                    [](float m) { return m < 0.0f; }));
  out.duplicate_suspected = out.negative_columns < n;
  return out;
}

std::vector<RestoredFeature> restore_features(const Tensor& head_grad,
                                              std::span<const int> labels) {
  if (head_grad.rank() != 2) throw ShapeError("restore_features: head gradient must be [D x K]");
  const std::size_t d = head_grad.dim(0), k = head_grad.dim(1);
  std::vector<RestoredFeature> out;
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("restore_features: label " + std::to_string(y));
    }
    RestoredFeature f;
    f.label = y;
    f.raw_column = Tensor({d});
    f.feature = Tensor({d});
    for (std::size_t j = 0; j < d; ++j) {
      f.raw_column.data[j] = head_grad.data[j * k + static_cast<std::size_t>(y)];
      f.feature.data[j] = -f.raw_column.data[j];
    }
    out.push_back(std::move(f));
  }
  return out;
}

FeatureFn model_features(const Model& model) {
  return [&model](Graph& g, Var x) {
    const auto p = bind_frozen(g, model);
    return extract_features(g, model, p, x);
  };
}

namespace {

void clip_unit(Tensor& z) {
  for (auto& v : z.data) v = std::clamp(v, 0.0f, 1.0f);
}

Tensor uniform_image(const Shape& shape, Rng& rng) {
  Tensor z(shape);
  for (auto& v : z.data) v = static_cast<float>(uniform01(rng));
  return z;
}

// Adam with box clipping on a single image tensor, shared by both attacks.
// `objective` builds the scalar loss for the current z.
template <typename Objective>
RestartOutcome optimize_box(Tensor z, const InversionSettings& s, const Objective& objective) {
  RestartOutcome out;
  OptimizerConfig oc;
  oc.kind = OptimizerKind::kAdam;
  oc.learning_rate = s.learning_rate;
  Optimizer opt(oc);
  z.requires_grad = true;
  for (std::size_t step = 0; step < s.steps; ++step) {
    Graph g;
    Var zv = g.leaf(z);
    auto [obj, cos] = objective(g, zv);
    if (s.trace_every && step % s.trace_every == 0) out.trace.push_back({step, g.scalar(obj)});
    g.backward(obj);
    opt.step(z);
    clip_unit(z);
  }
  Graph g;
  auto [obj, cos] = objective(g, g.constant(z));
  out.objective = g.scalar(obj);
  out.cosine_distance = g.scalar(cos);
  out.trace.push_back({s.steps, out.objective});
  z.requires_grad = false;
  z.grad.reset();
  out.image = std::move(z);
  return out;
}

// Runs restarts, retrying a restart with fresh seeds when the cosine is
// undefined. Returns outcomes and the index of the lowest objective.
template <typename Objective>
std::pair<std::vector<RestartOutcome>, std::size_t> run_restarts(
    const Shape& shape, const InversionSettings& s, const std::optional<Tensor>& init,
    const Objective& objective, const char* what) {
  if (s.restarts == 0) throw std::invalid_argument(std::string(what) + ": restarts must be >= 1");
  if (s.steps == 0) throw std::invalid_argument(std::string(what) + ": steps must be >= 1");
  constexpr std::size_t kAttempts = 3;
  std::vector<RestartOutcome> outcomes;
  std::optional<std::size_t> best;
  for (std::size_t r = 0; r < s.restarts; ++r) {
    RestartOutcome outcome;
    outcome.failed = true;
    for (std::size_t attempt = 0; attempt < kAttempts && outcome.failed; ++attempt) {
      const std::uint64_t seed = derive_seed(s.seed, "restart", r + attempt * s.restarts);
      Rng rng(seed);
      Tensor z = (r == 0 && attempt == 0 && init) ? Tensor(init->shape, init->data)
                                                  : uniform_image(shape, rng);
      if (z.shape != shape) {
        throw ShapeError(std::string(what) + ": init shape " + shape_to_string(z.shape) +
                         " != " + shape_to_string(shape));
      }
      try {
        outcome = optimize_box(std::move(z), s, objective);
        outcome.seed = seed;
      } catch (const DegenerateCosine&) {
        spdlog::debug("{}: restart {} attempt {} hit a zero feature, reseeding", what, r, attempt);
        outcome = RestartOutcome{};
        outcome.failed = true;
        outcome.seed = seed;
      }
    }
    if (!outcome.failed && (!best || outcome.objective < outcomes[*best].objective)) best = r;
    outcomes.push_back(std::move(outcome));
  }
  if (!best) {
    throw InversionFailed(std::string(what) +
                          ": every restart produced an all-zero feature (cosine undefined)");
  }
  return {std::move(outcomes), *best};
}

}  // namespace

InversionResult invert_feature(const FeatureFn& features, const Shape& input_shape,
                               const ReconstructionTask& task) {
  const Tensor& target = task.target.feature;
  const float tv = static_cast<float>(task.settings.tv_weight);
  auto objective = [&](Graph& g, Var z) {
    Var cos = g.cosine_distance(features(g, z), g.constant(target));
    return std::pair{g.add(cos, g.scale(g.total_variation(z), tv)), cos};
  };
  auto [outcomes, best] =
      run_restarts(input_shape, task.settings, task.init, objective, "invert_feature");
  InversionResult r;
  r.best_restart = best;
  r.objective = outcomes[best].objective;
  r.image = outcomes[best].image;
  r.restarts = std::move(outcomes);
  return r;
}

InversionResult invert_feature(const Model& model, const ReconstructionTask& task) {
  if (task.target.feature.numel() != model.feature_dim()) {
    throw ShapeError("invert_feature: target has " + std::to_string(task.target.feature.numel()) +
                     " entries, model features are " + std::to_string(model.feature_dim()));
  }
  return invert_feature(model_features(model), model.input_shape(1), task);
}

BaselineResult baseline_gradient_matching(const Model& model, const GradientPacket& packet,
                                          std::span<const int> labels,
                                          const InversionSettings& settings,
                                          const std::optional<Tensor>& init) {
  check_packet_matches(packet, model);
  if (labels.empty()) throw std::invalid_argument("baseline_gradient_matching: no labels");
  std::vector<float> flat;
  for (const auto& g : packet.gradients) {
    flat.insert(flat.end(), g.tensor.data.begin(), g.tensor.data.end());
  }
  const std::size_t length = flat.size();
  const Tensor target({length}, std::move(flat));
  const float tv = static_cast<float>(settings.tv_weight);
  auto objective = [&](Graph& g, Var z) {
    const auto p = bind_frozen(g, model);
    const auto grads = parameter_gradient_graph(g, model, p, z, labels);
    Var cos = g.cosine_distance(g.concat(grads), g.constant(target));
    return std::pair{g.add(cos, g.scale(g.total_variation(z), tv)), cos};
  };
  auto [outcomes, best] = run_restarts(model.input_shape(labels.size()), settings, init,
                                       objective, "baseline_gradient_matching");
  BaselineResult r;
  r.best_restart = best;
  r.objective = outcomes[best].objective;
  r.images = outcomes[best].image;
  r.restarts = std::move(outcomes);
  return r;
}

const InversionResult* BatchAttack::inversion_for(int label) const {
  for (std::size_t i = 0; i < inverted_labels.size(); ++i)
    if (inverted_labels[i] == label) return &inversions[i];
  return nullptr;
}

const RestoredFeature* BatchAttack::feature_for(int label) const {
  for (const auto& f : features)
    if (f.label == label) return &f;
  return nullptr;
}

BatchAttack attack_packet(const Model& model, const GradientPacket& packet,
                          const AttackSettings& settings, std::optional<int> focus_label,
                          std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  check_packet_matches(packet, model);
  if (!packet.batch_size_disclosed) {
    throw std::invalid_argument("attack_packet: packet does not disclose the batch size");
  }
  BatchAttack out;
  out.recovery = recover_labels(packet.head_gradient(), packet.batch_size);
  if (out.recovery.duplicate_suspected) {
    out.warnings.push_back("only " + std::to_string(out.recovery.negative_columns) +
                           " columns have a negative minimum for N=" +
                           std::to_string(packet.batch_size) +
                           "; the batch may contain duplicate labels");
    spdlog::warn("{}", out.warnings.back());
  }
  // Duplicates collapse onto one column, so only negative columns are attacked
  // when fewer than N are found.
  std::vector<int> attacked = out.recovery.labels;
  if (out.recovery.duplicate_suspected) {
    attacked.resize(std::max<std::size_t>(out.recovery.negative_columns, 1));
  }
  out.features = restore_features(packet.head_gradient(), attacked);

  for (std::size_t i = 0; i < out.features.size(); ++i) {
    const int y = out.features[i].label;
    if (!settings.invert_all && focus_label && y != *focus_label) continue;
    ReconstructionTask task{out.features[i], settings.inversion, std::nullopt};
    task.settings.seed = derive_seed(seed, "invert", static_cast<std::uint64_t>(y));
    out.inverted_labels.push_back(y);
    out.inversions.push_back(invert_feature(model, task));
  }
  if (focus_label && !out.feature_for(*focus_label)) {
    out.warnings.push_back("label " + std::to_string(*focus_label) + " was not recovered");
  }
  if (settings.baseline) {
    InversionSettings bs = settings.baseline_settings;
    bs.seed = derive_seed(seed, "baseline");
    out.baseline = baseline_gradient_matching(model, packet, out.recovery.labels, bs);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::vector<AnchorAttack> run_attack(const Model& model, std::span<const AnchorCase> cases,
                                     const AttackSettings& settings, std::uint64_t seed,
                                     std::size_t jobs) {
  std::vector<AnchorAttack> results(cases.size());
  auto work = [&](std::size_t a) {
    const auto& c = cases[a];
    AnchorAttack& res = results[a];
    res.anchor = c.anchor;
    res.anchor_label = c.anchor_label;
    for (std::size_t b = 0; b < c.packets.size(); ++b) {
      res.batches.push_back(attack_packet(model, c.packets[b], settings, c.anchor_label,
                                          derive_seed(seed, "anchor-batch",
                                                      a * c.packets.size() + b)));
      const auto* inv = res.batches.back().inversion_for(c.anchor_label);
      if (inv && (!res.best_by_objective ||
                  inv->objective <
                      res.batches[*res.best_by_objective].inversion_for(c.anchor_label)->objective)) {
        res.best_by_objective = b;
      }
    }
    spdlog::info("anchor {} ({}/{}) attacked", c.anchor, a + 1, cases.size());
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, cases.size()));
  if (jobs == 1) {
    for (std::size_t a = 0; a < cases.size(); ++a) work(a);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cases.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t a; (a = next.fetch_add(1)) < cases.size();) {
        try {
          work(a);
        } catch (...) {
          errors[a] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace gradleak
