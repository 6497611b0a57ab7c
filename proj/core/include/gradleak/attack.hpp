#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/fl.hpp"
#include "gradleak/graph.hpp"
#include "gradleak/model.hpp"

namespace gradleak {

// Closed-form gradient of the batch-mean cross-entropy with respect to the
// head weight: column k = mean_i (p_ik - [k == y_i]) r_i. Returns [D x K].
Tensor analytic_head_gradient(const Tensor& probabilities, const Tensor& features,
                              std::span<const int> labels);

struct LabelRecovery {
  std::vector<int> labels;            // ascending by column minimum
  std::vector<float> column_minima;   // per class
  std::size_t negative_columns = 0;   // an estimate of N
  bool duplicate_suspected = false;   // fewer negative columns than N
};

// The N columns of the head gradient with the smallest minimum entry; ties
// go to the lower class index.
LabelRecovery recover_labels(const Tensor& head_grad, std::size_t n);

struct RestoredFeature {
  int label = 0;
  Tensor feature;     // [D], the negated column
  Tensor raw_column;  // [D]
  // The positive scale (1 - p) is not observable from the gradient.
  bool scale_unavailable = true;
};

std::vector<RestoredFeature> restore_features(const Tensor& head_grad,
                                              std::span<const int> labels);

struct InversionSettings {
  std::size_t steps = 5000;
  double learning_rate = 0.1;
  double tv_weight = 1e-6;
  std::size_t restarts = 5;
  std::uint64_t seed = 0;
  std::size_t trace_every = 100;
};

struct ReconstructionTask {
  RestoredFeature target;
  InversionSettings settings;
  // Overrides the random start of the first restart.
  std::optional<Tensor> init;
};

struct TracePoint {
  std::size_t step;
  double objective;
};

struct RestartOutcome {
  Tensor image;
  double objective = 0.0;  // at the final clipped image
  double cosine_distance = 0.0;
  std::vector<TracePoint> trace;
  std::uint64_t seed = 0;
  bool failed = false;
};

struct InversionResult {
  Tensor image;
  double objective = 0.0;
  std::size_t best_restart = 0;
  std::vector<RestartOutcome> restarts;
};

class InversionFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Maps a [1 x C x H x W] input node to a feature node.
using FeatureFn = std::function<Var(Graph&, Var)>;

FeatureFn model_features(const Model& model);

// Minimizes cosine_distance(r(z), target) + tv_weight * TV(z) with Adam,
// clipping z to [0, 1] after every step. Restarts whose features vanish are
// retried with fresh seeds; throws InversionFailed when every restart fails.
InversionResult invert_feature(const FeatureFn& features, const Shape& input_shape,
                               const ReconstructionTask& task);
InversionResult invert_feature(const Model& model, const ReconstructionTask& task);

struct BaselineResult {
  Tensor images;  // [N x C x H x W], row i reconstructs labels[i]
  double objective = 0.0;
  std::size_t best_restart = 0;
  std::vector<RestartOutcome> restarts;
};

// Optimizes a whole batch so that its parameter gradients point the same way
// as the packet's, over every parameter, plus TV.
BaselineResult baseline_gradient_matching(const Model& model, const GradientPacket& packet,
                                          std::span<const int> labels,
                                          const InversionSettings& settings,
                                          const std::optional<Tensor>& init = {});

struct AttackSettings {
  InversionSettings inversion;
  // Invert every recovered column instead of only the focus label.
  bool invert_all = false;
  bool baseline = false;
  InversionSettings baseline_settings;
};

struct BatchAttack {
  LabelRecovery recovery;
  std::vector<RestoredFeature> features;  // one per recovered label
  std::vector<int> inverted_labels;
  std::vector<InversionResult> inversions;  // parallel to inverted_labels
  std::optional<BaselineResult> baseline;
  std::vector<std::string> warnings;
  double seconds = 0.0;

  const InversionResult* inversion_for(int label) const;
  const RestoredFeature* feature_for(int label) const;
};

// Label recovery, restoration and inversion for one packet. `focus_label`
// selects the column to invert unless invert_all is set.
BatchAttack attack_packet(const Model& model, const GradientPacket& packet,
                          const AttackSettings& settings, std::optional<int> focus_label,
                          std::uint64_t seed);

struct AnchorCase {
  std::size_t anchor = 0;
  int anchor_label = 0;
  std::vector<GradientPacket> packets;
};

struct AnchorAttack {
  std::size_t anchor = 0;
  int anchor_label = 0;
  std::vector<BatchAttack> batches;
  // Attacker-side best-of-B: lowest final inversion objective among batches
  // whose labels include the anchor's; empty if none do.
  std::optional<std::size_t> best_by_objective;
};

// Anchors are processed on `jobs` threads; results are ordered by anchor
// and batch and do not depend on the thread count.
std::vector<AnchorAttack> run_attack(const Model& model, std::span<const AnchorCase> cases,
                                     const AttackSettings& settings, std::uint64_t seed,
                                     std::size_t jobs = 1);

}  // namespace gradleak
