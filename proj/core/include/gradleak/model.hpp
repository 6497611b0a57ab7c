#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradleak/graph.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

enum class Architecture { kMlpSmall, kConvSmall, kConvMed };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& id);

struct ModelSpec {
  Architecture arch = Architecture::kConvSmall;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t classes = 10;
  bool head_bias = false;
  // Hidden widths (linear units for mlp-small, conv channels otherwise).
  // Empty selects the architecture defaults.
  std::vector<std::size_t> widths;
  // Filled in by build(); checked against the layer stack on load.
  std::size_t feature_dim = 0;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct ConvLayer {
  std::size_t in_channels, out_channels, kernel, stride, padding;
  std::size_t weight, bias;  // parameter indices
};
struct LinearLayer {
  std::size_t in_features, out_features;
  std::size_t weight;  // [in x out]
  std::ptrdiff_t bias = -1;
};
struct ReluLayer {};
struct PoolLayer {
  std::size_t kernel;
};
struct FlattenLayer {};

using Layer = std::variant<ConvLayer, LinearLayer, ReluLayer, PoolLayer, FlattenLayer>;

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Classifier f = head(features(.)): a feature extractor ending in ReLU
// followed by a single linear head with weight W [D x K], logits = r W.
class Model {
 public:
  const ModelSpec& spec() const { return spec_; }
  std::size_t feature_dim() const { return spec_.feature_dim; }
  std::size_t num_classes() const { return spec_.classes; }
  Shape input_shape(std::size_t batch) const {
    return {batch, spec_.channels, spec_.height, spec_.width};
  }

  std::span<const Layer> extractor() const { return extractor_; }
  const LinearLayer& head() const { return head_; }

  std::span<NamedParameter> parameters() { return params_; }
  std::span<const NamedParameter> parameters() const { return params_; }
  std::vector<Tensor*> parameter_ptrs();
  Tensor& parameter(std::string_view name);
  const Tensor& parameter(std::string_view name) const;
  const Tensor& head_weight() const { return params_[head_.weight].tensor; }
  Tensor& head_weight() { return params_[head_.weight].tensor; }

  void zero_grad();

 private:
  friend Model build_model(ModelSpec spec, std::uint64_t seed);
  std::size_t add_parameter(std::string name, Shape shape);

  ModelSpec spec_;
  std::vector<Layer> extractor_;
  LinearLayer head_{};
  std::vector<NamedParameter> params_;
};

// Kaiming-uniform (fan-in) weights, zero biases. Throws on invalid specs
// (zero classes, input too small for the architecture).
Model build_model(ModelSpec spec, std::uint64_t seed);

struct BoundParameters {
  std::vector<Var> vars;
};

// Parameters as graph leaves whose gradients accumulate into the model.
BoundParameters bind_trainable(Graph& g, Model& model);
// Parameters as constants; the model is only read.
BoundParameters bind_frozen(Graph& g, const Model& model);

// Records per-layer inputs so parameter gradients can be rebuilt as graph
// operations (needed to differentiate through a gradient).
struct ExtractorTrace {
  std::vector<Var> layer_inputs;
};

Var extract_features(Graph& g, const Model& model, const BoundParameters& p, Var x,
                     ExtractorTrace* trace = nullptr);
Var apply_head(Graph& g, const Model& model, const BoundParameters& p, Var features);
inline Var logits(Graph& g, const Model& model, const BoundParameters& p, Var x) {
  return apply_head(g, model, p, extract_features(g, model, p, x));
}

struct ForwardTrace {
  Tensor features;       // [N x D]
  Tensor logits;         // [N x K]
  Tensor probabilities;  // [N x K]
  float loss = 0.0f;     // mean cross-entropy
};

ForwardTrace forward_trace(const Model& model, const Tensor& batch,
                           std::span<const int> labels);
Tensor compute_features(const Model& model, const Tensor& batch);
Tensor compute_logits(const Model& model, const Tensor& batch);

// Gradients of the batch-mean cross-entropy for every parameter, in
// parameter order. Leaves the model untouched.
std::vector<Tensor> parameter_gradients(const Model& model, const Tensor& batch,
                                        std::span<const int> labels);

// The same gradients expressed as graph nodes that depend differentiably on
// `x` (ReLU masks are treated as constants, which they are almost everywhere).
std::vector<Var> parameter_gradient_graph(Graph& g, const Model& model,
                                          const BoundParameters& p, Var x,
                                          std::span<const int> labels);

void validate_batch(const Model& model, const Tensor& batch, std::span<const int> labels);

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
// SHA-256 of the encoded checkpoint.
std::string model_hash(const Model& model);

}  // namespace gradleak
