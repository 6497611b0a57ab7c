#include "gradleak/model.hpp"

#include <cmath>
#include <stdexcept>

#include "gradleak/container.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kMlpSmall: return "mlp-small";
    case Architecture::kConvSmall: return "conv-small";
    case Architecture::kConvMed: return "conv-med";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& id) {
  if (id == "mlp-small") return Architecture::kMlpSmall;
  if (id == "conv-small") return Architecture::kConvSmall;
  if (id == "conv-med") return Architecture::kConvMed;
  throw std::invalid_argument("unknown architecture id '" + id + "'");
}

nlohmann::json to_json(const ModelSpec& s) {
  return {{"arch", to_string(s.arch)},
          {"input", {s.channels, s.height, s.width}},
          {"classes", s.classes},
          {"head_bias", s.head_bias},
          {"widths", s.widths},
          {"feature_dim", s.feature_dim}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = architecture_from_string(j.at("arch").get<std::string>());
  if (j.contains("input")) {
    const auto in = j.at("input").get<std::vector<std::size_t>>();
    if (in.size() != 3) throw std::invalid_argument("model input must be [C, H, W]");
    s.channels = in[0];
    s.height = in[1];
    s.width = in[2];
  }
  s.classes = j.at("classes").get<std::size_t>();
  s.head_bias = j.value("head_bias", false);
  s.widths = j.value("widths", std::vector<std::size_t>{});
  s.feature_dim = j.value("feature_dim", std::size_t{0});
  return s;
}

std::vector<Tensor*> Model::parameter_ptrs() {
  std::vector<Tensor*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p.tensor);
  return out;
}

Tensor& Model::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
}

const Tensor& Model::parameter(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
}

void Model::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t Model::add_parameter(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor(std::move(shape))});
  return params_.size() - 1;
}

namespace {

std::vector<std::size_t> default_widths(Architecture a) {
  switch (a) {
    case Architecture::kMlpSmall: return {256, 128};
    case Architecture::kConvSmall: return {8, 16};
    case Architecture::kConvMed: return {16, 16, 32, 32};
  }
  return {};
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (auto& v : t.data) v = static_cast<float>(uniform(rng, -bound, bound));
}

}  // namespace

Model build_model(ModelSpec spec, std::uint64_t seed) {
  if (spec.classes == 0) throw std::invalid_argument("model spec: class count K must be > 0");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) {
    throw std::invalid_argument("model spec: empty input shape");
  }
  if (spec.widths.empty()) spec.widths = default_widths(spec.arch);
  const std::size_t expected_widths = spec.arch == Architecture::kConvMed ? 4 : 2;
  if (spec.widths.size() != expected_widths) {
    throw std::invalid_argument("model spec: " + to_string(spec.arch) + " takes " +
                                std::to_string(expected_widths) + " widths");
  }

  Model m;
  std::size_t c = spec.channels, h = spec.height, w = spec.width;
  std::size_t layer_index = 0;
  auto name = [&](const char* what) {
    return "extractor." + std::to_string(layer_index) + "." + what;
  };
  auto conv = [&](std::size_t out, std::size_t k, std::size_t pad) {
    if (h + 2 * pad < k || w + 2 * pad < k) {
      throw std::invalid_argument("model spec: input too small for " + to_string(spec.arch));
    }
    ConvLayer l{c, out, k, 1, pad, 0, 0};
    l.weight = m.add_parameter(name("weight"), {out, c, k, k});
    l.bias = m.add_parameter(name("bias"), {out});
    m.extractor_.emplace_back(l);
    ++layer_index;
    c = out;
    h = h + 2 * pad - k + 1;
    w = w + 2 * pad - k + 1;
  };
  auto relu = [&] {
    m.extractor_.emplace_back(ReluLayer{});
    ++layer_index;
  };
  auto pool = [&](std::size_t k) {
    if (h < k || w < k) {
      throw std::invalid_argument("model spec: input too small for " + to_string(spec.arch));
    }
    m.extractor_.emplace_back(PoolLayer{k});
    ++layer_index;
    h /= k;
    w /= k;
  };
  auto flatten = [&] {
    m.extractor_.emplace_back(FlattenLayer{});
    ++layer_index;
    c = c * h * w;
    h = w = 1;
  };
  auto linear = [&](std::size_t out) {
    LinearLayer l{c, out, 0, -1};
    l.weight = m.add_parameter(name("weight"), {c, out});
    l.bias = static_cast<std::ptrdiff_t>(m.add_parameter(name("bias"), {out}));
    m.extractor_.emplace_back(l);
    ++layer_index;
    c = out;
  };

  const auto& wd = spec.widths;
  switch (spec.arch) {
    case Architecture::kMlpSmall:
      flatten();
      linear(wd[0]);
      relu();
      linear(wd[1]);
      relu();
      break;
    case Architecture::kConvSmall:
      conv(wd[0], 3, 1);
      relu();
      pool(2);
      conv(wd[1], 3, 0);
      relu();
      pool(3);
      flatten();
      break;
    case Architecture::kConvMed:
      conv(wd[0], 3, 1);
      relu();
      conv(wd[1], 3, 1);
      relu();
      pool(2);
      conv(wd[2], 3, 1);
      relu();
      conv(wd[3], 3, 0);
      relu();
      pool(3);
      flatten();
      break;
  }
  if (spec.feature_dim != 0 && spec.feature_dim != c) {
    throw std::invalid_argument("model spec: feature_dim " + std::to_string(spec.feature_dim) +
                                " does not match architecture output " + std::to_string(c));
  }
  spec.feature_dim = c;

  m.head_ = LinearLayer{c, spec.classes, 0, -1};
  m.head_.weight = m.add_parameter("head.weight", {c, spec.classes});
  if (spec.head_bias) {
    m.head_.bias = static_cast<std::ptrdiff_t>(m.add_parameter("head.bias", {spec.classes}));
  }
  m.spec_ = std::move(spec);

  Rng rng(derive_seed(seed, "model-init"));
  for (const auto& layer : m.extractor_) {
    if (const auto* l = std::get_if<ConvLayer>(&layer)) {
      const double fan_in = static_cast<double>(l->in_channels * l->kernel * l->kernel);
      fill_uniform(m.params_[l->weight].tensor, std::sqrt(6.0 / fan_in), rng);
    } else if (const auto* l = std::get_if<LinearLayer>(&layer)) {
      fill_uniform(m.params_[l->weight].tensor,
                   std::sqrt(6.0 / static_cast<double>(l->in_features)), rng);
    }
  }
  // Head is not followed by a ReLU: unit gain.
  fill_uniform(m.params_[m.head_.weight].tensor,
               std::sqrt(3.0 / static_cast<double>(m.head_.in_features)), rng);
  return m;
}

BoundParameters bind_trainable(Graph& g, Model& model) {
  BoundParameters b;
  for (auto& p : model.parameters()) {
    p.tensor.requires_grad = true;
    b.vars.push_back(g.leaf(p.tensor));
  }
  return b;
}

BoundParameters bind_frozen(Graph& g, const Model& model) {
  BoundParameters b;
  for (const auto& p : model.parameters()) {
    b.vars.push_back(g.constant(Tensor(p.tensor.shape, p.tensor.data)));
  }
  return b;
}

Var extract_features(Graph& g, const Model& model, const BoundParameters& p, Var x,
                     ExtractorTrace* trace) {
  Var h = x;
  for (const auto& layer : model.extractor()) {
    if (trace) trace->layer_inputs.push_back(h);
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            h = g.conv2d(h, p.vars[l.weight], {l.stride, l.padding});
            h = g.add_bias(h, p.vars[l.bias]);
          } else if constexpr (std::is_same_v<L, LinearLayer>) {
            h = g.matmul(h, p.vars[l.weight]);
            if (l.bias >= 0) h = g.add_bias(h, p.vars[static_cast<std::size_t>(l.bias)]);
          } else if constexpr (std::is_same_v<L, ReluLayer>) {
            h = g.relu(h);
          } else if constexpr (std::is_same_v<L, PoolLayer>) {
            h = g.avgpool2d(h, l.kernel);
          } else {
            h = g.flatten(h);
          }
        },
        layer);
  }
  return h;
}

Var apply_head(Graph& g, const Model& model, const BoundParameters& p, Var features) {
  const auto& head = model.head();
  Var a = g.matmul(features, p.vars[head.weight]);
  if (head.bias >= 0) a = g.add_bias(a, p.vars[static_cast<std::size_t>(head.bias)]);
  return a;
}

void validate_batch(const Model& model, const Tensor& batch, std::span<const int> labels) {
  const auto& s = model.spec();
  if (batch.rank() != 4 || batch.dim(1) != s.channels || batch.dim(2) != s.height ||
      batch.dim(3) != s.width) {
    throw ShapeError("batch shape " + shape_to_string(batch.shape) +
                     " does not match model input [N x " + std::to_string(s.channels) + "x" +
                     std::to_string(s.height) + "x" + std::to_string(s.width) + "]");
  }
  if (labels.size() != batch.dim(0)) {
    throw ShapeError(std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch.dim(0)));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= s.classes) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                              std::to_string(s.classes) + ")");
    }
  }
}

ForwardTrace forward_trace(const Model& model, const Tensor& batch,
                           std::span<const int> labels) {
  validate_batch(model, batch, labels);
  Graph g;
  const auto p = bind_frozen(g, model);
  Var x = g.constant(batch);
  Var r = extract_features(g, model, p, x);
  Var a = apply_head(g, model, p, r);
  Var loss = g.softmax_cross_entropy(a, labels);
  ForwardTrace t;
  t.features = g.tensor(r);
  t.logits = g.tensor(a);
  t.probabilities = g.probabilities(loss);
  t.loss = g.scalar(loss);
  return t;
}

Tensor compute_features(const Model& model, const Tensor& batch) {
  Graph g;
  const auto p = bind_frozen(g, model);
  return g.tensor(extract_features(g, model, p, g.constant(batch)));
}

Tensor compute_logits(const Model& model, const Tensor& batch) {
  Graph g;
  const auto p = bind_frozen(g, model);
  return g.tensor(logits(g, model, p, g.constant(batch)));
}

std::vector<Tensor> parameter_gradients(const Model& model, const Tensor& batch,
                                        std::span<const int> labels) {
  validate_batch(model, batch, labels);
  Graph g;
  BoundParameters p;
  for (const auto& param : model.parameters()) {
    p.vars.push_back(g.input(Tensor(param.tensor.shape, param.tensor.data), true));
  }
  Var loss = g.softmax_cross_entropy(logits(g, model, p, g.constant(batch)), labels);
  g.backward(loss);
  std::vector<Tensor> out;
  out.reserve(p.vars.size());
  for (Var v : p.vars) {
    out.push_back(g.has_grad(v) ? g.grad_tensor(v) : Tensor(g.shape(v)));
  }
  return out;
}

std::vector<Var> parameter_gradient_graph(Graph& g, const Model& model,
                                          const BoundParameters& p, Var x,
                                          std::span<const int> labels) {
  ExtractorTrace trace;
  Var r = extract_features(g, model, p, x, &trace);
  Var a = apply_head(g, model, p, r);
  const std::size_t n = g.shape(a)[0];
  const std::size_t k = g.shape(a)[1];
  if (labels.size() != n) throw ShapeError("parameter_gradient_graph: label count");

  Tensor onehot({n, k});
  for (std::size_t i = 0; i < n; ++i) onehot.data[i * k + static_cast<std::size_t>(labels[i])] = 1.0f;
  Var d_logits = g.scale(g.sub(g.softmax(a), g.constant(std::move(onehot))),
                         1.0f / static_cast<float>(n));

  std::vector<Var> grads(model.parameters().size());
  const auto& head = model.head();
  grads[head.weight] = g.matmul(g.transpose(r), d_logits);
  if (head.bias >= 0) grads[static_cast<std::size_t>(head.bias)] = g.reduce_to_channels(d_logits);
  Var upstream = g.matmul(d_logits, g.transpose(p.vars[head.weight]));

  const auto layers = model.extractor();
  for (std::size_t idx = layers.size(); idx-- > 0;) {
    const Var in = trace.layer_inputs[idx];
    const bool need_input_grad = idx > 0;
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            const Conv2dParams cp{l.stride, l.padding};
            grads[l.weight] = g.conv2d_weight_grad(in, upstream, cp, l.kernel, l.kernel);
            grads[l.bias] = g.reduce_to_channels(upstream);
            if (need_input_grad) {
              const auto& s = g.shape(in);
              upstream = g.conv2d_transpose(upstream, p.vars[l.weight], cp, s[2], s[3]);
            }
          } else if constexpr (std::is_same_v<L, LinearLayer>) {
            grads[l.weight] = g.matmul(g.transpose(in), upstream);
            if (l.bias >= 0) grads[static_cast<std::size_t>(l.bias)] = g.reduce_to_channels(upstream);
            if (need_input_grad) upstream = g.matmul(upstream, g.transpose(p.vars[l.weight]));
          } else if constexpr (std::is_same_v<L, ReluLayer>) {
            const auto v = g.value(in);
            Tensor mask(g.shape(in));
            for (std::size_t i = 0; i < v.size(); ++i) mask.data[i] = v[i] > 0.0f ? 1.0f : 0.0f;
            upstream = g.mul(upstream, g.constant(std::move(mask)));
          } else if constexpr (std::is_same_v<L, PoolLayer>) {
            const auto& s = g.shape(in);
            upstream = g.upsample2d(upstream, l.kernel, s[2], s[3]);
          } else {
            upstream = g.reshape(upstream, g.shape(in));
          }
        },
        layers[idx]);
  }
  return grads;
}

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  Container c;
  c.magic = kCheckpointMagic;
  c.header = to_json(model.spec());
  for (const auto& p : model.parameters()) {
    c.arrays.push_back({p.name, Tensor(p.tensor.shape, p.tensor.data)});
  }
  return encode_container(c);
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Container c;
  ModelSpec spec;
  Model model;
  try {
    c = decode_container(bytes, kCheckpointMagic);
  } catch (const TruncatedError& e) {
    // Recover the spec to name the first missing parameter.
    std::string missing = "#" + std::to_string(e.arrays_read());
    try {
      const Model layout = build_model(model_spec_from_json(peek_header(bytes, kCheckpointMagic)), 0);
      if (e.arrays_read() < layout.parameters().size()) {
        missing = "'" + layout.parameters()[e.arrays_read()].name + "'";
      }
    } catch (const std::exception&) {
      // Header unreadable too; report the array index.
    }
    throw FormatError("checkpoint truncated: missing parameter " + missing);
  }
  spec = model_spec_from_json(c.header);
  model = build_model(spec, 0);
  for (auto& p : model.parameters()) {
    const Tensor* t = c.find(p.name);
    if (!t) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (t->shape != p.tensor.shape) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " +
                        shape_to_string(t->shape) + ", expected " +
                        shape_to_string(p.tensor.shape));
    }
    p.tensor.data = t->data;
  }
  if (c.arrays.size() != model.parameters().size()) {
    throw FormatError("checkpoint has " + std::to_string(c.arrays.size()) +
                      " arrays, architecture expects " +
                      std::to_string(model.parameters().size()));
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string model_hash(const Model& model) { return sha256_hex(encode_checkpoint(model)); }

}  // namespace gradleak
