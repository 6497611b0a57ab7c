#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Handle to a node of a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::uint32_t id = 0;
};

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kTranspose,
  kConv2d,
  kConv2dTranspose,
  kConv2dWeightGrad,
  kAdd,
  kAddBias,
  kSub,
  kMul,
  kScale,
  kRelu,
  kReshape,
  kAvgPool2d,
  kUpsample2d,
  kReduceToChannels,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kSum,
  kConcat,
  kCosineDistance,
  kTotalVariation,
};

const char* op_name(Op op);

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Thrown by cosine_distance when either operand has zero norm.
class DegenerateCosine : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Append-only record of primitive operations with reverse-mode
// differentiation. Nodes are stored in creation order, so every
// operation's inputs precede it and backward is a single reverse sweep.
//
// A graph and the tensors bound into it belong to one thread.
template <typename T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;
  BasicGraph(BasicGraph&&) noexcept = default;
  BasicGraph& operator=(BasicGraph&&) noexcept = default;

  // Binds an external tensor. When it requires grad, backward() accumulates
  // into tensor.grad; the tensor must outlive the backward call.
  Var leaf(TensorT& tensor);
  // Graph-owned leaf; its gradient is read back through grad().
  Var input(TensorT tensor, bool requires_grad);
  Var constant(TensorT tensor);

  // [M x K] . [K x N]
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  // x: NCHW, w: OIHW. Output spatial size floor((H + 2p - k) / s) + 1.
  Var conv2d(Var x, Var w, Conv2dParams params);
  // Adjoint of conv2d with respect to its input; `height`/`width` give the
  // spatial size of the conv2d input being reconstructed.
  Var conv2d_transpose(Var grad_out, Var w, Conv2dParams params,
                       std::size_t height, std::size_t width);
  // Adjoint of conv2d with respect to its kernel.
  Var conv2d_weight_grad(Var x, Var grad_out, Conv2dParams params,
                         std::size_t kernel_h, std::size_t kernel_w);
  // Same-shape elementwise sum.
  Var add(Var a, Var b);
  // a: [N x C x ...], bias: [C]; bias broadcast along axis 1.
  Var add_bias(Var a, Var bias);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var relu(Var a);
  Var reshape(Var a, Shape shape);
  // [N x ...] -> [N x rest]
  Var flatten(Var a);
  // Non-overlapping k x k average pooling; trailing rows/cols are dropped.
  Var avgpool2d(Var x, std::size_t kernel);
  // Adjoint of avgpool2d.
  Var upsample2d(Var x, std::size_t kernel, std::size_t height,
                 std::size_t width);
  // Sum over every axis except 1; adjoint of add_bias.
  Var reduce_to_channels(Var a);
  // Row-wise softmax over the last axis of a 2-D tensor.
  Var softmax(Var a);
  // Mean over rows of -log softmax(logits)[label].
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);
  Var sum(Var a);
  // Flattened concatenation.
  Var concat(std::span<const Var> parts);
  // 1 - <a, b> / (|a| |b|), both flattened.
  Var cosine_distance(Var a, Var b);
  // Isotropic TV over NCHW, forward differences with replicated border,
  // summed over channels and batch.
  Var total_variation(Var x);

  const Shape& shape(Var v) const { return node(v).shape; }
  std::span<const T> value(Var v) const { return node(v).value; }
  TensorT tensor(Var v) const;
  T scalar(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  // Row-wise probabilities saved by softmax_cross_entropy.
  TensorT probabilities(Var cross_entropy) const;

  void backward(Var loss);
  bool has_grad(Var v) const { return !node(v).grad.empty(); }
  std::span<const T> grad(Var v) const;
  TensorT grad_tensor(Var v) const;
  // Clears node gradients so backward may run again.
  void reset_gradients();

  // Sign pattern (input > 0) of every relu input, in node order. Used by the
  // finite-difference checker to detect kink crossings.
  std::vector<bool> relu_pattern() const;

  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return node(v).op; }
  std::span<const std::uint32_t> inputs(Var v) const { return node(v).inputs; }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::uint32_t> inputs;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    TensorT* sink = nullptr;
    Conv2dParams conv;
    std::size_t kernel = 0;
    T factor = T{0};
    std::vector<int> labels;
    std::vector<T> saved;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Node n);
  bool any_requires_grad(std::initializer_list<Var> vars) const;
  void backprop(std::uint32_t id);
  std::vector<T>& grad_buffer(std::uint32_t id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

using Graph = BasicGraph<float>;
using Graph64 = BasicGraph<double>;

extern template class BasicGraph<float>;
extern template class BasicGraph<double>;

}  // namespace gradleak
