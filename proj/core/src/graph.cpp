#include "gradleak/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kernels.hpp"

namespace gradleak {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kConv2d: return "conv2d";
    case Op::kConv2dTranspose: return "conv2d_transpose";
    case Op::kConv2dWeightGrad: return "conv2d_weight_grad";
    case Op::kAdd: return "add";
    case Op::kAddBias: return "add_bias";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kRelu: return "relu";
    case Op::kReshape: return "reshape";
    case Op::kAvgPool2d: return "avgpool2d";
    case Op::kUpsample2d: return "upsample2d";
    case Op::kReduceToChannels: return "reduce_to_channels";
    case Op::kSoftmax: return "softmax";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kSum: return "sum";
    case Op::kConcat: return "concat";
    case Op::kCosineDistance: return "cosine_distance";
    case Op::kTotalVariation: return "total_variation";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(Op op, const Shape& a, const Shape& b,
                             const std::string& what = {}) {
  std::string msg = std::string(op_name(op)) + ": shape mismatch " +
                    shape_to_string(a) + " vs " + shape_to_string(b);
  if (!what.empty()) msg += " (" + what + ")";
  throw ShapeError(msg);
}

void require_rank(Op op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op_name(op)) + ": expected rank " +
                     std::to_string(rank) + ", got " + shape_to_string(s));
  }
}

kernels::ConvGeometry conv_geometry(const Shape& x, const Shape& w,
                                    std::size_t out_h, std::size_t out_w,
                                    Conv2dParams p) {
  return {x[0], x[1], x[2], x[3], w[0], w[2], w[3], out_h, out_w, p.stride,
          p.padding};
}

template <typename T>
void add_into(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void tv_term(T dx, T dy, T& t) {
  t = std::sqrt(dx * dx + dy * dy + static_cast<T>(1e-8));
}

}  // namespace

template <typename T>
auto BasicGraph<T>::node(Var v) const -> const Node& {
  if (v.id >= nodes_.size()) throw GraphError("Var does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
auto BasicGraph<T>::node(Var v) -> Node& {
  if (v.id >= nodes_.size()) throw GraphError("Var does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
Var BasicGraph<T>::push(Node n) {
  if (backward_done_) {
    throw GraphError("cannot extend a graph after backward(); reset first");
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
bool BasicGraph<T>::any_requires_grad(std::initializer_list<Var> vars) const {
  return std::any_of(vars.begin(), vars.end(),
                     [&](Var v) { return node(v).requires_grad; });
}

template <typename T>
Var BasicGraph<T>::leaf(TensorT& tensor) {
  if (tensor.data.size() != shape_numel(tensor.shape)) {
    throw ShapeError("leaf: data length does not match shape " +
                     shape_to_string(tensor.shape));
  }
  Node n;
  n.op = Op::kLeaf;
  n.shape = tensor.shape;
  n.value = tensor.data;
  n.requires_grad = tensor.requires_grad;
  n.sink = tensor.requires_grad ? &tensor : nullptr;
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::input(TensorT tensor, bool requires_grad) {
  if (tensor.data.size() != shape_numel(tensor.shape)) {
    throw ShapeError("input: data length does not match shape " +
                     shape_to_string(tensor.shape));
  }
  Node n;
  n.op = Op::kLeaf;
  n.shape = std::move(tensor.shape);
  n.value = std::move(tensor.data);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::constant(TensorT tensor) {
  Var v = input(std::move(tensor), false);
  nodes_[v.id].op = Op::kConstant;
  return v;
}

template <typename T>
Var BasicGraph<T>::matmul(Var a, Var b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  require_rank(Op::kMatmul, sa, 2);
  require_rank(Op::kMatmul, sb, 2);
  if (sa[1] != sb[0]) shape_fail(Op::kMatmul, sa, sb, "inner dimensions");
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  n.shape = {sa[0], sb[1]};
  n.value.assign(sa[0] * sb[1], T{0});
  kernels::matmul(sa[0], sa[1], sb[1], node(a).value.data(),
                  node(b).value.data(), n.value.data());
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::transpose(Var a) {
  const auto& sa = shape(a);
  require_rank(Op::kTranspose, sa, 2);
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a.id};
  n.shape = {sa[1], sa[0]};
  n.value.resize(sa[0] * sa[1]);
  const auto& av = node(a).value;
  for (std::size_t i = 0; i < sa[0]; ++i)
    for (std::size_t j = 0; j < sa[1]; ++j) n.value[j * sa[0] + i] = av[i * sa[1] + j];
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::conv2d(Var x, Var w, Conv2dParams params) {
  const auto& sx = shape(x);
  const auto& sw = shape(w);
  require_rank(Op::kConv2d, sx, 4);
  require_rank(Op::kConv2d, sw, 4);
  if (sx[1] != sw[1]) shape_fail(Op::kConv2d, sx, sw, "input channels");
  if (params.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (sx[2] + 2 * params.padding < sw[2] || sx[3] + 2 * params.padding < sw[3]) {
    shape_fail(Op::kConv2d, sx, sw, "kernel larger than padded input");
  }
  const std::size_t oh = kernels::conv_out_extent(sx[2], sw[2], params.stride, params.padding);
  const std::size_t ow = kernels::conv_out_extent(sx[3], sw[3], params.stride, params.padding);
  Node n;
  n.op = Op::kConv2d;
  n.inputs = {x.id, w.id};
  n.shape = {sx[0], sw[0], oh, ow};
  n.conv = params;
  n.value.assign(shape_numel(n.shape), T{0});
  kernels::conv2d(conv_geometry(sx, sw, oh, ow, params), node(x).value.data(),
                  node(w).value.data(), n.value.data());
  n.requires_grad = any_requires_grad({x, w});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::conv2d_transpose(Var grad_out, Var w, Conv2dParams params,
                                    std::size_t height, std::size_t width) {
  const auto& sg = shape(grad_out);
  const auto& sw = shape(w);
  require_rank(Op::kConv2dTranspose, sg, 4);
  require_rank(Op::kConv2dTranspose, sw, 4);
  if (sg[1] != sw[0]) shape_fail(Op::kConv2dTranspose, sg, sw, "output channels");
  if (params.stride == 0) throw ShapeError("conv2d_transpose: stride must be positive");
  if (height + 2 * params.padding < sw[2] || width + 2 * params.padding < sw[3] ||
      kernels::conv_out_extent(height, sw[2], params.stride, params.padding) != sg[2] ||
      kernels::conv_out_extent(width, sw[3], params.stride, params.padding) != sg[3]) {
    shape_fail(Op::kConv2dTranspose, sg, sw, "target spatial size inconsistent");
  }
  Node n;
  n.op = Op::kConv2dTranspose;
  n.inputs = {grad_out.id, w.id};
  n.shape = {sg[0], sw[1], height, width};
  n.conv = params;
  n.value.assign(shape_numel(n.shape), T{0});
  kernels::conv2d_transpose(conv_geometry(n.shape, sw, sg[2], sg[3], params),
                            node(grad_out).value.data(), node(w).value.data(),
                            n.value.data());
  n.requires_grad = any_requires_grad({grad_out, w});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::conv2d_weight_grad(Var x, Var grad_out, Conv2dParams params,
                                      std::size_t kernel_h, std::size_t kernel_w) {
  const auto& sx = shape(x);
  const auto& sg = shape(grad_out);
  require_rank(Op::kConv2dWeightGrad, sx, 4);
  require_rank(Op::kConv2dWeightGrad, sg, 4);
  if (sx[0] != sg[0]) shape_fail(Op::kConv2dWeightGrad, sx, sg, "batch");
  if (params.stride == 0) throw ShapeError("conv2d_weight_grad: stride must be positive");
  if (sx[2] + 2 * params.padding < kernel_h || sx[3] + 2 * params.padding < kernel_w ||
      kernels::conv_out_extent(sx[2], kernel_h, params.stride, params.padding) != sg[2] ||
      kernels::conv_out_extent(sx[3], kernel_w, params.stride, params.padding) != sg[3]) {
    shape_fail(Op::kConv2dWeightGrad, sx, sg, "kernel size inconsistent");
  }
  Node n;
  n.op = Op::kConv2dWeightGrad;
  n.inputs = {x.id, grad_out.id};
  n.shape = {sg[1], sx[1], kernel_h, kernel_w};
  n.conv = params;
  n.value.assign(shape_numel(n.shape), T{0});
  kernels::conv2d_weight_grad(conv_geometry(sx, n.shape, sg[2], sg[3], params),
                              node(x).value.data(), node(grad_out).value.data(),
                              n.value.data());
  n.requires_grad = any_requires_grad({x, grad_out});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::add(Var a, Var b) {
  if (shape(a) != shape(b)) shape_fail(Op::kAdd, shape(a), shape(b));
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.shape = shape(a);
  n.value = node(a).value;
  add_into<T>(n.value, node(b).value);
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::add_bias(Var a, Var bias) {
  const auto& sa = shape(a);
  const auto& sb = shape(bias);
  if (sa.size() < 2 || sb.size() != 1 || sb[0] != sa[1]) {
    shape_fail(Op::kAddBias, sa, sb, "bias must be [C] for input [N x C x ...]");
  }
  Node n;
  n.op = Op::kAddBias;
  n.inputs = {a.id, bias.id};
  n.shape = sa;
  n.value = node(a).value;
  const std::size_t inner = shape_numel(sa) / (sa[0] * sa[1]);
  const auto& bv = node(bias).value;
  for (std::size_t i = 0; i < sa[0]; ++i)
    for (std::size_t c = 0; c < sa[1]; ++c) {
      T* p = n.value.data() + (i * sa[1] + c) * inner;
      for (std::size_t k = 0; k < inner; ++k) p[k] += bv[c];
    }
  n.requires_grad = any_requires_grad({a, bias});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::sub(Var a, Var b) {
  if (shape(a) != shape(b)) shape_fail(Op::kSub, shape(a), shape(b));
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.shape = shape(a);
  n.value = node(a).value;
  const auto& bv = node(b).value;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] -= bv[i];
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::mul(Var a, Var b) {
  if (shape(a) != shape(b)) shape_fail(Op::kMul, shape(a), shape(b));
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.id, b.id};
  n.shape = shape(a);
  n.value = node(a).value;
  const auto& bv = node(b).value;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= bv[i];
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::scale(Var a, T factor) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id};
  n.shape = shape(a);
  n.factor = factor;
  n.value = node(a).value;
  for (auto& v : n.value) v *= factor;
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::relu(Var a) {
  Node n;
  n.op = Op::kRelu;
  n.inputs = {a.id};
  n.shape = shape(a);
  n.value = node(a).value;
  for (auto& v : n.value) v = v > T{0} ? v : T{0};
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::reshape(Var a, Shape new_shape) {
  if (shape_numel(new_shape) != shape_numel(shape(a))) {
    shape_fail(Op::kReshape, shape(a), new_shape, "element count");
  }
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a.id};
  n.shape = std::move(new_shape);
  n.value = node(a).value;
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::flatten(Var a) {
  const auto& sa = shape(a);
  if (sa.empty()) throw ShapeError("flatten: scalar input");
  return reshape(a, {sa[0], shape_numel(sa) / std::max<std::size_t>(sa[0], 1)});
}

template <typename T>
Var BasicGraph<T>::avgpool2d(Var x, std::size_t kernel) {
  const auto& sx = shape(x);
  require_rank(Op::kAvgPool2d, sx, 4);
  if (kernel == 0 || sx[2] < kernel || sx[3] < kernel) {
    throw ShapeError("avgpool2d: kernel " + std::to_string(kernel) +
                     " does not fit input " + shape_to_string(sx));
  }
  Node n;
  n.op = Op::kAvgPool2d;
  n.inputs = {x.id};
  n.kernel = kernel;
  n.shape = {sx[0], sx[1], sx[2] / kernel, sx[3] / kernel};
  n.value.assign(shape_numel(n.shape), T{0});
  kernels::avgpool2d(sx[0] * sx[1], sx[2], sx[3], kernel, node(x).value.data(),
                     n.value.data());
  n.requires_grad = any_requires_grad({x});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::upsample2d(Var x, std::size_t kernel, std::size_t height,
                              std::size_t width) {
  const auto& sx = shape(x);
  require_rank(Op::kUpsample2d, sx, 4);
  if (kernel == 0 || height / kernel != sx[2] || width / kernel != sx[3]) {
    throw ShapeError("upsample2d: input " + shape_to_string(sx) +
                     " inconsistent with target " + std::to_string(height) + "x" +
                     std::to_string(width) + " at kernel " + std::to_string(kernel));
  }
  Node n;
  n.op = Op::kUpsample2d;
  n.inputs = {x.id};
  n.kernel = kernel;
  n.shape = {sx[0], sx[1], height, width};
  n.value.assign(shape_numel(n.shape), T{0});
  kernels::upsample2d(sx[0] * sx[1], height, width, kernel, node(x).value.data(),
                      n.value.data());
  n.requires_grad = any_requires_grad({x});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::reduce_to_channels(Var a) {
  const auto& sa = shape(a);
  if (sa.size() < 2) throw ShapeError("reduce_to_channels: rank < 2 " + shape_to_string(sa));
  Node n;
  n.op = Op::kReduceToChannels;
  n.inputs = {a.id};
  n.shape = {sa[1]};
  n.value.assign(sa[1], T{0});
  const std::size_t inner = shape_numel(sa) / (sa[0] * sa[1]);
  const auto& av = node(a).value;
  for (std::size_t i = 0; i < sa[0]; ++i)
    for (std::size_t c = 0; c < sa[1]; ++c) {
      const T* p = av.data() + (i * sa[1] + c) * inner;
      T acc{0};
      for (std::size_t k = 0; k < inner; ++k) acc += p[k];
      n.value[c] += acc;
    }
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

namespace {

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* in, T* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* a = in + i * cols;
    T* p = out + i * cols;
    const T mx = *std::max_element(a, a + cols);
    T total{0};
    for (std::size_t k = 0; k < cols; ++k) {
      p[k] = std::exp(a[k] - mx);
      total += p[k];
    }
    for (std::size_t k = 0; k < cols; ++k) p[k] /= total;
  }
}

}  // namespace

template <typename T>
Var BasicGraph<T>::softmax(Var a) {
  const auto& sa = shape(a);
  require_rank(Op::kSoftmax, sa, 2);
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {a.id};
  n.shape = sa;
  n.value.resize(shape_numel(sa));
  softmax_rows(sa[0], sa[1], node(a).value.data(), n.value.data());
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Shape sa = shape(logits);
  if (sa.size() == 1) sa = {1, sa[0]};
  if (sa.size() != 2 || sa[0] == 0) {
    throw ShapeError("softmax_cross_entropy: logits must be [K] or [N x K], got " +
                     shape_to_string(shape(logits)));
  }
  if (labels.size() != sa[0]) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(sa[0]) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= sa[1]) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(sa[1]) + ")");
    }
  }
  const auto& av = node(logits).value;
  Node n;
  n.op = Op::kSoftmaxCrossEntropy;
  n.inputs = {logits.id};
  n.shape = {};
  n.labels.assign(labels.begin(), labels.end());
  n.saved.resize(av.size());
  softmax_rows(sa[0], sa[1], av.data(), n.saved.data());
  // -log p_y computed as logsumexp(a) - a_y for accuracy when p_y is tiny.
  T loss{0};
  for (std::size_t i = 0; i < sa[0]; ++i) {
    const T* a = av.data() + i * sa[1];
    const T mx = *std::max_element(a, a + sa[1]);
    T total{0};
    for (std::size_t k = 0; k < sa[1]; ++k) total += std::exp(a[k] - mx);
    loss += std::log(total) + mx - a[labels[i]];
  }
  n.value = {loss / static_cast<T>(sa[0])};
  n.requires_grad = any_requires_grad({logits});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::sum(Var a) {
  Node n;
  n.op = Op::kSum;
  n.inputs = {a.id};
  n.shape = {};
  T acc{0};
  for (T v : node(a).value) acc += v;
  n.value = {acc};
  n.requires_grad = any_requires_grad({a});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Node n;
  n.op = Op::kConcat;
  for (Var p : parts) {
    const auto& v = node(p).value;
    n.inputs.push_back(p.id);
    n.value.insert(n.value.end(), v.begin(), v.end());
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.shape = {n.value.size()};
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::cosine_distance(Var a, Var b) {
  const auto& av = node(a).value;
  const auto& bv = node(b).value;
  if (av.size() != bv.size()) shape_fail(Op::kCosineDistance, shape(a), shape(b));
  T dot{0}, na{0}, nb{0};
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
  }
  if (!(na > T{0}) || !(nb > T{0})) {
    throw DegenerateCosine("cosine_distance: zero-norm operand");
  }
  Node n;
  n.op = Op::kCosineDistance;
  n.inputs = {a.id, b.id};
  n.shape = {};
  n.saved = {dot, std::sqrt(na), std::sqrt(nb)};
  n.value = {T{1} - dot / (n.saved[1] * n.saved[2])};
  n.requires_grad = any_requires_grad({a, b});
  return push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::total_variation(Var x) {
  const auto& sx = shape(x);
  require_rank(Op::kTotalVariation, sx, 4);
  const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
  const auto& xv = node(x).value;
  T acc{0};
  for (std::size_t p = 0; p < planes; ++p) {
    const T* z = xv.data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const T dx = i + 1 < h ? z[(i + 1) * w + j] - z[i * w + j] : T{0};
        const T dy = j + 1 < w ? z[i * w + j + 1] - z[i * w + j] : T{0};
        T t;
        tv_term(dx, dy, t);
        acc += t;
      }
  }
  Node n;
  n.op = Op::kTotalVariation;
  n.inputs = {x.id};
  n.shape = {};
  n.value = {acc};
  n.requires_grad = any_requires_grad({x});
  return push(std::move(n));
}

template <typename T>
auto BasicGraph<T>::tensor(Var v) const -> TensorT {
  const Node& n = node(v);
  return TensorT(n.shape, n.value);
}

template <typename T>
T BasicGraph<T>::scalar(Var v) const {
  const Node& n = node(v);
  if (n.value.size() != 1) {
    throw ShapeError("scalar(): node has shape " + shape_to_string(n.shape));
  }
  return n.value[0];
}

template <typename T>
auto BasicGraph<T>::probabilities(Var cross_entropy) const -> TensorT {
  const Node& n = node(cross_entropy);
  if (n.op != Op::kSoftmaxCrossEntropy) {
    throw GraphError("probabilities(): node is not softmax_cross_entropy");
  }
  const std::size_t rows = n.labels.size();
  return TensorT({rows, n.saved.size() / rows}, n.saved);
}

template <typename T>
std::span<const T> BasicGraph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) {
    throw GraphError("grad(): node " + std::to_string(v.id) + " (" + op_name(n.op) +
                     ") has no gradient; not reachable or backward() not run");
  }
  return n.grad;
}

template <typename T>
auto BasicGraph<T>::grad_tensor(Var v) const -> TensorT {
  auto g = grad(v);
  return TensorT(node(v).shape, std::vector<T>(g.begin(), g.end()));
}

template <typename T>
void BasicGraph<T>::reset_gradients() {
  for (auto& n : nodes_) {
    n.grad.clear();
    n.grad.shrink_to_fit();
  }
  backward_done_ = false;
}

template <typename T>
std::vector<bool> BasicGraph<T>::relu_pattern() const {
  std::vector<bool> out;
  for (const auto& n : nodes_) {
    if (n.op != Op::kRelu) continue;
    for (T v : nodes_[n.inputs[0]].value) out.push_back(v > T{0});
  }
  return out;
}

template <typename T>
std::vector<T>& BasicGraph<T>::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
  return n.grad;
}

template <typename T>
void BasicGraph<T>::backward(Var loss) {
  if (backward_done_) {
    throw GraphError("backward() called twice without reset_gradients()");
  }
  const Node& l = node(loss);
  if (l.value.size() != 1) {
    throw ShapeError("backward(): loss must be scalar, got " + shape_to_string(l.shape));
  }
  backward_done_ = true;
  if (!l.requires_grad) return;
  grad_buffer(loss.id)[0] = T{1};
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    backprop(id);
  }
  for (auto& n : nodes_) {
    if (n.sink == nullptr || n.grad.empty()) continue;
    auto& g = n.sink->grad;
    if (!g || g->size() != n.grad.size()) g.emplace(n.grad.size(), T{0});
    add_into<T>(*g, n.grad);
  }
}

template <typename T>
void BasicGraph<T>::backprop(std::uint32_t id) {
  const Node& n = nodes_[id];
  const std::vector<T>& g = n.grad;
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
  auto in = [&](std::size_t k) -> const Node& { return nodes_[n.inputs[k]]; };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return;
    case Op::kMatmul: {
      const auto& sa = in(0).shape;
      const auto& sb = in(1).shape;
      if (wants(0)) {
        kernels::matmul_nt(sa[0], sb[1], sa[1], g.data(), in(1).value.data(),
                           grad_buffer(n.inputs[0]).data());
      }
      if (wants(1)) {
        kernels::matmul_tn(sa[0], sa[1], sb[1], in(0).value.data(), g.data(),
                           grad_buffer(n.inputs[1]).data());
      }
      return;
    }
    case Op::kTranspose: {
      const auto& sa = in(0).shape;
      auto& dst = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < sa[0]; ++i)
        for (std::size_t j = 0; j < sa[1]; ++j) dst[i * sa[1] + j] += g[j * sa[0] + i];
      return;
    }
    case Op::kConv2d: {
      const auto geo = conv_geometry(in(0).shape, in(1).shape, n.shape[2], n.shape[3], n.conv);
      if (wants(0)) {
        kernels::conv2d_transpose(geo, g.data(), in(1).value.data(),
                                  grad_buffer(n.inputs[0]).data());
      }
      if (wants(1)) {
        kernels::conv2d_weight_grad(geo, in(0).value.data(), g.data(),
                                    grad_buffer(n.inputs[1]).data());
      }
      return;
    }
    case Op::kConv2dTranspose: {
      // out = T(gy, w); d gy = conv(dout, w); d w = wgrad(dout, gy)
      const auto& sg = in(0).shape;
      const auto geo = conv_geometry(n.shape, in(1).shape, sg[2], sg[3], n.conv);
      if (wants(0)) {
        kernels::conv2d(geo, g.data(), in(1).value.data(),
                        grad_buffer(n.inputs[0]).data());
      }
      if (wants(1)) {
        kernels::conv2d_weight_grad(geo, g.data(), in(0).value.data(),
                                    grad_buffer(n.inputs[1]).data());
      }
      return;
    }
    case Op::kConv2dWeightGrad: {
      // out = wgrad(x, gy); d x = T(gy, dout); d gy = conv(x, dout)
      const auto& sg = in(1).shape;
      const auto geo = conv_geometry(in(0).shape, n.shape, sg[2], sg[3], n.conv);
      if (wants(0)) {
        kernels::conv2d_transpose(geo, in(1).value.data(), g.data(),
                                  grad_buffer(n.inputs[0]).data());
      }
      if (wants(1)) {
        kernels::conv2d(geo, in(0).value.data(), g.data(),
                        grad_buffer(n.inputs[1]).data());
      }
      return;
    }
    case Op::kAdd:
      if (wants(0)) add_into<T>(grad_buffer(n.inputs[0]), g);
      if (wants(1)) add_into<T>(grad_buffer(n.inputs[1]), g);
      return;
    case Op::kAddBias: {
      if (wants(0)) add_into<T>(grad_buffer(n.inputs[0]), g);
      if (wants(1)) {
        const auto& sa = n.shape;
        const std::size_t inner = shape_numel(sa) / (sa[0] * sa[1]);
        auto& db = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < sa[0]; ++i)
          for (std::size_t c = 0; c < sa[1]; ++c) {
            const T* p = g.data() + (i * sa[1] + c) * inner;
            T acc{0};
            for (std::size_t k = 0; k < inner; ++k) acc += p[k];
            db[c] += acc;
          }
      }
      return;
    }
    case Op::kSub:
      if (wants(0)) add_into<T>(grad_buffer(n.inputs[0]), g);
      if (wants(1)) {
        auto& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
      }
      return;
    case Op::kMul:
      if (wants(0)) {
        auto& d = grad_buffer(n.inputs[0]);
        const auto& b = in(1).value;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b[i];
      }
      if (wants(1)) {
        auto& d = grad_buffer(n.inputs[1]);
        const auto& a = in(0).value;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a[i];
      }
      return;
    case Op::kScale: {
      auto& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * n.factor;
      return;
    }
    case Op::kRelu: {
      auto& d = grad_buffer(n.inputs[0]);
      const auto& x = in(0).value;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (x[i] > T{0}) d[i] += g[i];
      return;
    }
    case Op::kReshape:
      add_into<T>(grad_buffer(n.inputs[0]), g);
      return;
    case Op::kAvgPool2d: {
      const auto& sx = in(0).shape;
      kernels::upsample2d(sx[0] * sx[1], sx[2], sx[3], n.kernel, g.data(),
                          grad_buffer(n.inputs[0]).data());
      return;
    }
    case Op::kUpsample2d:
      kernels::avgpool2d(n.shape[0] * n.shape[1], n.shape[2], n.shape[3], n.kernel,
                         g.data(), grad_buffer(n.inputs[0]).data());
      return;
    case Op::kReduceToChannels: {
      const auto& sa = in(0).shape;
      const std::size_t inner = shape_numel(sa) / (sa[0] * sa[1]);
      auto& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < sa[0]; ++i)
        for (std::size_t c = 0; c < sa[1]; ++c) {
          T* p = d.data() + (i * sa[1] + c) * inner;
          for (std::size_t k = 0; k < inner; ++k) p[k] += g[c];
        }
      return;
    }
    case Op::kSoftmax: {
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      auto& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* p = n.value.data() + i * cols;
        const T* gr = g.data() + i * cols;
        T dot{0};
        for (std::size_t k = 0; k < cols; ++k) dot += gr[k] * p[k];
        for (std::size_t k = 0; k < cols; ++k) d[i * cols + k] += p[k] * (gr[k] - dot);
      }
      return;
    }
    case Op::kSoftmaxCrossEntropy: {
      const std::size_t rows = n.labels.size();
      const std::size_t cols = n.saved.size() / rows;
      const T coef = g[0] / static_cast<T>(rows);
      auto& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t k = 0; k < cols; ++k) {
          T pk = n.saved[i * cols + k];
          if (static_cast<int>(k) == n.labels[i]) pk -= T{1};
          d[i * cols + k] += coef * pk;
        }
      }
      return;
    }
    case Op::kSum: {
      auto& d = grad_buffer(n.inputs[0]);
      for (auto& v : d) v += g[0];
      return;
    }
    case Op::kConcat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t len = in(k).value.size();
        if (wants(k)) {
          auto& d = grad_buffer(n.inputs[k]);
          for (std::size_t i = 0; i < len; ++i) d[i] += g[offset + i];
        }
        offset += len;
      }
      return;
    }
    case Op::kCosineDistance: {
      const T dot = n.saved[0], na = n.saved[1], nb = n.saved[2];
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      const T inv = T{1} / (na * nb);
      const T c = dot * inv;
      if (wants(0)) {
        auto& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < d.size(); ++i)
          d[i] -= g[0] * (b[i] * inv - c * a[i] / (na * na));
      }
      if (wants(1)) {
        auto& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < d.size(); ++i)
          d[i] -= g[0] * (a[i] * inv - c * b[i] / (nb * nb));
      }
      return;
    }
    case Op::kTotalVariation: {
      const auto& sx = in(0).shape;
      const std::size_t planes = sx[0] * sx[1], h = sx[2], w = sx[3];
      const auto& xv = in(0).value;
      auto& d = grad_buffer(n.inputs[0]);
      for (std::size_t p = 0; p < planes; ++p) {
        const T* z = xv.data() + p * h * w;
        T* dz = d.data() + p * h * w;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j) {
            const bool down = i + 1 < h, right = j + 1 < w;
            const T dx = down ? z[(i + 1) * w + j] - z[i * w + j] : T{0};
            const T dy = right ? z[i * w + j + 1] - z[i * w + j] : T{0};
            T t;
            tv_term(dx, dy, t);
            const T s = g[0] / t;
            dz[i * w + j] -= s * (dx + dy);
            if (down) dz[(i + 1) * w + j] += s * dx;
            if (right) dz[i * w + j + 1] += s * dy;
          }
      }
      return;
    }
  }
}

template class BasicGraph<float>;
template class BasicGraph<double>;

}  // namespace gradleak
