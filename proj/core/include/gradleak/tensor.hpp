#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradleak {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array. `grad` is populated by Graph::backward when the
// tensor was bound as a leaf with requires_grad set.
template <typename T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, T fill = T{0})
      : shape(std::move(s)), data(shape_numel(shape), fill) {}
  BasicTensor(Shape s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_to_string(shape));
    }
  }

  std::size_t numel() const { return data.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  std::size_t rank() const { return shape.size(); }

  std::span<T> values() { return data; }
  std::span<const T> values() const { return data; }

  void zero_grad() { grad.reset(); }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Row `index` of the leading axis, as a tensor with that axis set to 1.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& t, std::size_t index,
                          std::size_t count = 1) {
  if (t.rank() == 0 || index + count > t.dim(0)) {
    throw ShapeError("slice_rows out of range for shape " +
                     shape_to_string(t.shape));
  }
  const std::size_t stride = t.numel() / t.dim(0);
  Shape shape = t.shape;
  shape[0] = count;
  auto first = t.data.begin() + static_cast<std::ptrdiff_t>(index * stride);
  return BasicTensor<T>(std::move(shape),
                        std::vector<T>(first, first + static_cast<std::ptrdiff_t>(
                                                          count * stride)));
}

template <typename T>
BasicTensor<T> stack_rows(std::span<const BasicTensor<T>> rows) {
  if (rows.empty()) throw ShapeError("stack_rows of zero tensors");
  Shape shape = rows.front().shape;
  std::size_t total = 0;
  std::vector<T> data;
  for (const auto& r : rows) {
    if (r.rank() != shape.size() ||
        !std::equal(r.shape.begin() + 1, r.shape.end(), shape.begin() + 1)) {
      throw ShapeError("stack_rows: incompatible shapes " +
                       shape_to_string(shape) + " and " +
                       shape_to_string(r.shape));
    }
    total += r.dim(0);
    data.insert(data.end(), r.data.begin(), r.data.end());
  }
  shape[0] = total;
  return BasicTensor<T>(std::move(shape), std::move(data));
}

}  // namespace gradleak
