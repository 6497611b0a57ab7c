#pragma once

// Dense loops shared by the graph's forward and backward rules. All output
// buffers are accumulated into (+=), callers zero them when needed.

#include <algorithm>
#include <cstddef>
#include <span>

namespace gradleak::kernels {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kernel_h, kernel_w;
  std::size_t out_h, out_w;
  std::size_t stride, padding;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// Output index range [lo, hi) for which `o * stride + k - padding` lands in
// [0, extent).
inline void valid_range(std::size_t k, std::size_t stride, std::size_t padding,
                        std::size_t extent, std::size_t out_extent,
                        std::size_t& lo, std::size_t& hi) {
  const long long kk = static_cast<long long>(k) - static_cast<long long>(padding);
  const long long s = static_cast<long long>(stride);
  long long first = 0;
  if (kk < 0) first = (-kk + s - 1) / s;
  long long last = (static_cast<long long>(extent) - 1 - kk);
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::max<long long>(first, 0));
  hi = static_cast<std::size_t>(
      std::min<long long>(last + 1, static_cast<long long>(out_extent)));
  if (hi < lo) hi = lo;
}

// Flat index of input (row i*stride+kh-pad, column kw-pad) within a plane.
inline std::ptrdiff_t row_offset(const ConvGeometry& g, std::size_t i,
                                 std::size_t kh, std::size_t kw) {
  const auto row = static_cast<std::ptrdiff_t>(i * g.stride + kh) -
                   static_cast<std::ptrdiff_t>(g.padding);
  return row * static_cast<std::ptrdiff_t>(g.width) +
         static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(g.padding);
}

template <typename T>
void conv2d(const ConvGeometry& g, const T* x, const T* w, T* y) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      T* yo = y + (n * g.out_ch + o) * g.out_h * g.out_w;
      for (std::size_t c = 0; c < g.in_ch; ++c) {
        const T* xc = x + (n * g.in_ch + c) * g.height * g.width;
        const T* wk = w + (o * g.in_ch + c) * g.kernel_h * g.kernel_w;
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          std::size_t i_lo, i_hi;
          valid_range(kh, g.stride, g.padding, g.height, g.out_h, i_lo, i_hi);
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            std::size_t j_lo, j_hi;
            valid_range(kw, g.stride, g.padding, g.width, g.out_w, j_lo, j_hi);
            const T wv = wk[kh * g.kernel_w + kw];
            for (std::size_t i = i_lo; i < i_hi; ++i) {
              const std::ptrdiff_t base = row_offset(g, i, kh, kw);
              T* yrow = yo + i * g.out_w;
              if (g.stride == 1) {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  yrow[j] += wv * xc[base + static_cast<std::ptrdiff_t>(j)];
              } else {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  yrow[j] += wv * xc[base + static_cast<std::ptrdiff_t>(j * g.stride)];
              }
            }
          }
        }
      }
    }
  }
}

// dx += conv2d^T(dy, w)
template <typename T>
void conv2d_transpose(const ConvGeometry& g, const T* dy, const T* w, T* dx) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const T* dyo = dy + (n * g.out_ch + o) * g.out_h * g.out_w;
      for (std::size_t c = 0; c < g.in_ch; ++c) {
        T* dxc = dx + (n * g.in_ch + c) * g.height * g.width;
        const T* wk = w + (o * g.in_ch + c) * g.kernel_h * g.kernel_w;
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          std::size_t i_lo, i_hi;
          valid_range(kh, g.stride, g.padding, g.height, g.out_h, i_lo, i_hi);
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            std::size_t j_lo, j_hi;
            valid_range(kw, g.stride, g.padding, g.width, g.out_w, j_lo, j_hi);
            const T wv = wk[kh * g.kernel_w + kw];
            for (std::size_t i = i_lo; i < i_hi; ++i) {
              const std::ptrdiff_t base = row_offset(g, i, kh, kw);
              const T* yrow = dyo + i * g.out_w;
              if (g.stride == 1) {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  dxc[base + static_cast<std::ptrdiff_t>(j)] += wv * yrow[j];
              } else {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  dxc[base + static_cast<std::ptrdiff_t>(j * g.stride)] += wv * yrow[j];
              }
            }
          }
        }
      }
    }
  }
}

// dw += sum_n x (*) dy
template <typename T>
void conv2d_weight_grad(const ConvGeometry& g, const T* x, const T* dy, T* dw) {
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const T* dyo = dy + (n * g.out_ch + o) * g.out_h * g.out_w;
      for (std::size_t c = 0; c < g.in_ch; ++c) {
        const T* xc = x + (n * g.in_ch + c) * g.height * g.width;
        T* wk = dw + (o * g.in_ch + c) * g.kernel_h * g.kernel_w;
        for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
          std::size_t i_lo, i_hi;
          valid_range(kh, g.stride, g.padding, g.height, g.out_h, i_lo, i_hi);
          for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
            std::size_t j_lo, j_hi;
            valid_range(kw, g.stride, g.padding, g.width, g.out_w, j_lo, j_hi);
            T acc{0};
            for (std::size_t i = i_lo; i < i_hi; ++i) {
              const std::ptrdiff_t base = row_offset(g, i, kh, kw);
              const T* yrow = dyo + i * g.out_w;
              if (g.stride == 1) {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  acc += xc[base + static_cast<std::ptrdiff_t>(j)] * yrow[j];
              } else {
                for (std::size_t j = j_lo; j < j_hi; ++j)
                  acc += xc[base + static_cast<std::ptrdiff_t>(j * g.stride)] * yrow[j];
              }
            }
            wk[kh * g.kernel_w + kw] += acc;
          }
        }
      }
    }
  }
}

// c[M x N] += a[M x K] . b[K x N]
template <typename T>
void matmul(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b,
            T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M x N] += a[M x K] . b[N x K]^T
template <typename T>
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
               const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[K x N] += a[M x K]^T . b[M x N]
template <typename T>
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const T* a,
               const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Planes of size height x width, `planes` of them.
template <typename T>
void avgpool2d(std::size_t planes, std::size_t height, std::size_t width,
               std::size_t k, const T* x, T* y) {
  const std::size_t oh = height / k, ow = width / k;
  const T inv = T{1} / static_cast<T>(k * k);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x + p * height * width;
    T* yp = y + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t di = 0; di < k; ++di)
        for (std::size_t j = 0; j < ow; ++j) {
          const T* xr = xp + (i * k + di) * width + j * k;
          T acc{0};
          for (std::size_t dj = 0; dj < k; ++dj) acc += xr[dj];
          yp[i * ow + j] += acc * inv;
        }
  }
}

template <typename T>
void upsample2d(std::size_t planes, std::size_t height, std::size_t width,
                std::size_t k, const T* g, T* x) {
  const std::size_t oh = height / k, ow = width / k;
  const T inv = T{1} / static_cast<T>(k * k);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* gp = g + p * oh * ow;
    T* xp = x + p * height * width;
    for (std::size_t i = 0; i < oh * k; ++i)
      for (std::size_t j = 0; j < ow * k; ++j)
        xp[i * width + j] += gp[(i / k) * ow + j / k] * inv;
  }
}

}  // namespace gradleak::kernels
