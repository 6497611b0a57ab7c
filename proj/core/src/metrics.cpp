#include "gradleak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "gradleak/container.hpp"

namespace gradleak {

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: lengths " + std::to_string(u.size()) +
                                " and " + std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += double(u[i]) * v[i];
    nu += double(u[i]) * u[i];
    nv += double(v[i]) * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.numel() != b.numel() || a.numel() == 0) {
    throw ShapeError(std::string(what) + ": shapes " + shape_to_string(a.shape) + " and " +
                     shape_to_string(b.shape) + " differ");
  }
}

struct Plane {
  std::size_t c, h, w;
};

Plane image_dims(const Tensor& t, const char* what) {
  if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.dim(3)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  throw ShapeError(std::string(what) + ": expected a single image, got " + shape_to_string(t.shape));
}

std::vector<double> grayscale(const Tensor& t, const Plane& p) {
  std::vector<double> g(p.h * p.w, 0.0);
  for (std::size_t c = 0; c < p.c; ++c)
    for (std::size_t i = 0; i < p.h * p.w; ++i) g[i] += t.data[c * p.h * p.w + i];
  for (auto& v : g) v /= static_cast<double>(p.c);
  return g;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_same(a, b, "psnr");
  if (a.shape != b.shape) throw ShapeError("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data[i]) - b.data[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(a.numel()) / se);
}

double ssim(const Tensor& a, const Tensor& b, const SsimParams& params) {
  const Plane pa = image_dims(a, "ssim"), pb = image_dims(b, "ssim");
  if (pa.c != pb.c || pa.h != pb.h || pa.w != pb.w) throw ShapeError("ssim: shape mismatch");
  const std::size_t w = params.window;
  if (w == 0 || pa.h < w || pa.w < w) {
    throw std::invalid_argument("ssim: image " + std::to_string(pa.h) + "x" +
                                std::to_string(pa.w) + " smaller than window " + std::to_string(w));
  }
  const auto ga = grayscale(a, pa), gb = grayscale(b, pb);
  const double n = static_cast<double>(w * w);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t y0 = 0; y0 + w <= pa.h; y0 += w)
    for (std::size_t x0 = 0; x0 + w <= pa.w; x0 += w) {
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          ma += ga[(y0 + i) * pa.w + x0 + j];
          mb += gb[(y0 + i) * pa.w + x0 + j];
        }
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double da = ga[(y0 + i) * pa.w + x0 + j] - ma;
          const double db = gb[(y0 + i) * pa.w + x0 + j] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += ((2 * ma * mb + params.c1) * (2 * cov + params.c2)) /
               ((ma * ma + mb * mb + params.c1) * (va + vb + params.c2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  const Plane p = image_dims(image, "write_ppm");
  if (p.c != 1 && p.c != 3) throw ShapeError("write_ppm: need 1 or 3 channels");
  std::string out = "P6\n" + std::to_string(p.w) + " " + std::to_string(p.h) + "\n255\n";
  const std::size_t plane = p.h * p.w;
  out.reserve(out.size() + 3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = image.data[(p.c == 1 ? 0 : c) * plane + i];
      out.push_back(static_cast<char>(
          static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    }
  write_text_atomic(path, out);
}

Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P6") throw FormatError(path.string() + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + 3 * w * h) throw FormatError(path.string() + ": truncated PPM raster");
  Tensor t({3, h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      t.data[c * w * h + i] = static_cast<float>(bytes[pos + 3 * i + c]) / 255.0f;
    }
  return t;
}

Tensor hstack_images(std::span<const Tensor> images) {
  if (images.empty()) throw std::invalid_argument("hstack_images: no images");
  const Plane first = image_dims(images[0], "hstack_images");
  std::size_t width = 0;
  for (const auto& im : images) {
    const Plane p = image_dims(im, "hstack_images");
    if (p.c != first.c || p.h != first.h) throw ShapeError("hstack_images: heights/channels differ");
    width += p.w;
  }
  width += images.size() - 1;
  Tensor out({first.c, first.h, width}, 1.0f);
  std::size_t x0 = 0;
  for (const auto& im : images) {
    const Plane p = image_dims(im, "hstack_images");
    for (std::size_t c = 0; c < p.c; ++c)
      for (std::size_t i = 0; i < p.h; ++i)
        for (std::size_t j = 0; j < p.w; ++j) {
          out.data[(c * p.h + i) * width + x0 + j] = im.data[(c * p.h + i) * p.w + j];
        }
    x0 += p.w + 1;
  }
  return out;
}

}  // namespace gradleak
