#pragma once

#include <filesystem>
#include <span>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Throws std::invalid_argument on length mismatch or a zero vector.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

// 10 log10(1 / MSE) for images in [0, 1]; +infinity when identical.
double psnr(const Tensor& a, const Tensor& b);

struct SsimParams {
  std::size_t window = 8;
  double c1 = 1e-4;
  double c2 = 9e-4;
};

// Mean SSIM over non-overlapping windows of the channel-mean grayscale
// image. Accepts [C x H x W] or [1 x C x H x W].
double ssim(const Tensor& a, const Tensor& b, const SsimParams& params = {});

// Binary PPM (P6, maxval 255). Grayscale images are replicated to RGB.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);  // [3 x H x W]

// Images laid out left to right with a one-pixel white gutter.
Tensor hstack_images(std::span<const Tensor> images);

}  // namespace gradleak
