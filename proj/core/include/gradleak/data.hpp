#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Images in [0, 1], NCHW.
struct Dataset {
  std::string name;
  Tensor images;  // [M x C x H x W]
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  Tensor image(std::size_t index) const { return slice_rows(images, index); }
};

// Throws std::invalid_argument if labels/pixels break the Dataset invariants.
void validate_dataset(const Dataset& d);

// MNIST-format IDX pair (magic 0x00000803 images, 0x00000801 labels).
// `classes` = 0 infers max(label) + 1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 0);
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset load_cifar_binary(std::span<const std::filesystem::path> paths);

struct SyntheticSpec {
  std::size_t classes = 64;
  std::size_t per_class = 20;
  std::size_t size = 28;
  std::size_t channels = 1;
  double noise = 0.1;      // uniform in [-noise, noise]
  double contrast = 0.25;  // grating amplitude around 0.5
  std::uint64_t seed = 0;
};

// Oriented sinusoidal gratings, one (orientation, frequency, phase) per class,
// plus per-image uniform noise, clipped to [0, 1]. Images are grouped by
// class in index order.
Dataset generate_synthetic(const SyntheticSpec& spec);
// Noise-free class pattern, [1 x C x size x size].
Tensor grating_template(const SyntheticSpec& spec, std::size_t label);

// Stratified split: `test_fraction` of each class (rounded down) goes to the
// second dataset. Deterministic given the seed.
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double test_fraction,
                                          std::uint64_t seed);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct BatchSpec {
  std::size_t batch_size = 8;
  std::optional<std::size_t> anchor;
  bool distinct_labels = true;
  std::uint64_t seed = 0;
};

struct Batch {
  Tensor images;  // [N x C x H x W]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // dataset indices
};

Batch gather(const Dataset& d, std::span<const std::size_t> indices);
// Random batch; when distinct_labels is set no two samples share a label.
// The anchor, if given, is always included.
Batch sample_batch(const Dataset& d, const BatchSpec& spec);

}  // namespace gradleak
