#include "gradleak/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "gradleak/container.hpp"
#include "gradleak/rng.hpp"

namespace gradleak {

void validate_dataset(const Dataset& d) {
  if (d.images.rank() != 4) {
    throw std::invalid_argument("dataset images must be [M x C x H x W], got " +
                                shape_to_string(d.images.shape));
  }
  if (d.images.dim(0) != d.labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(d.images.dim(0)) +
                                " images but " + std::to_string(d.labels.size()) + " labels");
  }
  for (int y : d.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= d.classes) {
      throw std::invalid_argument("dataset label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(d.classes) + ")");
    }
  }
  for (float v : d.images.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset pixel outside [0, 1]");
  }
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 4 > b.size()) throw FormatError("IDX: header truncated");
  return static_cast<std::uint32_t>(b[off]) << 24 | static_cast<std::uint32_t>(b[off + 1]) << 16 |
         static_cast<std::uint32_t>(b[off + 2]) << 8 | static_cast<std::uint32_t>(b[off + 3]);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes) {
  const auto ib = read_file_bytes(images);
  const auto lb = read_file_bytes(labels);
  if (read_be32(ib, 0) != 0x00000803u) {
    throw FormatError(images.string() + ": bad IDX image magic (expected 0x00000803)");
  }
  if (read_be32(lb, 0) != 0x00000801u) {
    throw FormatError(labels.string() + ": bad IDX label magic (expected 0x00000801)");
  }
  const std::size_t n = read_be32(ib, 4);
  const std::size_t rows = read_be32(ib, 8);
  const std::size_t cols = read_be32(ib, 12);
  const std::size_t nl = read_be32(lb, 4);
  if (n != nl) {
    throw FormatError("IDX dimension mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(nl) + " labels");
  }
  if (ib.size() != 16 + n * rows * cols) throw FormatError(images.string() + ": wrong payload size");
  if (lb.size() != 8 + n) throw FormatError(labels.string() + ": wrong payload size");

  Dataset d;
  d.name = images.stem().string();
  d.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    d.images.data[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  }
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(lb[8 + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.classes = classes ? classes : static_cast<std::size_t>(max_label + 1);
  validate_dataset(d);
  return d;
}

Dataset load_cifar_binary(std::span<const std::filesystem::path> paths) {
  constexpr std::size_t kRecord = 3073, kPlane = 1024;
  std::vector<float> pixels;
  Dataset d;
  d.name = "cifar10";
  d.classes = 10;
  for (const auto& path : paths) {
    const auto bytes = read_file_bytes(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                        " is not a multiple of 3073");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      d.labels.push_back(bytes[off]);
      for (std::size_t k = 0; k < 3 * kPlane; ++k) {
        pixels.push_back(static_cast<float>(bytes[off + 1 + k]) / 255.0f);
      }
    }
  }
  d.images = Tensor({d.labels.size(), 3, 32, 32}, std::move(pixels));
  validate_dataset(d);
  return d;
}

namespace {

struct GratingParams {
  double theta, cycles, phase;
};

GratingParams grating_params(const SyntheticSpec& spec, std::size_t label) {
  const auto orientations = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(spec.classes))));
  const std::size_t freqs = (spec.classes + orientations - 1) / orientations;
  const double max_cycles = static_cast<double>(spec.size) / 3.0;
  const double step =
      freqs > 1 ? std::min(0.75, (max_cycles - 1.5) / static_cast<double>(freqs - 1)) : 0.0;
  const std::size_t o = label % orientations;
  const std::size_t f = label / orientations;
  const double golden = 0.6180339887498949;
  const double frac = std::fmod(static_cast<double>(label + 1) * golden, 1.0);
  return {std::numbers::pi * static_cast<double>(o) / static_cast<double>(orientations),
          1.5 + step * static_cast<double>(f), 2.0 * std::numbers::pi * frac};
}

}  // namespace

Tensor grating_template(const SyntheticSpec& spec, std::size_t label) {
  const auto p = grating_params(spec, label);
  const std::size_t s = spec.size;
  Tensor t({1, spec.channels, s, s});
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    const double shift = static_cast<double>(c) * std::numbers::pi / 3.0;
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < s; ++j) {
        const double u = (static_cast<double>(j) * ct + static_cast<double>(i) * st) /
                         static_cast<double>(s);
        const double v = 0.5 + spec.contrast * std::sin(2.0 * std::numbers::pi * p.cycles * u +
                                                        p.phase + shift);
        t.data[(c * s + i) * s + j] = static_cast<float>(v);
      }
  }
  return t;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.classes > 256) {
    throw std::invalid_argument("synthetic dataset: classes must be in [1, 256]");
  }
  if (spec.per_class == 0 || spec.size < 4 || spec.channels == 0) {
    throw std::invalid_argument("synthetic dataset: per_class, size, channels must be positive");
  }
  if (spec.noise < 0.0 || spec.contrast < 0.0 || spec.contrast > 0.5) {
    throw std::invalid_argument("synthetic dataset: noise >= 0 and contrast in [0, 0.5]");
  }
  Dataset d;
  d.name = "synthetic-k" + std::to_string(spec.classes);
  d.classes = spec.classes;
  const std::size_t plane = spec.channels * spec.size * spec.size;
  d.images = Tensor({spec.classes * spec.per_class, spec.channels, spec.size, spec.size});
  Rng rng(derive_seed(spec.seed, "synthetic-noise"));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const Tensor base = grating_template(spec, c);
    for (std::size_t k = 0; k < spec.per_class; ++k) {
      float* dst = d.images.data.data() + (c * spec.per_class + k) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = base.data[i] + uniform(rng, -spec.noise, spec.noise);
        dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      d.labels.push_back(static_cast<int>(c));
    }
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double test_fraction,
                                          std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: test_fraction must be in [0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  }
  Rng rng(derive_seed(seed, "split"));
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& members : by_class) {
    for (std::size_t k = members.size(); k > 1; --k) {
      std::swap(members[k - 1], members[uniform_index(rng, k)]);
    }
    const auto n_test =
        static_cast<std::size_t>(test_fraction * static_cast<double>(members.size()));
    test_idx.insert(test_idx.end(), members.begin(),
                    members.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test),
                     members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  auto subset = [&](const std::vector<std::size_t>& idx, const std::string& suffix) {
    Batch b = gather(d, idx);
    return Dataset{d.name + suffix, std::move(b.images), std::move(b.labels), d.classes};
  };
  return {subset(train_idx, "-train"), subset(test_idx, "-test")};
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  Container c;
  c.magic = kDatasetMagic;
  c.header = {{"name", d.name}, {"classes", d.classes}, {"count", d.size()}};
  c.arrays.push_back({"images", d.images});
  Tensor labels({d.labels.size()});
  for (std::size_t i = 0; i < d.labels.size(); ++i) labels.data[i] = static_cast<float>(d.labels[i]);
  c.arrays.push_back({"labels", std::move(labels)});
  write_container(path, c);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path, kDatasetMagic);
  Dataset d;
  d.name = c.header.at("name").get<std::string>();
  d.classes = c.header.at("classes").get<std::size_t>();
  d.images = c.at("images");
  for (float v : c.at("labels").data) d.labels.push_back(static_cast<int>(v));
  validate_dataset(d);
  return d;
}

Batch gather(const Dataset& d, std::span<const std::size_t> indices) {
  Batch b;
  const std::size_t plane = d.images.numel() / std::max<std::size_t>(d.size(), 1);
  Shape shape = d.images.shape;
  shape[0] = indices.size();
  b.images = Tensor(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= d.size()) throw std::out_of_range("dataset index " + std::to_string(i));
    std::copy_n(d.images.data.begin() + static_cast<std::ptrdiff_t>(i * plane), plane,
                b.images.data.begin() + static_cast<std::ptrdiff_t>(k * plane));
    b.labels.push_back(d.labels[i]);
  }
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Batch sample_batch(const Dataset& d, const BatchSpec& spec) {
  const std::size_t n = spec.batch_size;
  if (n == 0) throw std::invalid_argument("sample_batch: batch size must be positive");
  if (spec.anchor && *spec.anchor >= d.size()) {
    throw std::out_of_range("sample_batch: anchor " + std::to_string(*spec.anchor) +
                            " outside dataset of " + std::to_string(d.size()));
  }
  if (n > d.size()) throw std::invalid_argument("sample_batch: batch larger than dataset");
  Rng rng(spec.seed);
  std::vector<std::size_t> chosen;
  if (spec.anchor) chosen.push_back(*spec.anchor);

  if (spec.distinct_labels) {
    if (n > d.classes) {
      throw std::invalid_argument("sample_batch: N=" + std::to_string(n) +
                                  " exceeds class count K=" + std::to_string(d.classes) +
                                  " with distinct labels");
    }
    std::vector<std::vector<std::size_t>> by_class(d.classes);
    for (std::size_t i = 0; i < d.size(); ++i) {
      by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    }
    std::vector<std::size_t> classes;
    for (std::size_t c = 0; c < d.classes; ++c) {
      if (by_class[c].empty()) continue;
      if (spec.anchor && static_cast<int>(c) == d.labels[*spec.anchor]) continue;
      classes.push_back(c);
    }
    const std::size_t need = n - chosen.size();
    if (classes.size() < need) {
      throw std::invalid_argument("sample_batch: only " + std::to_string(classes.size()) +
                                  " populated classes available for " + std::to_string(need) +
                                  " distinct labels");
    }
    for (std::size_t k = 0; k < need; ++k) {
      const std::size_t pick = k + uniform_index(rng, classes.size() - k);
      std::swap(classes[k], classes[pick]);
      const auto& members = by_class[classes[k]];
      chosen.push_back(members[uniform_index(rng, members.size())]);
    }
  } else {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!spec.anchor || i != *spec.anchor) pool.push_back(i);
    const std::size_t need = n - chosen.size();
    for (std::size_t k = 0; k < need; ++k) {
      const std::size_t pick = k + uniform_index(rng, pool.size() - k);
      std::swap(pool[k], pool[pick]);
      chosen.push_back(pool[k]);
    }
  }
  for (std::size_t k = chosen.size(); k > 1; --k) {
    std::swap(chosen[k - 1], chosen[uniform_index(rng, k)]);
  }
  return gather(d, chosen);
}

}  // namespace gradleak
