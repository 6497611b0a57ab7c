#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradleak/data.hpp"
#include "gradleak/metrics.hpp"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gradleak-data-test";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void push_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

// Four 28x28 images: image i has pixel (r, c) = (i * 60 + r + c) mod 256.
std::pair<fs::path, fs::path> idx_fixture(std::uint32_t image_magic = 0x803) {
  std::vector<std::uint8_t> img, lab;
  push_be32(img, image_magic);
  push_be32(img, 4);
  push_be32(img, 28);
  push_be32(img, 28);
  for (int i = 0; i < 4; ++i)
    for (int r = 0; r < 28; ++r)
      for (int c = 0; c < 28; ++c) img.push_back(static_cast<std::uint8_t>((i * 60 + r + c) % 256));
  img[16] = 255;
  push_be32(lab, 0x801);
  push_be32(lab, 4);
  for (std::uint8_t y : {3, 1, 4, 1}) lab.push_back(y);
  const auto a = scratch("img.idx"), b = scratch("lab.idx");
  write_bytes(a, img);
  write_bytes(b, lab);
  return {a, b};
}

TEST(Idx, LoadsHandBuiltFixture) {
  const auto [img, lab] = idx_fixture();
  const Dataset d = load_idx(img, lab);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_EQ(d.images.shape, (Shape{4, 1, 28, 28}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 1, 4, 1}));
  EXPECT_EQ(d.classes, 5u);
  EXPECT_FLOAT_EQ(d.images.data[0], 1.0f);  // the 255 byte
  EXPECT_FLOAT_EQ(d.images.data[1], 1.0f / 255.0f);
  EXPECT_FLOAT_EQ(d.images.data[784 * 2 + 28 * 3 + 5], float((120 + 3 + 5) % 256) / 255.0f);
}

TEST(Idx, WrongMagicIsRejected) {
  const auto [img, lab] = idx_fixture(0x802);
  EXPECT_THROW(load_idx(img, lab), std::runtime_error);
  const auto [img2, lab2] = idx_fixture();
  EXPECT_THROW(load_idx(lab2, img2), std::runtime_error);
}

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t fill) {
  std::vector<std::uint8_t> r(3073, fill);
  r[0] = label;
  return r;
}

TEST(Cifar, ConstantRecord) {
  const auto p = scratch("one.bin");
  write_bytes(p, cifar_record(7, 128));
  const std::vector<fs::path> files{p};
  const Dataset d = load_cifar_binary(files);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 7);
  EXPECT_EQ(d.images.shape, (Shape{1, 3, 32, 32}));
  for (float v : d.images.data) EXPECT_FLOAT_EQ(v, 128.0f / 255.0f);
}

TEST(Cifar, ChannelPlanesAndMultipleRecords) {
  auto rec = cifar_record(2, 0);
  for (std::size_t i = 0; i < 1024; ++i) rec[1 + 1024 + i] = 255;  // green plane
  auto both = rec;
  const auto second = cifar_record(9, 10);
  both.insert(both.end(), second.begin(), second.end());
  const auto p = scratch("two.bin");
  write_bytes(p, both);
  const std::vector<fs::path> files{p};
  const Dataset d = load_cifar_binary(files);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<int>{2, 9}));
  EXPECT_FLOAT_EQ(d.images.data[0], 0.0f);
  EXPECT_FLOAT_EQ(d.images.data[1024], 1.0f);
}

TEST(Cifar, TruncatedRecordIsRejected) {
  auto rec = cifar_record(1, 5);
  rec.pop_back();
  const auto p = scratch("bad.bin");
  write_bytes(p, rec);
  const std::vector<fs::path> files{p};
  EXPECT_THROW(load_cifar_binary(files), std::runtime_error);
}

TEST(Synthetic, SizeAndDeterminism) {
  SyntheticSpec s;
  const Dataset a = generate_synthetic(s), b = generate_synthetic(s);
  EXPECT_EQ(a.size(), 1280u);
  EXPECT_EQ(a.classes, 64u);
  EXPECT_EQ(a.images.data, b.images.data);
  EXPECT_EQ(a.labels, b.labels);
  for (float v : a.images.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  s.seed = 1;
  EXPECT_NE(generate_synthetic(s).images.data, a.images.data);
}

TEST(Synthetic, SameClassSharesGratingButNotNoise) {
  SyntheticSpec s;
  s.classes = 4;
  s.per_class = 2;
  const Dataset d = generate_synthetic(s);
  const Tensor t = grating_template(s, 1);
  const Tensor x0 = d.image(2), x1 = d.image(3);
  ASSERT_EQ(d.labels[2], 1);
  ASSERT_EQ(d.labels[3], 1);
  EXPECT_NE(x0.data, x1.data);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    EXPECT_LE(std::abs(x0.data[i] - t.data[i]), s.noise + 1e-6);
    EXPECT_LE(std::abs(x1.data[i] - t.data[i]), s.noise + 1e-6);
  }
  EXPECT_NE(grating_template(s, 0).data, t.data);
}

TEST(Split, IsStratifiedAndDisjoint) {
  SyntheticSpec s;
  s.classes = 8;
  s.per_class = 10;
  const Dataset d = generate_synthetic(s);
  const auto [train, test] = split_dataset(d, 0.2, 3);
  EXPECT_EQ(train.size(), 64u);
  EXPECT_EQ(test.size(), 16u);
  std::vector<int> per(8, 0);
  for (int y : test.labels) ++per[static_cast<std::size_t>(y)];
  for (int c : per) EXPECT_EQ(c, 2);
  const auto [train2, test2] = split_dataset(d, 0.2, 3);
  EXPECT_EQ(test.images.data, test2.images.data);
}

TEST(Dataset, SaveLoadRoundTrip) {
  SyntheticSpec s;
  s.classes = 3;
  s.per_class = 2;
  const Dataset d = generate_synthetic(s);
  const auto p = scratch("d.glds");
  save_dataset(d, p);
  const Dataset back = load_dataset(p);
  EXPECT_EQ(back.images.data, d.images.data);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.classes, d.classes);
  EXPECT_EQ(back.name, d.name);
}

TEST(Dataset, PpmRoundTripWithinOneLevel) {
  SyntheticSpec s;
  s.classes = 2;
  s.per_class = 1;
  const Dataset d = generate_synthetic(s);
  const auto p = scratch("img.ppm");
  write_ppm(p, d.image(0));
  const Tensor back = read_ppm(p);
  ASSERT_EQ(back.shape, (Shape{3, 28, 28}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 784; ++i)
      EXPECT_LE(std::abs(back.data[c * 784 + i] - d.images.data[i]), 1.0f / 255.0f + 1e-6f);
}

class Sampler : public ::testing::Test {
 protected:
  Dataset d = [] {
    SyntheticSpec s;
    s.size = 8;
    s.per_class = 3;
    return generate_synthetic(s);
  }();
};

TEST_F(Sampler, DistinctLabelsOverManyDraws) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Batch b = sample_batch(d, {8, std::nullopt, true, seed});
    ASSERT_EQ(b.labels.size(), 8u);
    EXPECT_EQ(std::set<int>(b.labels.begin(), b.labels.end()).size(), 8u) << seed;
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(d.labels[b.indices[i]], b.labels[i]);
  }
}

TEST_F(Sampler, FullBatchHasEveryClassOnce) {
  const Batch b = sample_batch(d, {64, std::nullopt, true, 5});
  EXPECT_EQ(std::set<int>(b.labels.begin(), b.labels.end()).size(), 64u);
  EXPECT_THROW(sample_batch(d, {65, std::nullopt, true, 5}), std::invalid_argument);
}

TEST_F(Sampler, AnchorIsAlwaysIncluded) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t anchor = (seed * 17) % d.size();
    const Batch b = sample_batch(d, {8, anchor, true, seed});
    EXPECT_NE(std::find(b.indices.begin(), b.indices.end(), anchor), b.indices.end());
  }
}

TEST_F(Sampler, GatherCopiesRows) {
  const std::vector<std::size_t> idx{5, 0};
  const Batch b = gather(d, idx);
  EXPECT_EQ(slice_rows(b.images, 0).data, d.image(5).data);
  EXPECT_EQ(b.labels[1], d.labels[0]);
}

}  // namespace
}  // namespace gradleak
