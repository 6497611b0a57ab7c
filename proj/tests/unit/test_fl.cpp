#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "gradleak/fl.hpp"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

Model model_for(Architecture arch, std::uint64_t seed = 0) {
  ModelSpec s;
  s.arch = arch;
  s.classes = 10;
  return build_model(s, seed);
}

Tensor random_images(const Model& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(m.input_shape(n));
  for (auto& v : x.data) v = static_cast<float>(uniform01(rng));
  return x;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gradleak-fl-test";
  fs::create_directories(dir);
  return dir / name;
}

class ClientStepTest : public ::testing::TestWithParam<Architecture> {};

TEST_P(ClientStepTest, PacketIsMeanOfPerSampleGradients) {
  const Model m = model_for(GetParam(), 1);
  const Tensor x = random_images(m, 4, 2);
  const std::vector<int> y{3, 0, 7, 9};
  Rng rng(0);
  const auto step = client_local_step(m, x, y, {}, rng);
  ASSERT_EQ(step.packet.gradients.size(), m.parameters().size());
  std::vector<std::vector<double>> oracle(m.parameters().size());
  for (std::size_t i = 0; i < 4; ++i) {
    const std::vector<int> yi{y[i]};
    const auto g = parameter_gradients(m, slice_rows(x, i), yi);
    for (std::size_t p = 0; p < g.size(); ++p) {
      oracle[p].resize(g[p].numel());
      for (std::size_t j = 0; j < g[p].numel(); ++j) oracle[p][j] += g[p].data[j] / 4.0;
    }
  }
  for (std::size_t p = 0; p < oracle.size(); ++p) {
    const auto& got = step.packet.gradients[p];
    EXPECT_EQ(got.name, m.parameters()[p].name);
    EXPECT_EQ(got.tensor.shape, m.parameters()[p].tensor.shape);
    for (std::size_t j = 0; j < oracle[p].size(); ++j) {
      EXPECT_NEAR(got.tensor.data[j], oracle[p][j], 1e-5) << got.name << "[" << j << "]";
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Architectures, ClientStepTest,
                         ::testing::Values(Architecture::kMlpSmall, Architecture::kConvSmall),
                         [](const auto& info) {
                           std::string s = to_string(info.param);
                           std::replace(s.begin(), s.end(), '-', '_');
                           return s;
                         });

TEST(ClientStep, SingleSampleAndDuplicatedSampleAgree) {
  const Model m = model_for(Architecture::kMlpSmall, 4);
  const Tensor one = random_images(m, 1, 5);
  Tensor two(m.input_shape(2));
  std::copy(one.data.begin(), one.data.end(), two.data.begin());
  std::copy(one.data.begin(), one.data.end(), two.data.begin() + static_cast<long>(one.numel()));
  Rng rng(0);
  const std::vector<int> y1{6}, y2{6, 6};
  const auto a = client_local_step(m, one, y1, {}, rng);
  EXPECT_THROW(client_local_step(m, two, y2, {}, rng), std::invalid_argument);
  ClientOptions dup;
  dup.allow_duplicate_labels = true;
  const auto b = client_local_step(m, two, y2, dup, rng);
  const auto direct = parameter_gradients(m, one, y1);
  for (std::size_t p = 0; p < direct.size(); ++p) {
    EXPECT_EQ(a.packet.gradients[p].tensor.data, direct[p].data);
    for (std::size_t j = 0; j < direct[p].numel(); ++j)
      EXPECT_NEAR(b.packet.gradients[p].tensor.data[j], direct[p].data[j], 1e-6);
  }
}

TEST(ClientStep, AdversarialModeUsesPgdInputs) {
  const Model m = model_for(Architecture::kMlpSmall, 4);
  const Tensor x = random_images(m, 2, 6);
  const std::vector<int> y{1, 2};
  ClientOptions opts;
  opts.at = ATConfig{};
  Rng rng(1);
  const auto step = client_local_step(m, x, y, opts, rng);
  ASSERT_TRUE(step.record.adversarial_images.has_value());
  EXPECT_NE(step.record.adversarial_images->data, x.data);
  EXPECT_EQ(step.packet.training_mode, "at");
  const auto direct = parameter_gradients(m, *step.record.adversarial_images, y);
  EXPECT_EQ(step.packet.head_gradient().data, direct.back().data);
  EXPECT_EQ(step.record.features.data, compute_features(m, step.record.inputs_used()).data);
}

TEST(Packet, HeadGradientIsDByK) {
  const Model m = model_for(Architecture::kConvSmall);
  Rng rng(0);
  const std::vector<int> y{0, 1};
  const auto step = client_local_step(m, random_images(m, 2, 0), y, {}, rng);
  EXPECT_EQ(step.packet.head_gradient().shape, (Shape{256, 10}));
  EXPECT_EQ(step.packet.checkpoint_sha256, model_hash(m));
  EXPECT_EQ(step.packet.batch_size, 2u);
}

TEST(Packet, RoundTripIsByteIdentical) {
  const Model m = model_for(Architecture::kMlpSmall);
  Rng rng(0);
  const std::vector<int> y{0, 1, 2};
  ClientOptions opts;
  opts.round_id = 17;
  opts.client_id = "c-3";
  auto step = client_local_step(m, random_images(m, 3, 0), y, opts, rng);
  const auto bytes = encode_packet(step.packet);
  const auto back = decode_packet(bytes);
  EXPECT_EQ(encode_packet(back), bytes);
  EXPECT_EQ(back.round_id, 17u);
  EXPECT_EQ(back.client_id, "c-3");

  step.packet.batch_size_disclosed = false;
  const auto hidden = decode_packet(encode_packet(step.packet));
  EXPECT_FALSE(hidden.batch_size_disclosed);

  const auto path = scratch("p.glgp");
  serialize_packet(step.packet, path);
  EXPECT_NO_THROW(deserialize_packet(path, m));
}

TEST(Packet, CheckpointMismatchIsRejected) {
  const Model m = model_for(Architecture::kMlpSmall, 0);
  Rng rng(0);
  const std::vector<int> y{0};
  auto step = client_local_step(m, random_images(m, 1, 0), y, {}, rng);
  step.packet.checkpoint_sha256[0] = step.packet.checkpoint_sha256[0] == 'a' ? 'b' : 'a';
  const auto path = scratch("tampered.glgp");
  serialize_packet(step.packet, path);
  EXPECT_THROW(deserialize_packet(path, m), PacketMismatch);
  EXPECT_THROW(check_packet_matches(step.packet, model_for(Architecture::kMlpSmall, 1)),
               PacketMismatch);
}

// No 16-float window of any input row appears verbatim in the packet bytes.
TEST(Packet, ContainsNoRawInputs) {
  const Model m = model_for(Architecture::kConvSmall, 2);
  const Tensor x = random_images(m, 3, 9);
  const std::vector<int> y{4, 5, 6};
  Rng rng(0);
  const auto step = client_local_step(m, x, y, {}, rng);
  const auto bytes = encode_packet(step.packet);
  const std::string hay(bytes.begin(), bytes.end());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t r = 0; r < 28; ++r) {
      const float* row = x.data.data() + i * 784 + r * 28;
      const std::string needle(reinterpret_cast<const char*>(row), 16 * sizeof(float));
      EXPECT_EQ(hay.find(needle), std::string::npos);
    }
  const auto header = peek_header(bytes, kPacketMagic);
  for (const char* banned : {"labels", "features", "images", "probabilities"}) {
    EXPECT_FALSE(header.contains(banned)) << banned;
  }
}

TEST(GroundTruth, RoundTripAndExtension) {
  const Model m = model_for(Architecture::kMlpSmall);
  Rng rng(0);
  const std::vector<int> y{2, 3};
  ClientOptions opts;
  opts.at = ATConfig{};
  auto step = client_local_step(m, random_images(m, 2, 1), y, opts, rng);
  step.record.indices = {10, 11};
  const auto path = scratch("r.groundtruth");
  save_groundtruth(step.record, path);
  const auto back = load_groundtruth(path);
  EXPECT_EQ(back.labels, step.record.labels);
  EXPECT_EQ(back.indices, step.record.indices);
  EXPECT_EQ(back.features.data, step.record.features.data);
  EXPECT_EQ(back.adversarial_images->data, step.record.adversarial_images->data);
  EXPECT_THROW(save_groundtruth(step.record, scratch("r.bin")), std::invalid_argument);
}

TEST(Aggregate, MeansPacketsElementwise) {
  const Model m = model_for(Architecture::kMlpSmall, 3);
  std::vector<GradientPacket> packets;
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(s);
    const std::vector<int> y{static_cast<int>(s)};
    packets.push_back(client_local_step(m, random_images(m, 1, s), y, {}, rng).packet);
  }
  const auto one = server_aggregate(std::span(packets).first(1));
  EXPECT_EQ(one[0].tensor.data, packets[0].gradients[0].tensor.data);
  const std::vector<GradientPacket> same{packets[0], packets[0]};
  EXPECT_EQ(server_aggregate(same)[2].tensor.data, packets[0].gradients[2].tensor.data);
  const auto mean = server_aggregate(packets);
  for (std::size_t p = 0; p < mean.size(); ++p)
    for (std::size_t j = 0; j < mean[p].tensor.numel(); ++j) {
      const double expected = (double(packets[0].gradients[p].tensor.data[j]) +
                               packets[1].gradients[p].tensor.data[j] +
                               packets[2].gradients[p].tensor.data[j]) / 3.0;
      EXPECT_NEAR(mean[p].tensor.data[j], expected, 1e-7);
    }
  EXPECT_THROW(server_aggregate(std::span<const GradientPacket>{}), std::invalid_argument);
  packets[1].checkpoint_sha256 = "other";
  EXPECT_THROW(server_aggregate(packets), PacketMismatch);
}

}  // namespace
}  // namespace gradleak
