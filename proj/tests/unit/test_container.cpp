#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "gradleak/container.hpp"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

Container sample() {
  Container c;
  c.magic = kPacketMagic;
  c.header = {{"kind", "test"}, {"n", 3}};
  c.arrays.push_back({"a", Tensor({2, 2}, {1.0f, -2.0f, 3.5f, 0.0f})});
  c.arrays.push_back({"b.c", Tensor({3}, {7.0f, 8.0f, 9.0f})});
  return c;
}

TEST(Container, RoundTripPreservesEverything) {
  const auto bytes = encode_container(sample());
  const Container back = decode_container(bytes, kPacketMagic);
  EXPECT_EQ(back.header, sample().header);
  ASSERT_EQ(back.arrays.size(), 2u);
  EXPECT_EQ(back.at("a").shape, (Shape{2, 2}));
  EXPECT_EQ(back.at("a").data, sample().arrays[0].tensor.data);
  EXPECT_EQ(back.at("b.c").data, sample().arrays[1].tensor.data);
  EXPECT_EQ(encode_container(back), bytes);
}

TEST(Container, LayoutIsLittleEndianWithMagicFirst) {
  const auto bytes = encode_container(sample());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "GLGP");
  EXPECT_EQ(bytes[4], 1);  // version 1, little-endian
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  const std::uint32_t header_len = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | bytes[11] << 24;
  const std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  EXPECT_EQ(nlohmann::json::parse(header), sample().header);
}

TEST(Container, WrongMagicIsRejected) {
  const auto bytes = encode_container(sample());
  EXPECT_THROW(decode_container(bytes, kCheckpointMagic), FormatError);
}

TEST(Container, TruncationReportsArraysRead) {
  auto bytes = encode_container(sample());
  bytes.resize(bytes.size() - 4);
  try {
    decode_container(bytes, kPacketMagic);
    FAIL() << "expected TruncatedError";
  } catch (const TruncatedError& e) {
    EXPECT_EQ(e.arrays_read(), 1u);
  }
}

TEST(Container, TrailingBytesAreRejected) {
  auto bytes = encode_container(sample());
  bytes.push_back(0);
  EXPECT_THROW(decode_container(bytes, kPacketMagic), FormatError);
}

TEST(Container, MissingArrayLookupNamesIt) {
  const Container c = sample();
  EXPECT_EQ(c.find("zzz"), nullptr);
  try {
    c.at("zzz");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
  }
}

TEST(Container, PeekReadsOnlyTheHeader) {
  auto bytes = encode_container(sample());
  bytes.resize(bytes.size() - 10);
  EXPECT_EQ(peek_header(bytes, kPacketMagic)["n"], 3);
}

TEST(Container, AtomicWriteLeavesNoTemporaries) {
  const fs::path dir = fs::temp_directory_path() / "gradleak-container-test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_container(dir / "x.glgp", sample());
  write_container(dir / "x.glgp", sample());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(read_container(dir / "x.glgp", kPacketMagic).header, sample().header);
  fs::remove_all(dir);
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(std::string_view("")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex(std::string_view("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace gradleak
