#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Binary container shared by checkpoints, gradient packets, datasets and
// ground-truth archives:
//
//   magic[4] | u32 version | u32 header_len | header (JSON, UTF-8)
//   | u32 array_count | array*
//   array := u32 name_len | name | u32 rank | u32 dims[rank]
//            | f32 data[prod(dims)]
//
// All integers and floats little-endian.
inline constexpr std::uint32_t kContainerVersion = 1;

using Magic = std::array<char, 4>;
inline constexpr Magic kCheckpointMagic{'G', 'L', 'C', 'K'};
inline constexpr Magic kPacketMagic{'G', 'L', 'G', 'P'};
inline constexpr Magic kDatasetMagic{'G', 'L', 'D', 'S'};
inline constexpr Magic kGroundTruthMagic{'G', 'L', 'G', 'T'};
inline constexpr Magic kAttackMagic{'G', 'L', 'A', 'R'};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The file ended before all declared arrays were read.
class TruncatedError : public FormatError {
 public:
  TruncatedError(std::size_t arrays_read, const std::string& what)
      : FormatError(what), arrays_read_(arrays_read) {}
  std::size_t arrays_read() const { return arrays_read_; }

 private:
  std::size_t arrays_read_;
};

struct NamedArray {
  std::string name;
  Tensor tensor;
};

struct Container {
  Magic magic{};
  std::uint32_t version = kContainerVersion;
  nlohmann::json header;
  std::vector<NamedArray> arrays;

  const Tensor* find(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes, const Magic& expected);
// Decodes only magic, version and JSON header.
nlohmann::json peek_header(std::span<const std::uint8_t> bytes, const Magic& expected);

// Writes via a temporary file then renames, so readers never see a partial file.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path, const Magic& expected);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace gradleak
