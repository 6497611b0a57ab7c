#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradleak/container.hpp"
#include "gradleak/model.hpp"
#include "gradleak/training.hpp"

namespace gradleak {

// What leaves the client: batch-averaged parameter gradients and protocol
// metadata. Never inputs, labels or features.
struct GradientPacket {
  std::string checkpoint_sha256;
  std::string checkpoint_path;
  std::vector<NamedArray> gradients;  // one per model parameter, same order
  std::size_t batch_size = 0;
  bool batch_size_disclosed = true;
  std::string training_mode = "vanilla";  // "vanilla" | "at"
  std::uint64_t round_id = 0;
  std::string client_id;

  const Tensor& gradient(std::string_view name) const;
  const Tensor& head_gradient() const { return gradient("head.weight"); }
};

// Evaluation-only ground truth for one local step.
struct ClientRoundRecord {
  Tensor clean_images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // dataset indices, may be empty
  std::optional<Tensor> adversarial_images;
  Tensor features;       // r_i of the inputs actually used
  Tensor probabilities;  // p_i of the inputs actually used

  const Tensor& inputs_used() const {
    return adversarial_images ? *adversarial_images : clean_images;
  }
};

struct ClientStep {
  GradientPacket packet;
  ClientRoundRecord record;
};

struct ClientOptions {
  std::optional<ATConfig> at;
  bool allow_duplicate_labels = false;
  std::uint64_t round_id = 0;
  std::string client_id = "client-0";
  std::string checkpoint_path;
};

// One local training step: the gradient of the batch-mean loss on the
// clean batch, or on its PGD examples when `at` is set.
ClientStep client_local_step(const Model& model, const Tensor& images,
                             std::span<const int> labels, const ClientOptions& options, Rng& rng);

class PacketMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_packet(const GradientPacket& packet);
GradientPacket decode_packet(std::span<const std::uint8_t> bytes);
void serialize_packet(const GradientPacket& packet, const std::filesystem::path& path);
GradientPacket deserialize_packet(const std::filesystem::path& path);
// Also checks that the packet references `model` and mirrors its parameters;
// throws PacketMismatch otherwise.
GradientPacket deserialize_packet(const std::filesystem::path& path, const Model& model);
void check_packet_matches(const GradientPacket& packet, const Model& model);

// `path` must end in ".groundtruth".
void save_groundtruth(const ClientRoundRecord& record, const std::filesystem::path& path);
ClientRoundRecord load_groundtruth(const std::filesystem::path& path);

// Elementwise mean over packets that share a checkpoint.
std::vector<NamedArray> server_aggregate(std::span<const GradientPacket> packets);

}  // namespace gradleak
