#include "gradleak/fl.hpp"

#include <set>

namespace gradleak {

const Tensor& GradientPacket::gradient(std::string_view name) const {
  for (const auto& g : gradients)
    if (g.name == name) return g.tensor;
  throw std::out_of_range("packet has no gradient '" + std::string(name) + "'");
}

ClientStep client_local_step(const Model& model, const Tensor& images,
                             std::span<const int> labels, const ClientOptions& options,
                             Rng& rng) {
  validate_batch(model, images, labels);
  if (!options.allow_duplicate_labels &&
      std::set<int>(labels.begin(), labels.end()).size() != labels.size()) {
    throw std::invalid_argument("client_local_step: batch has duplicate labels");
  }
  ClientStep out;
  auto& rec = out.record;
  rec.clean_images = Tensor(images.shape, images.data);
  rec.labels.assign(labels.begin(), labels.end());
  if (options.at) rec.adversarial_images = pgd_attack(model, images, labels, *options.at, rng);

  const Tensor& used = rec.inputs_used();
  const ForwardTrace trace = forward_trace(model, used, labels);
  rec.features = trace.features;
  rec.probabilities = trace.probabilities;

  auto& pkt = out.packet;
  pkt.checkpoint_sha256 = model_hash(model);
  pkt.checkpoint_path = options.checkpoint_path;
  pkt.batch_size = labels.size();
  pkt.training_mode = options.at ? "at" : "vanilla";
  pkt.round_id = options.round_id;
  pkt.client_id = options.client_id;
  auto grads = parameter_gradients(model, used, labels);
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    pkt.gradients.push_back({params[i].name, std::move(grads[i])});
  }
  return out;
}

std::vector<std::uint8_t> encode_packet(const GradientPacket& packet) {
  Container c;
  c.magic = kPacketMagic;
  c.header = {{"checkpoint_sha256", packet.checkpoint_sha256},
              {"checkpoint_path", packet.checkpoint_path},
              {"batch_size", packet.batch_size_disclosed
                                 ? nlohmann::json(packet.batch_size)
                                 : nlohmann::json(nullptr)},
              {"training_mode", packet.training_mode},
              {"round_id", packet.round_id},
              {"client_id", packet.client_id}};
  c.arrays = packet.gradients;
  return encode_container(c);
}

GradientPacket decode_packet(std::span<const std::uint8_t> bytes) {
  Container c = decode_container(bytes, kPacketMagic);
  GradientPacket p;
  const auto& h = c.header;
  p.checkpoint_sha256 = h.at("checkpoint_sha256").get<std::string>();
  p.checkpoint_path = h.value("checkpoint_path", std::string());
  p.batch_size_disclosed = !h.at("batch_size").is_null();
  p.batch_size = p.batch_size_disclosed ? h.at("batch_size").get<std::size_t>() : 0;
  p.training_mode = h.at("training_mode").get<std::string>();
  p.round_id = h.at("round_id").get<std::uint64_t>();
  p.client_id = h.at("client_id").get<std::string>();
  p.gradients = std::move(c.arrays);
  return p;
}

void serialize_packet(const GradientPacket& packet, const std::filesystem::path& path) {
  write_file_atomic(path, encode_packet(packet));
}

GradientPacket deserialize_packet(const std::filesystem::path& path) {
  try {
    return decode_packet(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void check_packet_matches(const GradientPacket& packet, const Model& model) {
  const std::string hash = model_hash(model);
  if (packet.checkpoint_sha256 != hash) {
    throw PacketMismatch("packet references checkpoint " + packet.checkpoint_sha256 +
                         " but the loaded model hashes to " + hash);
  }
  const auto params = model.parameters();
  if (packet.gradients.size() != params.size()) {
    throw PacketMismatch("packet has " + std::to_string(packet.gradients.size()) +
                         " gradients, model has " + std::to_string(params.size()) +
                         " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = packet.gradients[i];
    if (g.name != params[i].name || g.tensor.shape != params[i].tensor.shape) {
      throw PacketMismatch("packet gradient '" + g.name + "' " + shape_to_string(g.tensor.shape) +
                           " does not mirror parameter '" + params[i].name + "' " +
                           shape_to_string(params[i].tensor.shape));
    }
  }
}

GradientPacket deserialize_packet(const std::filesystem::path& path, const Model& model) {
  GradientPacket p = deserialize_packet(path);
  check_packet_matches(p, model);
  return p;
}

void save_groundtruth(const ClientRoundRecord& record, const std::filesystem::path& path) {
  if (path.extension() != ".groundtruth") {
    throw std::invalid_argument("ground-truth archive '" + path.string() +
                                "' must use the .groundtruth suffix");
  }
  Container c;
  c.magic = kGroundTruthMagic;
  c.header = {{"labels", record.labels},
              {"indices", record.indices},
              {"adversarial", record.adversarial_images.has_value()}};
  c.arrays.push_back({"clean_images", record.clean_images});
  if (record.adversarial_images) c.arrays.push_back({"adversarial_images", *record.adversarial_images});
  c.arrays.push_back({"features", record.features});
  c.arrays.push_back({"probabilities", record.probabilities});
  write_container(path, c);
}

ClientRoundRecord load_groundtruth(const std::filesystem::path& path) {
  const Container c = read_container(path, kGroundTruthMagic);
  ClientRoundRecord r;
  r.labels = c.header.at("labels").get<std::vector<int>>();
  r.indices = c.header.at("indices").get<std::vector<std::size_t>>();
  r.clean_images = c.at("clean_images");
  if (c.header.at("adversarial").get<bool>()) r.adversarial_images = c.at("adversarial_images");
  r.features = c.at("features");
  r.probabilities = c.at("probabilities");
  return r;
}

std::vector<NamedArray> server_aggregate(std::span<const GradientPacket> packets) {
  if (packets.empty()) throw std::invalid_argument("server_aggregate: no packets");
  const auto& first = packets.front();
  std::vector<NamedArray> out = first.gradients;
  for (const auto& p : packets.subspan(1)) {
    if (p.checkpoint_sha256 != first.checkpoint_sha256) {
      throw PacketMismatch("server_aggregate: packets reference different checkpoints (" +
                           first.checkpoint_sha256 + " vs " + p.checkpoint_sha256 + ")");
    }
    if (p.gradients.size() != out.size()) throw PacketMismatch("server_aggregate: layout differs");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (p.gradients[i].name != out[i].name || p.gradients[i].tensor.shape != out[i].tensor.shape) {
        throw PacketMismatch("server_aggregate: gradient '" + p.gradients[i].name + "' differs");
      }
      auto& acc = out[i].tensor.data;
      const auto& src = p.gradients[i].tensor.data;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += src[k];
    }
  }
  const float inv = 1.0f / static_cast<float>(packets.size());
  for (auto& a : out)
    for (auto& v : a.tensor.data) v *= inv;
  return out;
}

}  // namespace gradleak
