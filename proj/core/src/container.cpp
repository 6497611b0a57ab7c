#include "gradleak/container.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gradleak {

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  bool has(std::size_t n) const { return in_.size() - pos_ >= n; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (!has(n)) throw FormatError("unexpected end of data");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string magic_string(const Magic& m) { return std::string(m.data(), m.size()); }

}  // namespace

const Tensor* Container::find(std::string_view name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a.tensor;
  return nullptr;
}

const Tensor& Container::at(std::string_view name) const {
  if (const Tensor* t = find(name)) return *t;
  throw FormatError("container is missing array '" + std::string(name) + "'");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  Writer w;
  w.raw(c.magic.data(), c.magic.size());
  w.u32(c.version);
  const std::string header = c.header.dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header.data(), header.size());
  w.u32(static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& a : c.arrays) {
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.raw(a.name.data(), a.name.size());
    w.u32(static_cast<std::uint32_t>(a.tensor.rank()));
    for (std::size_t d : a.tensor.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float f : a.tensor.data) w.f32(f);
  }
  return w.take();
}

namespace {

Container decode_prefix(Reader& r, const Magic& expected) {
  Container c;
  if (!r.has(4)) throw FormatError("file too short for magic bytes");
  const std::string magic = r.str(4);
  std::copy(magic.begin(), magic.end(), c.magic.begin());
  if (c.magic != expected) {
    throw FormatError("bad magic '" + magic + "', expected '" + magic_string(expected) + "'");
  }
  c.version = r.u32();
  if (c.version != kContainerVersion) {
    throw FormatError("unsupported format version " + std::to_string(c.version) +
                      " (this build reads version " + std::to_string(kContainerVersion) + ")");
  }
  const std::uint32_t header_len = r.u32();
  if (!r.has(header_len)) throw FormatError("truncated header");
  try {
    c.header = nlohmann::json::parse(r.str(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt JSON header: ") + e.what());
  }
  return c;
}

}  // namespace

nlohmann::json peek_header(std::span<const std::uint8_t> bytes, const Magic& expected) {
  Reader r(bytes);
  return decode_prefix(r, expected).header;
}

Container decode_container(std::span<const std::uint8_t> bytes, const Magic& expected) {
  Reader r(bytes);
  Container c = decode_prefix(r, expected);
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    try {
      NamedArray a;
      a.name = r.str(r.u32());
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError("array rank " + std::to_string(rank) + " too large");
      Shape shape(rank);
      for (auto& d : shape) d = r.u32();
      const std::size_t n = shape_numel(shape);
      if (!r.has(n * 4)) {
        throw TruncatedError(k, "truncated data for array '" + a.name + "'");
      }
      std::vector<float> data(n);
      for (auto& f : data) f = r.f32();
      a.tensor = Tensor(std::move(shape), std::move(data));
      c.arrays.push_back(std::move(a));
    } catch (const TruncatedError&) {
      throw;
    } catch (const FormatError& e) {
      throw TruncatedError(k, "truncated container at array #" + std::to_string(k) +
                                  ": " + e.what());
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last array");
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path, const Magic& expected) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_container(bytes, expected);
  } catch (const TruncatedError& e) {
    throw TruncatedError(e.arrays_read(), path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_file_bytes(path));
}

}  // namespace gradleak
