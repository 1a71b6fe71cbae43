#include "xformer/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "xformer/config.hpp"

namespace xf {

const Tensor<float>* Checkpoint::find(std::string_view path) const {
  for (const auto& [name, t] : records) {
    if (name == path) return &t;
  }
  return nullptr;
}

namespace {

constexpr char kMagic[4] = {'X', 'F', 'M', 'R'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint '" + origin_ + "' is truncated");
  }

  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_string(out, ckpt.config_text);
  put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& [path, t] : ckpt.records) {
    put_string(out, path);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  put_u32(out, crc32_of(out));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("'" + origin + "' is not an XFMR checkpoint");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4), origin);
  if (trailer.u32() != crc32_of(body)) throw IoError("checkpoint '" + origin + "' fails its CRC check");

  Reader in(body, origin);
  in.need(4);
  in.u32();  // magic
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint '" + origin + "' has version " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.config_text = in.str();
  const std::uint32_t count = in.u32();
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string path = in.str();
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& e : shape) e = in.u32();
    const std::size_t n = shape_numel(shape);
    if (rank == 0 || n == 0) throw IoError("checkpoint '" + origin + "': empty record '" + path + "'");
    in.need(4 * n);
    std::vector<float> values(n);
    for (auto& v : values) v = in.f32();
    ckpt.records.emplace_back(std::move(path), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (in.pos() != body.size()) throw IoError("checkpoint '" + origin + "' has trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint '" + path + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

Checkpoint model_checkpoint(const ModelParams<float>& model) {
  Checkpoint ckpt;
  ckpt.config_text = serialize(model.config);
  for (const auto& [path, t] : model.parameters) ckpt.records.emplace_back(path, t.clone());
  return ckpt;
}

ModelParams<float> model_from_checkpoint(const Checkpoint& ckpt) {
  XformerConfig cfg;
  try {
    cfg = parse_model_config(ckpt.config_text);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config is invalid: ") + e.what());
  }
  ModelParams<float> model = build<float>(cfg, 0);
  for (auto& [path, t] : model.parameters) {
    const Tensor<float>* src = ckpt.find(path);
    if (!src) throw IoError("checkpoint lacks parameter '" + path + "'");
    if (src->shape() != t.shape()) {
      throw IoError("checkpoint parameter '" + path + "' has shape " + shape_str(src->shape()) + ", model expects " +
                    shape_str(t.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), t.data().begin());
  }
  return model;
}

}  // namespace xf
