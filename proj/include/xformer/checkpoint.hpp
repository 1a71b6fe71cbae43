#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xformer/network.hpp"

namespace xf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// File layout, little-endian:
//   "XFMR" | u32 version | u32 n + config text | u32 record count
//   per record: u32 n + path | u32 rank | u32 extents[rank] | f32 values
//   u32 CRC32 of everything before it
struct Checkpoint {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<float>>> records;

  /// Null when absent.
  const Tensor<float>* find(std::string_view path) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// `origin` names the source in error messages.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

/// Written to a sibling temporary file, then renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Config plus every model parameter, in registration order.
Checkpoint model_checkpoint(const ModelParams<float>& model);

/// Rebuilds the model described by the embedded config and copies every
/// parameter in. Missing or mis-shaped records throw IoError; records outside
/// the model are ignored.
ModelParams<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace xf
