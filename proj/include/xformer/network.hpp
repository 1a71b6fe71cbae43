#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xformer/blocks.hpp"

namespace xf {

enum class BlockLayout { dual, all_stb, all_ctb };
enum class BcuMode { full, dw_only, conv_only, off };

std::string_view to_string(BlockLayout layout);
std::string_view to_string(BcuMode mode);
BlockLayout parse_block_layout(std::string_view text);
BcuMode parse_bcu_mode(std::string_view text);

/// Architecture hyperparameters. Seven-entry lists cover encoder levels 1-3,
/// the bottleneck, then decoder levels 3-1.
struct XformerConfig {
  std::size_t in_channels = 3;
  std::size_t base_channels = 48;
  std::vector<std::size_t> depths{2, 4, 4, 6, 4, 4, 2};
  std::vector<std::size_t> heads{1, 2, 4, 8, 4, 2, 1};
  std::size_t refinement_depth = 4;
  std::size_t refinement_heads = 1;
  std::size_t window = 16;
  double ffn_expansion = 2.66;
  bool shifted = true;
  BlockLayout layout = BlockLayout::dual;
  BcuMode bcu = BcuMode::full;

  /// Throws ConfigError on any inconsistency.
  void validate() const;
  std::size_t level_channels(std::size_t level) const;  // level 0..3
  std::size_t ffn_hidden(std::size_t channels) const;
  bool operator==(const XformerConfig&) const = default;
};

/// Small configuration used for desk-scale runs and tests: all depths 1.
XformerConfig tiny_config(std::size_t base_channels = 8, std::size_t window = 4);

/// Returns a copy of `cfg` with one ablation applied: all_stb, all_ctb,
/// bcu_1 (depthwise direction only), bcu_2 (dense direction only), off (no
/// BCU) or no_shift.
XformerConfig ablation_variant(const XformerConfig& cfg, std::string_view which);

template <typename T>
struct Branch {
  std::array<std::vector<BlockParams<T>>, 3> encoders;  // levels 1..3
  std::array<ResampleParams<T>, 3> down;                // after each encoder
  std::vector<BlockParams<T>> bottleneck;               // aliases ModelParams::bottleneck
  std::array<ResampleParams<T>, 3> up;                  // into decoder levels 3..1
  std::array<ConvKernel<T>, 3> reduce;                  // skip fusion at levels 3..1
  std::array<std::vector<BlockParams<T>>, 3> decoders;  // levels 3..1
};

/// Complete parameter tree. Every tensor is registered once in `parameters`
/// under a unique dotted path; the bottleneck is a single storage instance
/// referenced by both branches.
template <typename T>
struct ModelParams {
  XformerConfig config;
  ConvKernel<T> shallow;
  Branch<T> spatial;
  Branch<T> channel;
  std::vector<BlockParams<T>> bottleneck;
  std::array<BCUParams<T>, 2> encoder_bcu;  // at 2C@H/2 and 4C@H/4
  std::array<BCUParams<T>, 2> decoder_bcu;  // at 2C@H/2 and C@H
  std::vector<BlockParams<T>> refinement;
  ConvKernel<T> output;
  std::vector<std::pair<std::string, Tensor<T>>> parameters;

  Tensor<T> parameter(std::string_view path) const;
  void zero_grad();
  /// Keeps channel-attention temperatures >= 1e-4 after an update.
  void clamp_temperatures();
};

/// Deterministic initialisation: conv/linear weights truncated normal (std
/// 0.02, +-2 std), biases zero, norms gamma=1 beta=0, temperatures 1, RPE
/// tables normal std 0.02.
template <typename T> ModelParams<T> build(const XformerConfig& cfg, std::uint64_t seed);

/// Restores I + I_r. Inputs whose extents are not multiples of 8 are
/// reflect-padded and the result is cropped back.
template <typename T> Tensor<T> forward(const ModelParams<T>& m, const Tensor<T>& image);

template <typename T> std::size_t param_count(const ModelParams<T>& m);

/// Element counts grouped by the leading path component(s).
template <typename T>
std::vector<std::pair<std::string, std::size_t>> param_breakdown(const ModelParams<T>& m);

struct FlopReport {
  std::uint64_t total = 0;
  std::vector<std::pair<std::string, std::uint64_t>> modules;
};

/// Analytic multiply-accumulate count (1 MAC = 1 FLOP) for an H x W input:
/// convolutions, linear maps and attention products. Norms, softmax and
/// elementwise work are excluded.
FlopReport flop_report(const XformerConfig& cfg, std::size_t height, std::size_t width);
std::uint64_t flop_count(const XformerConfig& cfg, std::size_t height, std::size_t width);

}  // namespace xf
