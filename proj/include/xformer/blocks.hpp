#pragma once

#include <utility>
#include <variant>

#include "xformer/attention.hpp"

namespace xf {

enum class FfnVariant { mlp, gated_dconv };

/// mlp: fc1 (C -> hidden), GELU, fc2 (hidden -> C).
/// gated_dconv: project_in (C -> 2*hidden), 3x3 depthwise, GELU(first half) *
/// second half, project_out (hidden -> C).
template <typename T>
struct FFNParams {
  FfnVariant variant = FfnVariant::mlp;
  Linear<T> fc1, fc2;
  ConvKernel<T> project_in, dwconv, project_out;
};

/// `beta` undefined means a bias-free norm.
template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
struct SpatialBlockParams {
  LayerNormParams<T> norm1;
  WindowAttentionParams<T> attn;
  LayerNormParams<T> norm2;
  FFNParams<T> ffn;
};

template <typename T>
struct ChannelBlockParams {
  LayerNormParams<T> norm1;
  ChannelAttentionParams<T> attn;
  LayerNormParams<T> norm2;
  FFNParams<T> ffn;
};

template <typename T>
using BlockParams = std::variant<SpatialBlockParams<T>, ChannelBlockParams<T>>;

/// Cross-branch refinement pair. Either kernel may be undefined, which
/// disables that direction.
template <typename T>
struct BCUParams {
  ConvKernel<T> spatial_to_channel;  // 3x3 depthwise on spatial features
  ConvKernel<T> channel_to_spatial;  // 3x3 dense on channel features
};

enum class ResampleDirection { down, up };

template <typename T>
struct ResampleParams {
  ResampleDirection direction = ResampleDirection::down;
  ConvKernel<T> pre_conv;
};

inline constexpr double kNormEps = 1e-6;

template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p);
template <typename T> Tensor<T> ffn_forward(const Tensor<T>& x, const FFNParams<T>& p);

/// x' = W-MSA(LN(x)) + x; out = FFN(LN(x')) + x'. Extents that are not
/// window multiples are reflect-padded for the attention and cropped back.
template <typename T> Tensor<T> stb_forward(const Tensor<T>& x, const SpatialBlockParams<T>& p);
template <typename T> Tensor<T> ctb_forward(const Tensor<T>& x, const ChannelBlockParams<T>& p);
template <typename T> Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p);

/// Both refinements read the pre-exchange inputs:
///   f_s' = f_s + conv3x3(f_c),  f_c' = f_c + dwconv3x3(f_s).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> bcu_exchange(const Tensor<T>& f_s, const Tensor<T>& f_c,
                                             const BCUParams<T>& p);

/// down: conv C -> C/2 then pixel_unshuffle(2); up: conv C -> 2C then
/// pixel_shuffle(2).
template <typename T> Tensor<T> downsample(const Tensor<T>& x, const ResampleParams<T>& p);
template <typename T> Tensor<T> upsample(const Tensor<T>& x, const ResampleParams<T>& p);
template <typename T> Tensor<T> resample(const Tensor<T>& x, const ResampleParams<T>& p);

/// concat(dec, enc) along channels followed by a 1x1 reduction back to C.
template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& dec, const Tensor<T>& enc, const ConvKernel<T>& reduce);

}  // namespace xf
