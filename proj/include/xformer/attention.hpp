#pragma once

#include <cstddef>
#include <vector>

#include "xformer/ops.hpp"

namespace xf {

/// Window self-attention with a learned relative-position bias table.
template <typename T>
struct WindowAttentionParams {
  Linear<T> q, k, v, out;
  Tensor<T> rpe_table;  // [(2G-1)^2, heads]
  std::size_t heads = 1;
  std::size_t window = 1;
  bool shifted = false;
};

/// Transposed (channel-to-channel) attention. q/k/v are each a 1x1 pointwise
/// conv followed by a 3x3 depthwise conv; `temperature` holds one positive
/// scalar per head.
template <typename T>
struct ChannelAttentionParams {
  ConvKernel<T> q_pw, q_dw, k_pw, k_dw, v_pw, v_dw;
  ConvKernel<T> out;
  Tensor<T> temperature;  // [heads]
  std::size_t heads = 1;
};

/// [H, W, C] -> [nWin, G*G, C], windows in row-major order, tokens row-major
/// inside each window.
template <typename T> Tensor<T> window_partition(const Tensor<T>& x, std::size_t window);
template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, std::size_t height, std::size_t width,
                       std::size_t window);

/// Flat table row for each (query, key) token pair of a G x G window,
/// row-major over [G^2, G^2].
std::vector<std::size_t> relative_position_index(std::size_t window);

/// Expands the table to [heads, G^2, G^2].
template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t window);

/// Additive mask [nWin, G^2, G^2] for the cyclically shifted layout of an
/// H x W map: 0 inside a region, -inf across region boundaries.
template <typename T>
Tensor<T> shifted_window_mask(std::size_t height, std::size_t width, std::size_t window,
                              std::size_t shift);

/// Window multi-head self-attention on [H, W, C]; H and W must be multiples of
/// the window. Shifted variants roll by floor(G/2) before partitioning.
template <typename T> Tensor<T> w_msa(const Tensor<T>& x, const WindowAttentionParams<T>& p);

/// Channel multi-head self-attention on [H, W, C]. When `attention_map` is
/// given it receives the post-softmax map [heads, C/heads, C/heads].
template <typename T>
Tensor<T> c_msa(const Tensor<T>& x, const ChannelAttentionParams<T>& p,
                Tensor<T>* attention_map = nullptr);

}  // namespace xf
