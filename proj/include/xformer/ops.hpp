#pragma once

#include <cstddef>
#include <vector>

#include "xformer/tensor.hpp"

// Differentiable kernels. Image-like tensors are channel-last: [H, W, C].
namespace xf {

/// Convolution weight [out_ch, in_ch/groups, kH, kW] plus optional bias [out_ch].
/// An undefined `weight` marks an absent kernel.
template <typename T>
struct ConvKernel {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  bool defined() const { return weight.defined(); }
  std::size_t out_channels() const { return weight.extent(0); }
  std::size_t in_channels() const { return weight.extent(1) * groups; }
};

/// Dense map over the last axis: weight [out, in], optional bias [out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
};

// Elementwise, equal shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> reciprocal(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

/// y[i] = x[i] + b[i mod numel(b)]; numel(x) must be a multiple of numel(b).
template <typename T> Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& b);

/// x [B, ...] scaled slice-wise by s [B].
template <typename T> Tensor<T> scale_batches(const Tensor<T>& x, const Tensor<T>& s);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Mean absolute difference; subgradient sign(pred - target), 0 at ties.
template <typename T> Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T> Tensor<T> linear(const Tensor<T>& x, const Linear<T>& map);

/// Zero-padded cross-correlation on x [H, W, Cin].
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k);

/// Normalises over the last axis. `beta` may be undefined (bias-free norm).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6));

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// x / max(||x||_2, eps) along the last axis.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));

/// Batched product a [B, M, K] x b [B, K, N]; with transpose_b, b is [B, N, K].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// out.flat[i] = x.flat[index[i]]. Backward scatter-adds, so repeated indices
/// (reflection, broadcast tables) are handled.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> index);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Concatenate along the last axis.
template <typename T> Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t count);

// Spatial rearrangements on [H, W, C].

/// [H, W, C] -> [H/r, W/r, C*r*r]; channel order (sub-row, sub-col, channel),
/// channel fastest.
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);

/// Cyclic shift: out(i, j) = x((i - dy) mod H, (j - dx) mod W).
template <typename T> Tensor<T> roll2d(const Tensor<T>& x, long dy, long dx);

/// Reflect-pad at the bottom and right edges.
template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, std::size_t pad_bottom, std::size_t pad_right);

/// Keep the top-left h x w region.
template <typename T> Tensor<T> crop2d(const Tensor<T>& x, std::size_t h, std::size_t w);

/// Mirror an index into [0, n) with whole-symmetric folding (no edge repeat).
std::size_t reflect_index(long i, std::size_t n);

}  // namespace xf
