#include "xformer/blocks.hpp"

namespace xf {

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta, static_cast<T>(kNormEps));
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FFNParams<T>& p) {
  if (p.variant == FfnVariant::mlp) return linear(gelu(linear(x, p.fc1)), p.fc2);
  const Tensor<T> expanded = conv2d(conv2d(x, p.project_in), p.dwconv);
  const std::size_t hidden = expanded.extent(2) / 2;
  const Tensor<T> gated = mul(gelu(slice_last(expanded, 0, hidden)), slice_last(expanded, hidden, hidden));
  return conv2d(gated, p.project_out);
}

template <typename T>
Tensor<T> stb_forward(const Tensor<T>& x, const SpatialBlockParams<T>& p) {
  if (x.rank() != 3) throw DimensionError("stb_forward: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t H = x.extent(0), W = x.extent(1), G = p.attn.window;
  const std::size_t Hp = (H + G - 1) / G * G, Wp = (W + G - 1) / G * G;
  const Tensor<T> normed = reflect_pad2d(layer_norm(x, p.norm1), Hp - H, Wp - W);
  const Tensor<T> attended = add(x, crop2d(w_msa(normed, p.attn), H, W));
  return add(attended, ffn_forward(layer_norm(attended, p.norm2), p.ffn));
}

template <typename T>
Tensor<T> ctb_forward(const Tensor<T>& x, const ChannelBlockParams<T>& p) {
  const Tensor<T> attended = add(x, c_msa(layer_norm(x, p.norm1), p.attn));
  return add(attended, ffn_forward(layer_norm(attended, p.norm2), p.ffn));
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p) {
  if (const auto* s = std::get_if<SpatialBlockParams<T>>(&p)) return stb_forward(x, *s);
  return ctb_forward(x, std::get<ChannelBlockParams<T>>(p));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> bcu_exchange(const Tensor<T>& f_s, const Tensor<T>& f_c,
                                             const BCUParams<T>& p) {
  if (f_s.shape() != f_c.shape()) {
    throw DimensionError("bcu_exchange: branch shapes " + shape_str(f_s.shape()) + " vs " +
                         shape_str(f_c.shape()));
  }
  Tensor<T> s = p.channel_to_spatial.defined() ? add(f_s, conv2d(f_c, p.channel_to_spatial)) : f_s;
  Tensor<T> c = p.spatial_to_channel.defined() ? add(f_c, conv2d(f_s, p.spatial_to_channel)) : f_c;
  return {std::move(s), std::move(c)};
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ResampleParams<T>& p) {
  if (x.rank() != 3 || x.extent(0) % 2 != 0 || x.extent(1) % 2 != 0) {
    throw DimensionError("downsample: spatial extents of " + shape_str(x.shape()) + " must be even");
  }
  return pixel_unshuffle(conv2d(x, p.pre_conv), 2);
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ResampleParams<T>& p) {
  return pixel_shuffle(conv2d(x, p.pre_conv), 2);
}

template <typename T>
Tensor<T> resample(const Tensor<T>& x, const ResampleParams<T>& p) {
  return p.direction == ResampleDirection::down ? downsample(x, p) : upsample(x, p);
}

template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& dec, const Tensor<T>& enc, const ConvKernel<T>& reduce) {
  if (dec.rank() != 3 || enc.rank() != 3 || dec.extent(0) != enc.extent(0) ||
      dec.extent(1) != enc.extent(1)) {
    throw DimensionError("skip_fuse: decoder " + shape_str(dec.shape()) + " vs encoder " +
                         shape_str(enc.shape()));
  }
  return conv2d(concat_last(dec, enc), reduce);
}

#define XF_INSTANTIATE_BLOCKS(T)                                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const LayerNormParams<T>&);                 \
  template Tensor<T> ffn_forward(const Tensor<T>&, const FFNParams<T>&);                      \
  template Tensor<T> stb_forward(const Tensor<T>&, const SpatialBlockParams<T>&);             \
  template Tensor<T> ctb_forward(const Tensor<T>&, const ChannelBlockParams<T>&);             \
  template Tensor<T> block_forward(const Tensor<T>&, const BlockParams<T>&);                  \
  template std::pair<Tensor<T>, Tensor<T>> bcu_exchange(const Tensor<T>&, const Tensor<T>&,   \
                                                        const BCUParams<T>&);                 \
  template Tensor<T> downsample(const Tensor<T>&, const ResampleParams<T>&);                  \
  template Tensor<T> upsample(const Tensor<T>&, const ResampleParams<T>&);                    \
  template Tensor<T> resample(const Tensor<T>&, const ResampleParams<T>&);                    \
  template Tensor<T> skip_fuse(const Tensor<T>&, const Tensor<T>&, const ConvKernel<T>&);

XF_INSTANTIATE_BLOCKS(float)
XF_INSTANTIATE_BLOCKS(double)

}  // namespace xf
