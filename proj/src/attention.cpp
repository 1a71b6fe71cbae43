#include "xformer/attention.hpp"

#include <cmath>
#include <limits>

namespace xf {

namespace {

// [B, T, heads*d] -> [B*heads, T, d]
std::vector<std::size_t> split_heads_index(std::size_t batches, std::size_t tokens,
                                           std::size_t heads, std::size_t dim) {
  const std::size_t C = heads * dim;
  std::vector<std::size_t> idx(batches * tokens * C);
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t e = 0; e < dim; ++e) {
          idx[((b * heads + h) * tokens + t) * dim + e] = (b * tokens + t) * C + h * dim + e;
        }
  return idx;
}

std::vector<std::size_t> merge_heads_index(std::size_t batches, std::size_t tokens,
                                           std::size_t heads, std::size_t dim) {
  const std::size_t C = heads * dim;
  std::vector<std::size_t> idx(batches * tokens * C);
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t e = 0; e < dim; ++e) {
          idx[(b * tokens + t) * C + h * dim + e] = ((b * heads + h) * tokens + t) * dim + e;
        }
  return idx;
}

void check_window_extent(std::size_t h, std::size_t w, std::size_t window, const char* op) {
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by window " + std::to_string(window));
  }
}

}  // namespace

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 3) throw DimensionError("window_partition: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  check_window_extent(H, W, window, "window_partition");
  const std::size_t nx = W / window, n = (H / window) * nx, tokens = window * window;
  std::vector<std::size_t> idx(x.numel());
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t y0 = (w / nx) * window, x0 = (w % nx) * window;
    for (std::size_t t = 0; t < tokens; ++t) {
      const std::size_t y = y0 + t / window, xx = x0 + t % window;
      for (std::size_t c = 0; c < C; ++c) idx[(w * tokens + t) * C + c] = (y * W + xx) * C + c;
    }
  }
  return gather(x, Shape{n, tokens, C}, std::move(idx));
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& windows, std::size_t height, std::size_t width,
                       std::size_t window) {
  check_window_extent(height, width, window, "window_merge");
  const std::size_t nx = width / window, n = (height / window) * nx, tokens = window * window;
  if (windows.rank() != 3 || windows.extent(0) != n || windows.extent(1) != tokens) {
    throw DimensionError("window_merge: " + shape_str(windows.shape()) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t C = windows.extent(2);
  std::vector<std::size_t> idx(windows.numel());
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t y0 = (w / nx) * window, x0 = (w % nx) * window;
    for (std::size_t t = 0; t < tokens; ++t) {
      const std::size_t y = y0 + t / window, xx = x0 + t % window;
      for (std::size_t c = 0; c < C; ++c) idx[(y * width + xx) * C + c] = (w * tokens + t) * C + c;
    }
  }
  return gather(windows, Shape{height, width, C}, std::move(idx));
}

std::vector<std::size_t> relative_position_index(std::size_t window) {
  const std::size_t tokens = window * window, span = 2 * window - 1;
  std::vector<std::size_t> idx(tokens * tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const long ri = static_cast<long>(i / window), ci = static_cast<long>(i % window);
    for (std::size_t j = 0; j < tokens; ++j) {
      const long rj = static_cast<long>(j / window), cj = static_cast<long>(j % window);
      const long g = static_cast<long>(window) - 1;
      idx[i * tokens + j] = static_cast<std::size_t>((ri - rj + g) * static_cast<long>(span) + (ci - cj + g));
    }
  }
  return idx;
}

template <typename T>
Tensor<T> relative_position_bias(const Tensor<T>& table, std::size_t window) {
  const std::size_t span = 2 * window - 1;
  if (table.rank() != 2 || table.extent(0) != span * span) {
    throw ConfigError("relative_position_bias: table " + shape_str(table.shape()) +
                      " does not match window " + std::to_string(window));
  }
  const std::size_t heads = table.extent(1), tokens = window * window;
  const auto rel = relative_position_index(window);
  std::vector<std::size_t> idx(heads * tokens * tokens);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t p = 0; p < tokens * tokens; ++p) idx[h * tokens * tokens + p] = rel[p] * heads + h;
  return gather(table, Shape{heads, tokens, tokens}, std::move(idx));
}

template <typename T>
Tensor<T> shifted_window_mask(std::size_t height, std::size_t width, std::size_t window,
                              std::size_t shift) {
  check_window_extent(height, width, window, "shifted_window_mask");
  // Region labels of the rolled map: three bands per axis.
  auto band = [&](std::size_t i, std::size_t n) -> std::size_t {
    if (i < n - window) return 0;
    return i < n - shift ? 1 : 2;
  };
  const std::size_t nx = width / window, n = (height / window) * nx, tokens = window * window;
  std::vector<std::size_t> label(tokens);
  Tensor<T> mask(Shape{n, tokens, tokens});
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t w = 0; w < n; ++w) {
    const std::size_t y0 = (w / nx) * window, x0 = (w % nx) * window;
    for (std::size_t t = 0; t < tokens; ++t) {
      label[t] = band(y0 + t / window, height) * 3 + band(x0 + t % window, width);
    }
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t j = 0; j < tokens; ++j) {
        mask[(w * tokens + i) * tokens + j] = label[i] == label[j] ? T(0) : neg_inf;
      }
  }
  return mask;
}

template <typename T>
Tensor<T> w_msa(const Tensor<T>& x, const WindowAttentionParams<T>& p) {
  if (x.rank() != 3) throw DimensionError("w_msa: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  const std::size_t G = p.window, heads = p.heads;
  check_window_extent(H, W, G, "w_msa");
  if (heads == 0 || C % heads != 0) {
    throw ConfigError("w_msa: " + std::to_string(C) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t shift = p.shifted ? G / 2 : 0;
  const long s = static_cast<long>(shift);
  const std::size_t dim = C / heads, tokens = G * G;

  const Tensor<T> shifted = shift ? roll2d(x, -s, -s) : x;
  const Tensor<T> windows = window_partition(shifted, G);
  const std::size_t nwin = windows.extent(0);
  const Shape head_shape{nwin * heads, tokens, dim};
  const auto split = split_heads_index(nwin, tokens, heads, dim);
  const Tensor<T> q = gather(linear(windows, p.q), head_shape, split);
  const Tensor<T> k = gather(linear(windows, p.k), head_shape, split);
  const Tensor<T> v = gather(linear(windows, p.v), head_shape, split);

  Tensor<T> logits = scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(dim)));
  logits = add_tiled(logits, relative_position_bias(p.rpe_table, G));
  if (shift) {
    const Tensor<T> mask = shifted_window_mask<T>(H, W, G, shift);
    Tensor<T> full(logits.shape());
    const std::size_t per = tokens * tokens;
    for (std::size_t w = 0; w < nwin; ++w)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(mask.data().data() + w * per, per, full.data().data() + (w * heads + h) * per);
    logits = add(logits, full);
  }
  const Tensor<T> attn = softmax(logits, 2);
  const Tensor<T> mixed =
      gather(bmm(attn, v), Shape{nwin, tokens, C}, merge_heads_index(nwin, tokens, heads, dim));
  const Tensor<T> merged = window_merge(linear(mixed, p.out), H, W, G);
  return shift ? roll2d(merged, s, s) : merged;
}

template <typename T>
Tensor<T> c_msa(const Tensor<T>& x, const ChannelAttentionParams<T>& p, Tensor<T>* attention_map) {
  if (x.rank() != 3) throw DimensionError("c_msa: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  const std::size_t heads = p.heads;
  if (heads == 0 || C % heads != 0) {
    throw ConfigError("c_msa: " + std::to_string(C) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (p.temperature.numel() != heads) {
    throw ConfigError("c_msa: temperature " + shape_str(p.temperature.shape()) + " for " +
                      std::to_string(heads) + " heads");
  }
  for (T tau : p.temperature.data()) {
    if (!(tau > T(0))) throw NumericError("c_msa: temperature must be positive, got " + std::to_string(tau));
  }
  const std::size_t dim = C / heads, N = H * W;

  // [N, C] -> [heads, dim, N]
  std::vector<std::size_t> to_heads(N * C);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t e = 0; e < dim; ++e)
      for (std::size_t n = 0; n < N; ++n) to_heads[(h * dim + e) * N + n] = n * C + h * dim + e;
  std::vector<std::size_t> from_heads(N * C);
  for (std::size_t i = 0; i < to_heads.size(); ++i) from_heads[to_heads[i]] = i;

  const Shape head_shape{heads, dim, N};
  const Tensor<T> q = l2_normalize(gather(conv2d(conv2d(x, p.q_pw), p.q_dw), head_shape, to_heads));
  const Tensor<T> k = l2_normalize(gather(conv2d(conv2d(x, p.k_pw), p.k_dw), head_shape, to_heads));
  const Tensor<T> v = gather(conv2d(conv2d(x, p.v_pw), p.v_dw), head_shape, to_heads);

  const Tensor<T> logits = scale_batches(bmm(q, k, true), reciprocal(p.temperature));
  const Tensor<T> attn = softmax(logits, 2);
  if (attention_map) *attention_map = attn;
  const Tensor<T> mixed = gather(bmm(attn, v), Shape{H, W, C}, std::move(from_heads));
  return conv2d(mixed, p.out);
}

#define XF_INSTANTIATE_ATTENTION(T)                                                               \
  template Tensor<T> window_partition(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> window_merge(const Tensor<T>&, std::size_t, std::size_t, std::size_t);       \
  template Tensor<T> relative_position_bias(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> shifted_window_mask<T>(std::size_t, std::size_t, std::size_t, std::size_t);  \
  template Tensor<T> w_msa(const Tensor<T>&, const WindowAttentionParams<T>&);                    \
  template Tensor<T> c_msa(const Tensor<T>&, const ChannelAttentionParams<T>&, Tensor<T>*);

XF_INSTANTIATE_ATTENTION(float)
XF_INSTANTIATE_ATTENTION(double)

}  // namespace xf
