#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "support.hpp"
#include "xformer/blocks.hpp"

namespace xf::test {

inline WindowAttentionParams<double> random_window_params(std::mt19937_64& rng, std::size_t C, std::size_t heads,
                                                          std::size_t G, bool shifted, bool grad = false) {
  WindowAttentionParams<double> p;
  for (auto* l : {&p.q, &p.k, &p.v, &p.out}) {
    l->weight = random_tensor(Shape{C, C}, rng, 0.5, grad);
    l->bias = random_tensor(Shape{C}, rng, 0.2, grad);
  }
  p.rpe_table = random_tensor(Shape{(2 * G - 1) * (2 * G - 1), heads}, rng, 0.5, grad);
  p.heads = heads;
  p.window = G;
  p.shifted = shifted;
  return p;
}

inline ChannelAttentionParams<double> random_channel_params(std::mt19937_64& rng, std::size_t C, std::size_t heads,
                                                            bool grad = false) {
  ChannelAttentionParams<double> p;
  for (auto* k : {&p.q_pw, &p.k_pw, &p.v_pw, &p.out}) k->weight = random_tensor(Shape{C, C, 1, 1}, rng, 0.5, grad);
  for (auto* k : {&p.q_dw, &p.k_dw, &p.v_dw}) {
    k->weight = random_tensor(Shape{C, 1, 3, 3}, rng, 0.5, grad);
    k->groups = C;
    k->padding = 1;
  }
  p.temperature = test::uniform_tensor(Shape{heads}, rng, 0.3, 2.0, grad);
  p.heads = heads;
  return p;
}

inline std::vector<double> affine(const Linear<double>& l, const double* x, std::size_t C) {
  std::vector<double> y(C);
  for (std::size_t o = 0; o < C; ++o) {
    double s = l.bias[o];
    for (std::size_t i = 0; i < C; ++i) s += l.weight[o * C + i] * x[i];
    y[o] = s;
  }
  return y;
}

// Dense per-window softmax attention written directly from the definition:
// after the cyclic shift, two tokens of one window may attend to each other
// only if neither or both wrapped around along each axis.
inline Tensor<double> dense_window_attention(const Tensor<double>& x, const WindowAttentionParams<double>& p) {
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2), G = p.window, nh = p.heads;
  const std::size_t d = C / nh, s = p.shifted ? G / 2 : 0, T = G * G;
  Tensor<double> out(x.shape());
  for (std::size_t wy = 0; wy < H / G; ++wy)
    for (std::size_t wx = 0; wx < W / G; ++wx) {
      std::vector<std::size_t> oy(T), ox(T);
      std::vector<bool> wrap_y(T), wrap_x(T);
      std::vector<std::vector<double>> q(T), k(T), v(T);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t py = wy * G + t / G, px = wx * G + t % G;
        oy[t] = (py + s) % H;
        ox[t] = (px + s) % W;
        wrap_y[t] = py + s >= H;
        wrap_x[t] = px + s >= W;
        const double* src = &x[(oy[t] * W + ox[t]) * C];
        q[t] = affine(p.q, src, C);
        k[t] = affine(p.k, src, C);
        v[t] = affine(p.v, src, C);
      }
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> mixed(C, 0.0);
        for (std::size_t h = 0; h < nh; ++h) {
          std::vector<double> logit(T);
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < T; ++j) {
            if (wrap_y[i] != wrap_y[j] || wrap_x[i] != wrap_x[j]) {
              logit[j] = -std::numeric_limits<double>::infinity();
              continue;
            }
            double dot = 0;
            for (std::size_t e = 0; e < d; ++e) dot += q[i][h * d + e] * k[j][h * d + e];
            const long dr = static_cast<long>(i / G) - static_cast<long>(j / G) + static_cast<long>(G) - 1;
            const long dc = static_cast<long>(i % G) - static_cast<long>(j % G) + static_cast<long>(G) - 1;
            const std::size_t row = static_cast<std::size_t>(dr * static_cast<long>(2 * G - 1) + dc);
            logit[j] = dot / std::sqrt(static_cast<double>(d)) + p.rpe_table[row * nh + h];
            mx = std::max(mx, logit[j]);
          }
          double z = 0;
          for (auto& l : logit) z += (l = std::exp(l - mx));
          for (std::size_t j = 0; j < T; ++j)
            for (std::size_t e = 0; e < d; ++e) mixed[h * d + e] += logit[j] / z * v[j][h * d + e];
        }
        const auto y = affine(p.out, mixed.data(), C);
        for (std::size_t c = 0; c < C; ++c) out[(oy[i] * W + ox[i]) * C + c] = y[c];
      }
    }
  return out;
}

// Per-channel maps of a 1x1 conv followed by a zero-padded 3x3 depthwise conv.
inline std::vector<std::vector<double>> pw_dw(const Tensor<double>& x, const ConvKernel<double>& pw,
                                              const ConvKernel<double>& dw) {
  const long H = x.extent(0), W = x.extent(1), C = x.extent(2);
  std::vector<std::vector<double>> mid(C, std::vector<double>(H * W, 0.0)), out = mid;
  for (long n = 0; n < H * W; ++n)
    for (long o = 0; o < C; ++o)
      for (long i = 0; i < C; ++i) mid[o][n] += pw.weight[o * C + i] * x[n * C + i];
  for (long c = 0; c < C; ++c)
    for (long y = 0; y < H; ++y)
      for (long xx = 0; xx < W; ++xx) {
        double acc = 0;
        for (long a = -1; a <= 1; ++a)
          for (long b = -1; b <= 1; ++b) {
            const long iy = y + a, ix = xx + b;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            acc += dw.weight[c * 9 + (a + 1) * 3 + (b + 1)] * mid[c][iy * W + ix];
          }
        out[c][y * W + xx] = acc;
      }
  return out;
}

// Cross-covariance attention between channel descriptors, from the definition.
inline Tensor<double> dense_channel_attention(const Tensor<double>& x, const ChannelAttentionParams<double>& p,
                                              std::vector<double>* map = nullptr) {
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2), N = H * W, nh = p.heads, d = C / nh;
  auto q = pw_dw(x, p.q_pw, p.q_dw), k = pw_dw(x, p.k_pw, p.k_dw), v = pw_dw(x, p.v_pw, p.v_dw);
  for (auto* m : {&q, &k})
    for (auto& ch : *m) {
      double norm = 0;
      for (double e : ch) norm += e * e;
      norm = std::max(std::sqrt(norm), 1e-12);
      for (double& e : ch) e /= norm;
    }
  std::vector<std::vector<double>> mixed(C, std::vector<double>(N, 0.0));
  if (map) map->clear();
  for (std::size_t h = 0; h < nh; ++h)
    for (std::size_t i = 0; i < d; ++i) {
      std::vector<double> a(d);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < d; ++j) {
        double dot = 0;
        for (std::size_t n = 0; n < N; ++n) dot += q[h * d + i][n] * k[h * d + j][n];
        a[j] = dot / p.temperature[h];
        mx = std::max(mx, a[j]);
      }
      double z = 0;
      for (auto& e : a) z += (e = std::exp(e - mx));
      for (auto& e : a) e /= z;
      if (map) map->insert(map->end(), a.begin(), a.end());
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t n = 0; n < N; ++n) mixed[h * d + i][n] += a[j] * v[h * d + j][n];
    }
  Tensor<double> out(Shape{H, W, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < C; ++o) {
      double s = 0;
      for (std::size_t i = 0; i < C; ++i) s += p.out.weight[o * C + i] * mixed[i][n];
      out[n * C + o] = s;
    }
  return out;
}

inline LayerNormParams<double> random_norm(std::mt19937_64& rng, std::size_t C, bool grad) {
  LayerNormParams<double> n;
  n.gamma = random_tensor(Shape{C}, rng, 0.3, grad);
  for (auto& v : n.gamma.data()) v += 1.0;
  n.beta = random_tensor(Shape{C}, rng, 0.1, grad);
  return n;
}

inline FFNParams<double> random_ffn(std::mt19937_64& rng, FfnVariant variant, std::size_t C, std::size_t hidden,
                                    bool grad) {
  FFNParams<double> f;
  f.variant = variant;
  if (variant == FfnVariant::mlp) {
    f.fc1 = {random_tensor(Shape{hidden, C}, rng, 0.5, grad), random_tensor(Shape{hidden}, rng, 0.2, grad)};
    f.fc2 = {random_tensor(Shape{C, hidden}, rng, 0.5, grad), random_tensor(Shape{C}, rng, 0.2, grad)};
  } else {
    f.project_in.weight = random_tensor(Shape{2 * hidden, C, 1, 1}, rng, 0.5, grad);
    f.dwconv.weight = random_tensor(Shape{2 * hidden, 1, 3, 3}, rng, 0.5, grad);
    f.dwconv.groups = 2 * hidden;
    f.dwconv.padding = 1;
    f.project_out.weight = random_tensor(Shape{C, hidden, 1, 1}, rng, 0.5, grad);
  }
  return f;
}

inline SpatialBlockParams<double> random_stb(std::mt19937_64& rng, std::size_t C, std::size_t heads, std::size_t G,
                                             bool shifted, bool grad = false) {
  SpatialBlockParams<double> p;
  p.norm1 = random_norm(rng, C, grad);
  p.norm2 = random_norm(rng, C, grad);
  for (auto* l : {&p.attn.q, &p.attn.k, &p.attn.v, &p.attn.out}) {
    l->weight = random_tensor(Shape{C, C}, rng, 0.5, grad);
    l->bias = random_tensor(Shape{C}, rng, 0.2, grad);
  }
  p.attn.rpe_table = random_tensor(Shape{(2 * G - 1) * (2 * G - 1), heads}, rng, 0.5, grad);
  p.attn.heads = heads;
  p.attn.window = G;
  p.attn.shifted = shifted;
  p.ffn = random_ffn(rng, FfnVariant::mlp, C, 2 * C, grad);
  return p;
}

inline ChannelBlockParams<double> random_ctb(std::mt19937_64& rng, std::size_t C, std::size_t heads,
                                             bool grad = false) {
  ChannelBlockParams<double> p;
  p.norm1 = random_norm(rng, C, grad);
  p.norm2 = random_norm(rng, C, grad);
  for (auto* k : {&p.attn.q_pw, &p.attn.k_pw, &p.attn.v_pw, &p.attn.out})
    k->weight = random_tensor(Shape{C, C, 1, 1}, rng, 0.5, grad);
  for (auto* k : {&p.attn.q_dw, &p.attn.k_dw, &p.attn.v_dw}) {
    k->weight = random_tensor(Shape{C, 1, 3, 3}, rng, 0.5, grad);
    k->groups = C;
    k->padding = 1;
  }
  p.attn.temperature = test::uniform_tensor(Shape{heads}, rng, 0.5, 1.5, grad);
  p.attn.heads = heads;
  p.ffn = random_ffn(rng, FfnVariant::gated_dconv, C, 3, grad);
  return p;
}

inline BCUParams<double> random_bcu(std::mt19937_64& rng, std::size_t C, bool grad = false) {
  BCUParams<double> b;
  b.spatial_to_channel.weight = random_tensor(Shape{C, 1, 3, 3}, rng, 0.5, grad);
  b.spatial_to_channel.bias = random_tensor(Shape{C}, rng, 0.2, grad);
  b.spatial_to_channel.groups = C;
  b.spatial_to_channel.padding = 1;
  b.channel_to_spatial.weight = random_tensor(Shape{C, C, 3, 3}, rng, 0.5, grad);
  b.channel_to_spatial.bias = random_tensor(Shape{C}, rng, 0.2, grad);
  b.channel_to_spatial.padding = 1;
  return b;
}

inline ResampleParams<double> random_resample(std::mt19937_64& rng, ResampleDirection dir, std::size_t C,
                                              bool grad = false) {
  ResampleParams<double> r;
  r.direction = dir;
  const std::size_t out = dir == ResampleDirection::down ? C / 2 : 2 * C;
  r.pre_conv.weight = random_tensor(Shape{out, C, 3, 3}, rng, 0.5, grad);
  r.pre_conv.padding = 1;
  return r;
}

inline void zero(Tensor<double>& t) {
  for (auto& v : t.data()) v = 0.0;
}

}  // namespace xf::test
