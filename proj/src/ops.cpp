#include "xformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace xf {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

template <typename T>
using Backward = std::function<void(detail::TensorImpl<T>&)>;

// Attach a tape node to `out` when recording is on and any input needs grad.
template <typename T>
Tensor<T> record(Tensor<T> out, std::vector<ImplPtr<T>> inputs, Backward<T> backward) {
  if (!GradMode::enabled()) return out;
  const bool needed = std::any_of(inputs.begin(), inputs.end(),
                                  [](const ImplPtr<T>& p) { return p && p->requires_grad; });
  if (!needed) return out;
  auto node = std::make_shared<detail::GradNode<T>>();
  for (auto& p : inputs) {
    if (p) node->inputs.push_back(std::move(p));
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T>
T* grad_of(const ImplPtr<T>& p) {
  return (p && p->requires_grad) ? p->grad_buffer() : nullptr;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

}  // namespace

std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  auto pa = a.impl(), pb = b.impl();
  return record<T>(std::move(out), {pa, pb}, [pa, pb](detail::TensorImpl<T>& o) {
    const T* g = o.grad.data();
    if (T* ga = grad_of(pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    if (T* gb = grad_of(pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += g[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  auto pa = a.impl(), pb = b.impl();
  return record<T>(std::move(out), {pa, pb}, [pa, pb](detail::TensorImpl<T>& o) {
    const T* g = o.grad.data();
    if (T* ga = grad_of(pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
    if (T* gb = grad_of(pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  auto pa = a.impl(), pb = b.impl();
  return record<T>(std::move(out), {pa, pb}, [pa, pb](detail::TensorImpl<T>& o) {
    const T* g = o.grad.data();
    const std::size_t n = o.grad.size();
    if (T* ga = grad_of(pa)) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb->data[i];
    if (T* gb = grad_of(pb)) for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa->data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px, factor](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + value;
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T(1) / x[i];
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] -= o.grad[i] * o.data[i] * o.data[i];
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  }
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px, inv_sqrt2](detail::TensorImpl<T>& o) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T v = px->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt_2pi;
      gx[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t nb = b.numel();
  if (x.numel() % nb != 0) {
    throw DimensionError("add_tiled: " + shape_str(x.shape()) + " is not a tiling of " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + b[i % nb];
  auto px = x.impl(), pb = b.impl();
  return record<T>(std::move(out), {px, pb}, [px, pb, nb](detail::TensorImpl<T>& o) {
    if (T* gx = grad_of(px)) for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    if (T* gb = grad_of(pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % nb] += o.grad[i];
  });
}

template <typename T>
Tensor<T> scale_batches(const Tensor<T>& x, const Tensor<T>& s) {
  const std::size_t batches = x.extent(0);
  if (s.numel() != batches) {
    throw DimensionError("scale_batches: " + shape_str(s.shape()) + " vs leading extent of " +
                         shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / batches;
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] = x[b * inner + i] * s[b];
  }
  auto px = x.impl(), ps = s.impl();
  return record<T>(std::move(out), {px, ps}, [px, ps, batches, inner](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    T* gs = grad_of(ps);
    for (std::size_t b = 0; b < batches; ++b) {
      T acc = 0;
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = b * inner + i;
        if (gx) gx[k] += o.grad[k] * ps->data[b];
        acc += o.grad[k] * px->data[k];
      }
      if (gs) gs[b] += acc;
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto px = x.impl();
  return record<T>(Tensor<T>::scalar(acc), {px}, [px](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same_shape(pred, target, "l1_loss");
  const std::size_t n = pred.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(pred[i] - target[i]);
  auto pp = pred.impl(), pt = target.impl();
  return record<T>(Tensor<T>::scalar(acc / static_cast<T>(n)), {pp, pt},
                   [pp, pt, n](detail::TensorImpl<T>& o) {
                     const T g = o.grad[0] / static_cast<T>(n);
                     T* gp = grad_of(pp);
                     T* gt = grad_of(pt);
                     for (std::size_t i = 0; i < n; ++i) {
                       const T d = pp->data[i] - pt->data[i];
                       const T s = d > 0 ? g : (d < 0 ? -g : T(0));
                       if (gp) gp[i] += s;
                       if (gt) gt[i] -= s;
                     }
                   });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Linear<T>& map) {
  const auto& w = map.weight;
  require_rank(w, 2, "linear weight");
  const std::size_t in = w.extent(1), outc = w.extent(0);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  if (map.bias.defined() && map.bias.numel() != outc) {
    throw DimensionError("linear: bias " + shape_str(map.bias.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outc;
  Tensor<T> out(shape);
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* od = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * in;
    for (std::size_t o = 0; o < outc; ++o) {
      const T* wr = wd + o * in;
      T acc = map.bias.defined() ? map.bias[o] : T(0);
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      od[r * outc + o] = acc;
    }
  }
  auto px = x.impl(), pw = w.impl(), pb = map.bias.impl();
  return record<T>(std::move(out), {px, pw, pb}, [px, pw, pb, rows, in, outc](detail::TensorImpl<T>& o) {
    const T* g = o.grad.data();
    const T* xd = px->data.data();
    const T* wd = pw->data.data();
    if (T* gx = grad_of(px)) {
      for (std::size_t r = 0; r < rows; ++r) {
        T* gxr = gx + r * in;
        for (std::size_t k = 0; k < outc; ++k) {
          const T gv = g[r * outc + k];
          const T* wr = wd + k * in;
          for (std::size_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
        }
      }
    }
    if (T* gw = grad_of(pw)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xd + r * in;
        for (std::size_t k = 0; k < outc; ++k) {
          const T gv = g[r * outc + k];
          T* gwr = gw + k * in;
          for (std::size_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
        }
      }
    }
    if (T* gb = grad_of(pb)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < outc; ++k) gb[k] += g[r * outc + k];
    }
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvKernel<T>& k) {
  require_rank(x, 3, "conv2d input");
  require_rank(k.weight, 4, "conv2d weight");
  const std::size_t H = x.extent(0), W = x.extent(1), Cin = x.extent(2);
  const std::size_t Cout = k.weight.extent(0), cin_g = k.weight.extent(1);
  const std::size_t kh = k.weight.extent(2), kw = k.weight.extent(3);
  const std::size_t groups = k.groups, stride = k.stride, pad = k.padding;
  if (groups == 0 || stride == 0) throw ConfigError("conv2d: groups and stride must be positive");
  if (Cin % groups != 0 || Cout % groups != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(Cin) + "->" + std::to_string(Cout) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (cin_g * groups != Cin) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(k.weight.shape()) + " with groups " + std::to_string(groups));
  }
  if (H + 2 * pad < kh || W + 2 * pad < kw) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel " +
                         shape_str(k.weight.shape()));
  }
  if (k.bias.defined() && k.bias.numel() != Cout) {
    throw DimensionError("conv2d: bias " + shape_str(k.bias.shape()) + " vs " +
                         std::to_string(Cout) + " output channels");
  }
  const std::size_t cout_g = Cout / groups;
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;

  // wt[(ky, kx, ic, co_local)] keeps the innermost loop contiguous.
  std::vector<T> wt(kh * kw * Cin * cout_g);
  const auto wd = k.weight.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t co = 0; co < cout_g; ++co)
      for (std::size_t ci = 0; ci < cin_g; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            wt[((ky * kw + kx) * Cin + g * cin_g + ci) * cout_g + co] =
                wd[(((g * cout_g + co) * cin_g + ci) * kh + ky) * kw + kx];
          }

  Tensor<T> out(Shape{Ho, Wo, Cout});
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      T* orow = od + (oy * Wo + ox) * Cout;
      if (k.bias.defined()) {
        for (std::size_t c = 0; c < Cout; ++c) orow[c] = k.bias[c];
      }
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(W)) continue;
          const T* xin = xd + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin;
          const T* wk = wt.data() + (ky * kw + kx) * Cin * cout_g;
          if (cout_g == 1 && cin_g == 1) {
            for (std::size_t c = 0; c < Cin; ++c) orow[c] += xin[c] * wk[c];
            continue;
          }
          for (std::size_t g = 0; g < groups; ++g) {
            T* og = orow + g * cout_g;
            for (std::size_t ci = 0; ci < cin_g; ++ci) {
              const T v = xin[g * cin_g + ci];
              const T* wrow = wk + (g * cin_g + ci) * cout_g;
              for (std::size_t co = 0; co < cout_g; ++co) og[co] += v * wrow[co];
            }
          }
        }
      }
    }
  }

  auto px = x.impl(), pw = k.weight.impl(), pb = k.bias.impl();
  return record<T>(
      std::move(out), {px, pw, pb},
      [px, pw, pb, wt = std::move(wt), H, W, Cin, Cout, cin_g, cout_g, kh, kw, groups, stride, pad,
       Ho, Wo](detail::TensorImpl<T>& o) {
        const T* g = o.grad.data();
        const T* xd = px->data.data();
        T* gx = grad_of(px);
        T* gw = grad_of(pw);
        std::vector<T> gwt(gw ? wt.size() : 0, T(0));
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const T* grow = g + (oy * Wo + ox) * Cout;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                const std::size_t pix = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
                const T* xin = xd + pix * Cin;
                const std::size_t kbase = (ky * kw + kx) * Cin * cout_g;
                for (std::size_t gi = 0; gi < groups; ++gi) {
                  const T* gg = grow + gi * cout_g;
                  for (std::size_t ci = 0; ci < cin_g; ++ci) {
                    const std::size_t ic = gi * cin_g + ci;
                    const T* wrow = wt.data() + kbase + ic * cout_g;
                    if (gx) {
                      T acc = 0;
                      for (std::size_t co = 0; co < cout_g; ++co) acc += gg[co] * wrow[co];
                      gx[pix * Cin + ic] += acc;
                    }
                    if (gw) {
                      T* gwrow = gwt.data() + kbase + ic * cout_g;
                      const T v = xin[ic];
                      for (std::size_t co = 0; co < cout_g; ++co) gwrow[co] += v * gg[co];
                    }
                  }
                }
              }
            }
          }
        }
        if (gw) {
          for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t co = 0; co < cout_g; ++co)
              for (std::size_t ci = 0; ci < cin_g; ++ci)
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    gw[(((gi * cout_g + co) * cin_g + ci) * kh + ky) * kw + kx] +=
                        gwt[((ky * kw + kx) * Cin + gi * cin_g + ci) * cout_g + co];
                  }
        }
        if (T* gb = grad_of(pb)) {
          for (std::size_t p = 0; p < Ho * Wo; ++p)
            for (std::size_t c = 0; c < Cout; ++c) gb[c] += g[p * Cout + c];
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t C = x.shape().back();
  if (gamma.numel() != C || (beta.defined() && beta.numel() != C)) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gamma " +
                         shape_str(gamma.shape()));
  }
  const std::size_t rows = x.numel() / C;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(C);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (xr[c] - mu) * rstd[r];
      xhat[r * C + c] = h;
      out[r * C + c] = h * gamma[c] + (beta.defined() ? beta[c] : T(0));
    }
  }
  auto px = x.impl(), pg = gamma.impl(), pb = beta.impl();
  return record<T>(std::move(out), {px, pg, pb},
                   [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), rows,
                    C](detail::TensorImpl<T>& o) {
                     const T* g = o.grad.data();
                     T* gx = grad_of(px);
                     T* gg = grad_of(pg);
                     T* gb = grad_of(pb);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* gr = g + r * C;
                       const T* hr = xhat.data() + r * C;
                       T mean_g = 0, mean_gh = 0;
                       for (std::size_t c = 0; c < C; ++c) {
                         const T gh = gr[c] * pg->data[c];
                         mean_g += gh;
                         mean_gh += gh * hr[c];
                         if (gg) gg[c] += gr[c] * hr[c];
                         if (gb) gb[c] += gr[c];
                       }
                       if (!gx) continue;
                       mean_g /= static_cast<T>(C);
                       mean_gh /= static_cast<T>(C);
                       for (std::size_t c = 0; c < C; ++c) {
                         const T gh = gr[c] * pg->data[c];
                         gx[r * C + c] += rstd[r] * (gh - mean_g - hr[c] * mean_gh);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw UsageError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.extent(axis);
  for (std::size_t a = 0; a < axis; ++a) outer *= x.extent(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  }
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px, outer, inner, len](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = a * len * inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += o.grad[base + k * inner] * o.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * inner;
          gx[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  Tensor<T> out(x.shape());
  std::vector<T> denom(rows);
  std::vector<char> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t k = 0; k < len; ++k) ss += x[r * len + k] * x[r * len + k];
    const T norm = std::sqrt(ss);
    clamped[r] = norm <= eps;
    denom[r] = clamped[r] ? eps : norm;
    for (std::size_t k = 0; k < len; ++k) out[r * len + k] = x[r * len + k] / denom[r];
  }
  auto px = x.impl();
  return record<T>(std::move(out), {px},
                   [px, rows, len, denom = std::move(denom),
                    clamped = std::move(clamped)](detail::TensorImpl<T>& o) {
                     T* gx = grad_of(px);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* g = o.grad.data() + r * len;
                       const T* y = o.data.data() + r * len;
                       T dot = 0;
                       if (!clamped[r]) {
                         for (std::size_t k = 0; k < len; ++k) dot += g[k] * y[k];
                       }
                       for (std::size_t k = 0; k < len; ++k) gx[r * len + k] += (g[k] - y[k] * dot) / denom[r];
                     }
                   });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank(a, 3, "bmm lhs");
  require_rank(b, 3, "bmm rhs");
  const std::size_t B = a.extent(0), M = a.extent(1), K = a.extent(2);
  const std::size_t N = transpose_b ? b.extent(1) : b.extent(2);
  const std::size_t Kb = transpose_b ? b.extent(2) : b.extent(1);
  if (b.extent(0) != B || Kb != K) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         (transpose_b ? "^T" : ""));
  }
  Tensor<T> out(Shape{B, M, N});
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  for (std::size_t s = 0; s < B; ++s) {
    const T* as = ad + s * M * K;
    const T* bs = bd + s * K * N;
    T* os = od + s * M * N;
    if (transpose_b) {
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) {
          T acc = 0;
          for (std::size_t k = 0; k < K; ++k) acc += as[m * K + k] * bs[n * K + k];
          os[m * N + n] = acc;
        }
    } else {
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) {
          const T v = as[m * K + k];
          const T* brow = bs + k * N;
          T* orow = os + m * N;
          for (std::size_t n = 0; n < N; ++n) orow[n] += v * brow[n];
        }
    }
  }
  auto pa = a.impl(), pb = b.impl();
  return record<T>(std::move(out), {pa, pb}, [pa, pb, B, M, K, N, transpose_b](detail::TensorImpl<T>& o) {
    T* ga = grad_of(pa);
    T* gb = grad_of(pb);
    for (std::size_t s = 0; s < B; ++s) {
      const T* g = o.grad.data() + s * M * N;
      const T* as = pa->data.data() + s * M * K;
      const T* bs = pb->data.data() + s * K * N;
      if (ga) {
        T* gas = ga + s * M * K;
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t n = 0; n < N; ++n) {
            const T gv = g[m * N + n];
            if (transpose_b) {
              for (std::size_t k = 0; k < K; ++k) gas[m * K + k] += gv * bs[n * K + k];
            } else {
              for (std::size_t k = 0; k < K; ++k) gas[m * K + k] += gv * bs[k * N + n];
            }
          }
      }
      if (gb) {
        T* gbs = gb + s * K * N;
        for (std::size_t m = 0; m < M; ++m)
          for (std::size_t k = 0; k < K; ++k) {
            const T av = as[m * K + k];
            if (transpose_b) {
              for (std::size_t n = 0; n < N; ++n) gbs[n * K + k] += av * g[m * N + n];
            } else {
              for (std::size_t n = 0; n < N; ++n) gbs[k * N + n] += av * g[m * N + n];
            }
          }
      }
    }
  });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> index) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw DimensionError("gather: index out of range");
    out[i] = x[index[i]];
  }
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px, index = std::move(index)](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += o.grad[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_last: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t ca = a.shape().back(), cb = b.shape().back(), cc = ca + cb;
  const std::size_t rows = a.numel() / ca;
  Shape shape = a.shape();
  shape.back() = cc;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * ca, ca, out.data().data() + r * cc);
    std::copy_n(b.data().data() + r * cb, cb, out.data().data() + r * cc + ca);
  }
  auto pa = a.impl(), pb = b.impl();
  return record<T>(std::move(out), {pa, pb}, [pa, pb, rows, ca, cb, cc](detail::TensorImpl<T>& o) {
    T* ga = grad_of(pa);
    T* gb = grad_of(pb);
    for (std::size_t r = 0; r < rows; ++r) {
      if (ga) for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += o.grad[r * cc + c];
      if (gb) for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += o.grad[r * cc + ca + c];
    }
  });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t count) {
  const std::size_t c = x.shape().back();
  if (count == 0 || start + count > c) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", +" + std::to_string(count) +
                         ") outside " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  Shape shape = x.shape();
  shape.back() = count;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data().data() + r * c + start, count, out.data().data() + r * count);
  }
  auto px = x.impl();
  return record<T>(std::move(out), {px}, [px, rows, c, start, count](detail::TensorImpl<T>& o) {
    T* gx = grad_of(px);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < count; ++k) gx[r * c + start + k] += o.grad[r * count + k];
  });
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  require_rank(x, 3, "pixel_unshuffle");
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  if (r == 0 || H % r != 0 || W % r != 0) {
    throw DimensionError("pixel_unshuffle: " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(r));
  }
  const std::size_t Ho = H / r, Wo = W / r, Co = C * r * r;
  std::vector<std::size_t> idx(x.numel());
  for (std::size_t i = 0; i < Ho; ++i)
    for (std::size_t j = 0; j < Wo; ++j)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            idx[(i * Wo + j) * Co + (dy * r + dx) * C + c] = ((i * r + dy) * W + j * r + dx) * C + c;
          }
  return gather(x, Shape{Ho, Wo, Co}, std::move(idx));
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  require_rank(x, 3, "pixel_shuffle");
  const std::size_t H = x.extent(0), W = x.extent(1), Ci = x.extent(2);
  if (r == 0 || Ci % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(r * r));
  }
  const std::size_t C = Ci / (r * r), Ho = H * r, Wo = W * r;
  std::vector<std::size_t> idx(x.numel());
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t dy = 0; dy < r; ++dy)
        for (std::size_t dx = 0; dx < r; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            idx[((i * r + dy) * Wo + j * r + dx) * C + c] = (i * W + j) * Ci + (dy * r + dx) * C + c;
          }
  return gather(x, Shape{Ho, Wo, C}, std::move(idx));
}

template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, long dy, long dx) {
  require_rank(x, 3, "roll2d");
  const long H = static_cast<long>(x.extent(0)), W = static_cast<long>(x.extent(1));
  const std::size_t C = x.extent(2);
  std::vector<std::size_t> idx(x.numel());
  for (long i = 0; i < H; ++i) {
    const long si = ((i - dy) % H + H) % H;
    for (long j = 0; j < W; ++j) {
      const long sj = ((j - dx) % W + W) % W;
      for (std::size_t c = 0; c < C; ++c) {
        idx[(static_cast<std::size_t>(i * W + j)) * C + c] = static_cast<std::size_t>(si * W + sj) * C + c;
      }
    }
  }
  return gather(x, x.shape(), std::move(idx));
}

template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, std::size_t pad_bottom, std::size_t pad_right) {
  require_rank(x, 3, "reflect_pad2d");
  if (pad_bottom == 0 && pad_right == 0) return x;
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  const std::size_t Hp = H + pad_bottom, Wp = W + pad_right;
  std::vector<std::size_t> idx(Hp * Wp * C);
  for (std::size_t i = 0; i < Hp; ++i) {
    const std::size_t si = reflect_index(static_cast<long>(i), H);
    for (std::size_t j = 0; j < Wp; ++j) {
      const std::size_t sj = reflect_index(static_cast<long>(j), W);
      for (std::size_t c = 0; c < C; ++c) idx[(i * Wp + j) * C + c] = (si * W + sj) * C + c;
    }
  }
  return gather(x, Shape{Hp, Wp, C}, std::move(idx));
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t h, std::size_t w) {
  require_rank(x, 3, "crop2d");
  const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
  if (h > H || w > W || h == 0 || w == 0) {
    throw DimensionError("crop2d: " + std::to_string(h) + "x" + std::to_string(w) +
                         " outside " + shape_str(x.shape()));
  }
  if (h == H && w == W) return x;
  std::vector<std::size_t> idx(h * w * C);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < C; ++c) idx[(i * w + j) * C + c] = (i * W + j) * C + c;
  return gather(x, Shape{h, w, C}, std::move(idx));
}

#define XF_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                      \
  template Tensor<T> reciprocal(const Tensor<T>&);                                         \
  template Tensor<T> gelu(const Tensor<T>&);                                               \
  template Tensor<T> add_tiled(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> scale_batches(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> mean(const Tensor<T>&);                                               \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> linear(const Tensor<T>&, const Linear<T>&);                           \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvKernel<T>&);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);  \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                    \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                        \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::vector<std::size_t>);            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> roll2d(const Tensor<T>&, long, long);                                 \
  template Tensor<T> reflect_pad2d(const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> crop2d(const Tensor<T>&, std::size_t, std::size_t);

XF_INSTANTIATE_OPS(float)
XF_INSTANTIATE_OPS(double)

}  // namespace xf
