#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "support.hpp"

using namespace xf;
using test::random_tensor;

namespace {

// Direct summation over the kernel footprint; zero outside the input.
Tensor<double> conv_reference(const Tensor<double>& x, const ConvKernel<double>& k) {
  const long H = x.extent(0), W = x.extent(1), Cin = x.extent(2);
  const long Cout = k.weight.extent(0), cig = k.weight.extent(1), kh = k.weight.extent(2), kw = k.weight.extent(3);
  const long s = k.stride, p = k.padding, cog = Cout / static_cast<long>(k.groups);
  const long Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  Tensor<double> out(Shape{static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo), static_cast<std::size_t>(Cout)});
  for (long y = 0; y < Ho; ++y)
    for (long xx = 0; xx < Wo; ++xx)
      for (long o = 0; o < Cout; ++o) {
        double acc = k.bias.defined() ? k.bias[o] : 0.0;
        const long g = o / cog;
        for (long ic = 0; ic < cig; ++ic)
          for (long a = 0; a < kh; ++a)
            for (long b = 0; b < kw; ++b) {
              const long iy = y * s + a - p, ix = xx * s + b - p;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += k.weight[((o * cig + ic) * kh + a) * kw + b] * x[(iy * W + ix) * Cin + g * cig + ic];
            }
        out[(y * Wo + xx) * Cout + o] = acc;
      }
  (void)Cin;
  return out;
}

ConvKernel<double> random_conv(std::mt19937_64& rng, std::size_t cin, std::size_t cout, std::size_t k,
                               std::size_t groups, std::size_t stride, std::size_t pad, bool bias,
                               bool grad = false) {
  ConvKernel<double> c;
  c.weight = random_tensor(Shape{cout, cin / groups, k, k}, rng, 0.5, grad);
  if (bias) c.bias = random_tensor(Shape{cout}, rng, 0.5, grad);
  c.stride = stride;
  c.padding = pad;
  c.groups = groups;
  return c;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 with padding 1") {
  Tensor<double> x(Shape{3, 3, 1}, 1.0);
  ConvKernel<double> k;
  k.weight = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  k.padding = 1;
  auto y = conv2d(x, k);
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK(y[1] == 6.0);
}

TEST_CASE("conv2d: centred delta kernel is the identity") {
  std::mt19937_64 rng(1);
  auto x = random_tensor(Shape{5, 4, 3}, rng);
  ConvKernel<double> k;
  k.weight = Tensor<double>(Shape{3, 3, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k.weight[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  k.padding = 1;
  CHECK(test::bitwise_equal(conv2d(x, k), x));
}

TEST_CASE("conv2d: zero depthwise kernel leaves only the bias") {
  std::mt19937_64 rng(2);
  auto x = random_tensor(Shape{4, 4, 3}, rng);
  ConvKernel<double> k;
  k.weight = Tensor<double>(Shape{3, 1, 3, 3}, 0.0);
  k.bias = Tensor<double>(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  k.padding = 1;
  k.groups = 3;
  auto y = conv2d(x, k);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == k.bias[i % 3]);
}

TEST_CASE("conv2d agrees with nested-loop summation on random cases") {
  std::mt19937_64 rng(11);
  struct Case {
    std::size_t h, w, cin, cout, k, groups, stride, pad;
    bool bias;
  };
  const std::vector<Case> cases{
      {5, 5, 3, 4, 3, 1, 1, 1, true}, {5, 5, 2, 2, 3, 2, 1, 1, false}, {5, 5, 4, 4, 3, 4, 1, 1, true},
      {5, 5, 3, 6, 1, 1, 1, 0, true}, {5, 5, 4, 6, 3, 2, 2, 1, false}, {5, 5, 1, 3, 5, 1, 1, 2, true},
      {5, 5, 3, 2, 3, 1, 2, 0, true}, {6, 5, 6, 3, 3, 3, 1, 1, true},
  };
  for (int rep = 0; rep < 5; ++rep) {
    for (const auto& c : cases) {
      auto x = random_tensor(Shape{c.h, c.w, c.cin}, rng);
      auto k = random_conv(rng, c.cin, c.cout, c.k, c.groups, c.stride, c.pad, c.bias);
      auto got = conv2d(x, k), want = conv_reference(x, k);
      REQUIRE(got.shape() == want.shape());
      CHECK(relative_error<double>(got.data(), want.data()) <= 1e-6);
    }
  }
}

TEST_CASE("conv2d errors") {
  Tensor<double> x(Shape{4, 4, 3});
  ConvKernel<double> k;
  k.weight = Tensor<double>(Shape{2, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, k), DimensionError);
  k.weight = Tensor<double>(Shape{3, 1, 3, 3});
  k.groups = 2;
  CHECK_THROWS_AS(conv2d(x, k), ConfigError);
  k.groups = 1;
  k.weight = Tensor<double>(Shape{3, 3, 5, 5});
  CHECK_THROWS_AS(conv2d(x, k), DimensionError);
}

TEST_CASE("layer_norm examples") {
  Tensor<double> x(Shape{2, 3}, 7.0);
  Tensor<double> ones(Shape{3}, 1.0), zeros(Shape{3}, 0.0);
  const auto flat = layer_norm(x, ones, zeros);
  for (double v : flat.data()) CHECK(v == 0.0);

  Tensor<double> pair(Shape{1, 2}, std::vector<double>{1.0, 3.0});
  auto y = layer_norm(pair, Tensor<double>(Shape{2}, 1.0), Tensor<double>(Shape{2}, 0.0), 1e-12);
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-10));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-10));

  std::mt19937_64 rng(3);
  auto r = random_tensor(Shape{4, 3}, rng);
  const auto shifted = layer_norm(r, zeros, Tensor<double>(Shape{3}, 5.0));
  for (double v : shifted.data()) CHECK(v == 5.0);

  CHECK_THROWS_AS(layer_norm(r, Tensor<double>(Shape{4}, 1.0), Tensor<double>()), DimensionError);
}

TEST_CASE("layer_norm output has zero mean and unit variance before the affine map") {
  std::mt19937_64 rng(4);
  auto x = random_tensor(Shape{6, 16}, rng, 3.0);
  auto y = layer_norm(x, Tensor<double>(Shape{16}, 1.0), Tensor<double>());
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("softmax examples") {
  Tensor<double> u(Shape{1, 4}, 0.3);
  const auto su = softmax(u, 1);
  for (double v : su.data()) CHECK(v == doctest::Approx(0.25));
  Tensor<double> x(Shape{2}, std::vector<double>{0.0, std::log(2.0)});
  auto y = softmax(x, 0);
  CHECK(y[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK_THROWS_AS(softmax(x, 1), UsageError);
}

TEST_CASE("softmax is shift invariant and stable for large inputs") {
  std::mt19937_64 rng(5);
  auto x = random_tensor(Shape{3, 5, 7}, rng, 1e4);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    const Shape& s = x.shape();
    const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? s[2] : s[1] * s[2]);
    const std::size_t n = s[axis], outer = x.numel() / (n * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0;
        for (std::size_t k = 0; k < n; ++k) {
          const double v = y[(o * n + k) * inner + i];
          CHECK(std::isfinite(v));
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
    const auto r = random_tensor(Shape{3, 5, 7}, rng);
    const auto base = softmax(r, axis), shifted = softmax(add_scalar(r, 2.5), axis);
    CHECK(relative_error<double>(base.data(), shifted.data()) < 1e-14);
  }
}

TEST_CASE("pixel_unshuffle ordering and shapes") {
  Tensor<double> x(Shape{2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  auto y = pixel_unshuffle(x, 2);
  CHECK(y.shape() == Shape{1, 1, 4});
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{1, 2, 3, 4});

  // two channels: (dy, dx, c) with c fastest
  Tensor<double> x2(Shape{2, 2, 2}, std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40});
  auto y2 = pixel_unshuffle(x2, 2);
  CHECK(std::vector<double>(y2.data().begin(), y2.data().end()) ==
        std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40});

  CHECK(pixel_unshuffle(Tensor<double>(Shape{16, 16, 48}), 2).shape() == Shape{8, 8, 192});
  CHECK_THROWS_AS(pixel_unshuffle(Tensor<double>(Shape{3, 4, 1}), 2), DimensionError);
  CHECK_THROWS_AS(pixel_shuffle(Tensor<double>(Shape{3, 4, 3}), 2), DimensionError);
}

TEST_CASE("pixel_shuffle inverts pixel_unshuffle") {
  std::mt19937_64 rng(6);
  for (std::size_t r : {2, 3, 4}) {
    for (std::size_t c : {1, 3, 5}) {
      auto x = random_tensor(Shape{2 * r, 3 * r, c}, rng);
      CHECK(test::bitwise_equal(pixel_shuffle(pixel_unshuffle(x, r), r), x));
      auto z = random_tensor(Shape{2, 3, c * r * r}, rng);
      CHECK(test::bitwise_equal(pixel_unshuffle(pixel_shuffle(z, r), r), z));
    }
  }
}

TEST_CASE("l1_loss examples") {
  std::mt19937_64 rng(7);
  auto a = random_tensor(Shape{3, 4}, rng);
  CHECK(l1_loss(a, a).item() == 0.0);
  CHECK(l1_loss(add_scalar(a, -0.75), a).item() == doctest::Approx(0.75).epsilon(1e-14));
  Tensor<double> p(Shape{2}, std::vector<double>{0, 1}), t(Shape{2}, std::vector<double>{1, 3});
  CHECK(l1_loss(p, t).item() == 1.5);
  CHECK_THROWS_AS(l1_loss(p, Tensor<double>(Shape{3})), DimensionError);
}

TEST_CASE("l1_loss subgradient is zero at ties") {
  Tensor<double> p(Shape{3}, std::vector<double>{1.0, 2.0, 0.0});
  Tensor<double> t(Shape{3}, std::vector<double>{1.0, 1.0, 1.0});
  p.set_requires_grad(true);
  l1_loss(p, t).backward();
  CHECK(p.grad()[0] == 0.0);
  CHECK(p.grad()[1] == doctest::Approx(1.0 / 3.0));
  CHECK(p.grad()[2] == doctest::Approx(-1.0 / 3.0));
}

TEST_CASE("gelu uses the exact erf form") {
  Tensor<double> x(Shape{3}, std::vector<double>{-1.0, 0.0, 1.0});
  auto y = gelu(x);
  CHECK(y[0] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
}

TEST_CASE("bmm matches a naive triple loop") {
  std::mt19937_64 rng(8);
  auto a = random_tensor(Shape{3, 4, 5}, rng), b = random_tensor(Shape{3, 5, 2}, rng);
  auto bt = random_tensor(Shape{3, 2, 5}, rng);
  auto c = bmm(a, b), ct = bmm(a, bt, true);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double s = 0, st = 0;
        for (std::size_t k = 0; k < 5; ++k) {
          s += a[(n * 4 + i) * 5 + k] * b[(n * 5 + k) * 2 + j];
          st += a[(n * 4 + i) * 5 + k] * bt[(n * 2 + j) * 5 + k];
        }
        CHECK(c[(n * 4 + i) * 2 + j] == doctest::Approx(s).epsilon(1e-13));
        CHECK(ct[(n * 4 + i) * 2 + j] == doctest::Approx(st).epsilon(1e-13));
      }
  CHECK_THROWS_AS(bmm(a, a), DimensionError);
}

TEST_CASE("roll2d, reflect padding and crop") {
  Tensor<double> x(Shape{2, 3, 1}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto r = roll2d(x, 1, 1);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{6, 4, 5, 3, 1, 2});
  CHECK(test::bitwise_equal(roll2d(roll2d(x, -1, 2), 1, -2), x));

  auto p = reflect_pad2d(x, 1, 2);
  CHECK(p.shape() == Shape{3, 5, 1});
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) ==
        std::vector<double>{1, 2, 3, 2, 1, 4, 5, 6, 5, 4, 1, 2, 3, 2, 1});
  CHECK(test::bitwise_equal(crop2d(p, 2, 3), x));
  CHECK(p.same_storage(reflect_pad2d(p, 0, 0)));
  CHECK_THROWS_AS(crop2d(x, 3, 1), DimensionError);

  CHECK(reflect_index(-1, 4) == 1);
  CHECK(reflect_index(4, 4) == 2);
  CHECK(reflect_index(7, 4) == 1);
  CHECK(reflect_index(5, 1) == 0);
}

TEST_CASE("gather, reshape, concat and slice") {
  Tensor<double> x(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  auto g = gather(x, Shape{3}, {3, 0, 3});
  CHECK(std::vector<double>(g.data().begin(), g.data().end()) == std::vector<double>{4, 1, 4});
  CHECK_THROWS_AS(gather(x, Shape{1}, {4}), DimensionError);
  CHECK_THROWS_AS(reshape(x, Shape{3}), DimensionError);
  auto c = concat_last(x, Tensor<double>(Shape{2, 1}, 9.0));
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 9, 3, 4, 9});
  auto s = slice_last(c, 1, 2);
  CHECK(std::vector<double>(s.data().begin(), s.data().end()) == std::vector<double>{2, 9, 4, 9});
  CHECK_THROWS_AS(slice_last(c, 2, 2), DimensionError);
}

TEST_CASE("add_tiled and scale_batches broadcast as documented") {
  Tensor<double> x(Shape{2, 3}, 1.0), b(Shape{3}, std::vector<double>{1, 2, 3});
  auto y = add_tiled(x, b);
  CHECK(y[4] == 3.0);
  CHECK_THROWS_AS(add_tiled(x, Tensor<double>(Shape{4})), DimensionError);
  auto z = scale_batches(x, Tensor<double>(Shape{2}, std::vector<double>{2, -1}));
  CHECK(z[0] == 2.0);
  CHECK(z[5] == -1.0);
}

TEST_CASE("l2_normalize gives unit rows and survives zero rows") {
  Tensor<double> x(Shape{2, 2}, std::vector<double>{3, 4, 0, 0});
  auto y = l2_normalize(x);
  CHECK(y[0] == doctest::Approx(0.6));
  CHECK(y[1] == doctest::Approx(0.8));
  CHECK(y[2] == 0.0);
}

TEST_CASE("every differentiable op matches central differences") {
  std::mt19937_64 rng(2024);
  using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
  struct OpCase {
    std::string name;
    std::vector<Shape> shapes;
    Fn fn;
    bool positive = false;
  };
  const std::vector<OpCase> cases{
      {"add", {{3, 4}, {3, 4}}, [](const auto& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const auto& v) { return mul(v[0], v[1]); }},
      {"scale", {{5}}, [](const auto& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {{5}}, [](const auto& v) { return add_scalar(v[0], 0.3); }},
      {"reciprocal", {{5}}, [](const auto& v) { return reciprocal(v[0]); }, true},
      {"gelu", {{2, 6}}, [](const auto& v) { return gelu(v[0]); }},
      {"add_tiled", {{4, 3}, {3}}, [](const auto& v) { return add_tiled(v[0], v[1]); }},
      {"scale_batches", {{2, 3, 2}, {2}}, [](const auto& v) { return scale_batches(v[0], v[1]); }},
      {"sum", {{3, 3}}, [](const auto& v) { return sum(v[0]); }},
      {"mean", {{3, 3}}, [](const auto& v) { return mean(v[0]); }},
      {"l1_loss", {{3, 4}, {3, 4}}, [](const auto& v) { return l1_loss(v[0], v[1]); }},
      {"linear", {{2, 3, 4}, {5, 4}, {5}},
       [](const auto& v) { return linear(v[0], Linear<double>{v[1], v[2]}); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](const auto& v) { return layer_norm(v[0], v[1], v[2]); }},
      {"layer_norm_bias_free", {{3, 5}, {5}}, [](const auto& v) { return layer_norm(v[0], v[1], Tensor<double>()); }},
      {"softmax_last", {{3, 4}}, [](const auto& v) { return softmax(v[0], 1); }},
      {"softmax_first", {{3, 4}}, [](const auto& v) { return softmax(v[0], 0); }},
      {"l2_normalize", {{3, 4}}, [](const auto& v) { return l2_normalize(v[0]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 2}}, [](const auto& v) { return bmm(v[0], v[1]); }},
      {"bmm_t", {{2, 3, 4}, {2, 2, 4}}, [](const auto& v) { return bmm(v[0], v[1], true); }},
      {"gather", {{2, 3}}, [](const auto& v) { return gather(v[0], Shape{4}, {5, 0, 5, 2}); }},
      {"reshape", {{2, 3}}, [](const auto& v) { return reshape(v[0], Shape{3, 2}); }},
      {"concat_last", {{2, 2}, {2, 3}}, [](const auto& v) { return concat_last(v[0], v[1]); }},
      {"slice_last", {{2, 5}}, [](const auto& v) { return slice_last(v[0], 1, 3); }},
      {"pixel_unshuffle", {{4, 6, 2}}, [](const auto& v) { return pixel_unshuffle(v[0], 2); }},
      {"pixel_shuffle", {{2, 3, 8}}, [](const auto& v) { return pixel_shuffle(v[0], 2); }},
      {"roll2d", {{3, 4, 2}}, [](const auto& v) { return roll2d(v[0], 1, -3); }},
      {"reflect_pad2d", {{3, 4, 2}}, [](const auto& v) { return reflect_pad2d(v[0], 2, 3); }},
      {"crop2d", {{3, 4, 2}}, [](const auto& v) { return crop2d(v[0], 2, 3); }},
      {"conv2d", {{5, 5, 3}, {4, 3, 3, 3}, {4}},
       [](const auto& v) { return conv2d(v[0], ConvKernel<double>{v[1], v[2], 1, 1, 1}); }},
      {"conv2d_strided", {{6, 5, 2}, {3, 2, 3, 3}},
       [](const auto& v) { return conv2d(v[0], ConvKernel<double>{v[1], {}, 2, 1, 1}); }},
      {"conv2d_grouped", {{4, 4, 4}, {6, 2, 3, 3}, {6}},
       [](const auto& v) { return conv2d(v[0], ConvKernel<double>{v[1], v[2], 1, 1, 2}); }},
      {"conv2d_depthwise", {{4, 5, 3}, {3, 1, 3, 3}},
       [](const auto& v) { return conv2d(v[0], ConvKernel<double>{v[1], {}, 1, 1, 3}); }},
      {"conv2d_pointwise", {{3, 3, 4}, {2, 4, 1, 1}},
       [](const auto& v) { return conv2d(v[0], ConvKernel<double>{v[1], {}, 1, 0, 1}); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (int seed = 0; seed < 3; ++seed) {
      std::vector<Tensor<double>> inputs;
      std::vector<std::pair<std::string, Tensor<double>>> leaves;
      for (std::size_t i = 0; i < c.shapes.size(); ++i) {
        auto t = c.positive ? test::uniform_tensor(c.shapes[i], rng, 0.5, 2.0, true)
                            : random_tensor(c.shapes[i], rng, 1.0, true);
        inputs.push_back(t);
        leaves.emplace_back(c.name + "[" + std::to_string(i) + "]", t);
      }
      const Tensor<double> probe = c.fn(inputs).detach();
      const auto w = random_tensor(probe.shape(), rng);
      const auto report = test::check_gradients([&] { return test::project(c.fn(inputs), w); }, leaves, rng);
      CAPTURE(report.where);
      CHECK(report.worst <= 1e-3);
    }
  }
}
