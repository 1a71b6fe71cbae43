#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xformer/ops.hpp"

namespace xf::test {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = false) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  if (grad) t.set_requires_grad(true);
  return t;
}

template <typename T = double>
Tensor<T> uniform_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi, bool grad = false) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  if (grad) t.set_requires_grad(true);
  return t;
}

struct GradReport {
  double worst = 0.0;
  std::string where;
};

/// Compares reverse-mode gradients of `f` with central differences on every
/// leaf, sampling at most `samples` elements per leaf. `f` must rebuild its
/// graph on each call and return a scalar. Errors are max-abs differences
/// normalised by the larger of the two gradient magnitudes on the sample.
inline GradReport check_gradients(const std::function<Tensor<double>()>& f,
                                  std::vector<std::pair<std::string, Tensor<double>>> leaves,
                                  std::mt19937_64& rng, std::size_t samples = 24, double h = 1e-4,
                                  double floor = 1e-7) {
  for (auto& [name, t] : leaves) t.zero_grad();
  f().backward();
  GradReport report;
  for (auto& [name, t] : leaves) {
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > samples) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples);
    }
    std::vector<double> analytic, numeric;
    for (std::size_t i : idx) {
      analytic.push_back(t.grad()[i]);
      NoGradGuard guard;
      const double saved = t[i];
      t[i] = saved + h;
      const double up = f().item();
      t[i] = saved - h;
      const double down = f().item();
      t[i] = saved;
      numeric.push_back((up - down) / (2 * h));
    }
    const double err = relative_error<double>(analytic, numeric, floor);
    if (err > report.worst) {
      report.worst = err;
      report.where = name;
    }
  }
  return report;
}

/// Random linear functional of `out`, a smooth scalar for gradient checks.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& weights) {
  return sum(mul(out, weights));
}

inline bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline bool bitwise_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace xf::test
