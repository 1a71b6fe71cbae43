#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xformer/image.hpp"
#include "xformer/network.hpp"

namespace xf {

struct ProgressivePhase {
  std::size_t start_iter = 0;
  std::size_t batch = 1;
  std::size_t patch = 64;
  bool operator==(const ProgressivePhase&) const = default;
};

struct TrainPlan {
  std::size_t total_iters = 300000;
  double lr0 = 3e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double adam_eps = 1e-8;
  std::vector<ProgressivePhase> progressive{{0, 64, 128},     {92000, 40, 160}, {156000, 32, 192},
                                            {204000, 16, 256}, {240000, 8, 320}, {276000, 8, 384}};
  double noise_sigma = 25.0;
  std::uint64_t seed = 0;
  std::size_t val_every = 1000;         // 0: validate only after the last iteration
  std::size_t checkpoint_every = 5000;  // 0: checkpoint only at the end

  /// Throws ConfigError on any inconsistency.
  void validate() const;
  bool operator==(const TrainPlan&) const = default;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;

  /// Zero moments shaped like `params`.
  static OptimizerState zeros_like(std::span<const Tensor<T>> params);
};

/// One AdamW update using each parameter's accumulated gradient. Decoupled
/// decay p -= lr*wd*p, then the bias-corrected Adam step. A non-finite
/// gradient throws NumericError before anything is modified.
template <typename T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr, const TrainPlan& plan);

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * iter / total)) / 2.
double cosine_lr(std::size_t iter, const TrainPlan& plan);

/// (batch, patch) of the last phase with start_iter <= iter.
std::pair<std::size_t, std::size_t> progressive_lookup(std::size_t iter, const TrainPlan& plan);

/// img + N(0, (sigma_255/255)^2) per sample, not clipped.
Image add_gaussian_noise(const Image& img, double sigma_255, std::mt19937_64& rng);

/// k in [0, 8): rotate k%4 quarter turns counter-clockwise, then mirror left-right when k >= 4.
Image apply_dihedral(const Image& img, unsigned k);

/// Uniformly chosen dihedral transform of a square patch.
Image augment(const Image& img, std::mt19937_64& rng);

/// 10 log10(peak^2 / MSE), 100 dB when the images are equal.
double psnr(const Image& a, const Image& b, double peak = 1.0);

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03) over valid
/// positions, averaged per channel.
double ssim(const Image& a, const Image& b, double peak = 1.0);

struct EvalRow {
  std::string name;
  double psnr_noisy = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr_noisy = 0.0;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void write_csv(std::ostream& out) const;
};

/// Noise for image i is drawn from a generator seeded by (seed, i), so scores
/// do not depend on evaluation order. Outputs are clipped to [0, 1].
EvalReport evaluate(const ModelParams<float>& model, std::span<const Image> images,
                    std::span<const std::string> names, double sigma_255, std::uint64_t seed);

struct NamedImage {
  std::string name;
  Image image;
};

/// Every png/pgm/ppm file in `dir`, sorted by file name.
std::vector<NamedImage> load_image_dir(const std::string& dir);

struct TrainOptions {
  std::string checkpoint_path;  // empty: no checkpoint files
  std::string log_path;         // empty: no CSV log
  std::string resume_path;      // empty: fresh start
  std::size_t stop_iter = 0;    // nonzero: end this call (with a checkpoint) once this many iterations are done
  std::ostream* progress = nullptr;
};

struct TrainResult {
  ModelParams<float> model;
  std::vector<double> losses;  // one per iteration run in this call
  std::size_t final_iter = 0;  // iterations completed, counting any resumed ones
};

/// Seeded training: each iteration draws crops, transforms and noise from a
/// generator keyed by (plan.seed, iter), so resumed runs continue exactly.
TrainResult train_loop(const XformerConfig& cfg, const TrainPlan& plan, std::span<const Image> train_set,
                       std::span<const Image> val_set, const TrainOptions& options = {});

}  // namespace xf
