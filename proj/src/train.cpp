#include "xformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>

#include "xformer/checkpoint.hpp"

namespace xf {

void TrainPlan::validate() const {
  if (total_iters == 0) throw ConfigError("total_iters must be positive");
  if (!(lr0 > 0.0) || !(lr_min >= 0.0) || !(lr_min < lr0)) {
    throw ConfigError("learning rates need 0 <= lr_min < lr0");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0) || !(adam_eps > 0.0)) throw ConfigError("weight_decay >= 0 and adam_eps > 0 required");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (progressive.empty() || progressive.front().start_iter != 0) {
    throw ConfigError("progressive schedule must start at iteration 0");
  }
  for (std::size_t i = 0; i < progressive.size(); ++i) {
    if (progressive[i].batch == 0 || progressive[i].patch == 0) {
      throw ConfigError("progressive batch and patch must be positive");
    }
    if (i > 0 && progressive[i].start_iter <= progressive[i - 1].start_iter) {
      throw ConfigError("progressive start iterations must be strictly increasing");
    }
  }
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(std::span<const Tensor<T>> params) {
  OptimizerState state;
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), T(0));
    state.v.emplace_back(p.numel(), T(0));
  }
  return state;
}

template <typename T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr, const TrainPlan& plan) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adamw_step: optimizer state holds " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("adamw_step: moment size mismatch for parameter " + std::to_string(i));
    }
    if (!params[i].has_grad()) continue;
    for (T g : params[i].grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }

  const std::uint64_t t = ++state.step;
  const double b1 = plan.beta1, b2 = plan.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = 1.0 - lr * plan.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data();
    const bool has_grad = params[i].has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? static_cast<double>(params[i].grad()[j]) : 0.0;
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double p = static_cast<double>(data[j]) * decay;
      data[j] = static_cast<T>(p - lr * (mj / c1) / (std::sqrt(vj / c2) + plan.adam_eps));
    }
  }
}

double cosine_lr(std::size_t iter, const TrainPlan& plan) {
  if (iter > plan.total_iters) {
    throw UsageError("cosine_lr: iteration " + std::to_string(iter) + " beyond total " +
                     std::to_string(plan.total_iters));
  }
  if (iter == plan.total_iters) return plan.lr_min;
  const double phase = std::numbers::pi * static_cast<double>(iter) / static_cast<double>(plan.total_iters);
  return plan.lr_min + 0.5 * (plan.lr0 - plan.lr_min) * (1.0 + std::cos(phase));
}

std::pair<std::size_t, std::size_t> progressive_lookup(std::size_t iter, const TrainPlan& plan) {
  if (plan.progressive.empty()) throw ConfigError("progressive schedule is empty");
  const ProgressivePhase* current = &plan.progressive.front();
  for (const auto& phase : plan.progressive) {
    if (phase.start_iter <= iter) current = &phase;
  }
  return {current->batch, current->patch};
}

Image add_gaussian_noise(const Image& img, double sigma_255, std::mt19937_64& rng) {
  if (!(sigma_255 >= 0.0)) throw UsageError("noise sigma must be non-negative");
  Image out = img;
  if (sigma_255 == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma_255 / 255.0);
  for (auto& v : out.values) v = static_cast<float>(v + noise(rng));
  return out;
}

Image apply_dihedral(const Image& img, unsigned k) {
  if (k >= 8) throw UsageError("dihedral index must be in [0, 8)");
  const unsigned turns = k % 4;
  if (turns != 0 && img.height != img.width) {
    throw UsageError("rotation needs a square image, got " + std::to_string(img.height) + "x" +
                     std::to_string(img.width));
  }
  const std::size_t n = img.height, w = img.width;
  Image out = img;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t rx = k >= 4 ? w - 1 - x : x;
      std::size_t sy = y, sx = rx;
      if (turns == 1) {
        sy = rx;
        sx = n - 1 - y;
      } else if (turns == 2) {
        sy = n - 1 - y;
        sx = w - 1 - rx;
      } else if (turns == 3) {
        sy = n - 1 - rx;
        sx = y;
      }
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

Image augment(const Image& img, std::mt19937_64& rng) {
  if (img.height != img.width) throw UsageError("augment needs a square patch");
  return apply_dihedral(img, std::uniform_int_distribution<unsigned>(0, 7)(rng));
}

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": image shapes " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                         std::to_string(b.channels));
  }
}

std::vector<double> gaussian_window() {
  std::vector<double> w(11);
  double total = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * plane[y * w + x + i];
      rows[y * ow + x] = s;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
  require_same_shape(a, b, "psnr");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.values.size());
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& a, const Image& b, double peak) {
  require_same_shape(a, b, "ssim");
  if (a.height < 11 || a.width < 11) throw DimensionError("ssim needs images of at least 11x11");
  static const std::vector<double> kernel = gaussian_window();
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const std::size_t h = a.height, w = a.width, plane = h * w;
  double total = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = a.values[i * a.channels + c];
      y[i] = b.values[i * a.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, kernel), my = filter_valid(y, h, w, kernel);
    const auto exx = filter_valid(xx, h, w, kernel), eyy = filter_valid(yy, h, w, kernel);
    const auto exy = filter_valid(xy, h, w, kernel);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double sx = exx[i] - mx[i] * mx[i], sy = eyy[i] - my[i] * my[i], sxy = exy[i] - mx[i] * my[i];
      acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (sx + sy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(a.channels);
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "image,psnr_noisy,psnr,ssim\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f\n", r.psnr_noisy, r.psnr, r.ssim);
    out << r.name << buf;
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,%.6f\n", mean_psnr_noisy, mean_psnr, mean_ssim);
  out << buf;
}

namespace {

std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint64_t key, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;

Image restore(const ModelParams<float>& model, const Image& noisy) {
  NoGradGuard guard;
  return clip(to_image(forward(model, to_tensor<float>(noisy))));
}

}  // namespace

EvalReport evaluate(const ModelParams<float>& model, std::span<const Image> images,
                    std::span<const std::string> names, double sigma_255, std::uint64_t seed) {
  if (images.empty()) throw UsageError("evaluate: no images");
  EvalReport report;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& clean = images[i];
    if (clean.channels != model.config.in_channels) {
      throw UsageError("evaluate: image " + std::to_string(i) + " has " + std::to_string(clean.channels) +
                       " channels, model expects " + std::to_string(model.config.in_channels));
    }
    auto rng = keyed_rng(seed, i, kEvalStream);
    const Image noisy = add_gaussian_noise(clean, sigma_255, rng);
    const Image out = restore(model, noisy);
    EvalRow row;
    row.name = i < names.size() ? names[i] : std::to_string(i);
    row.psnr_noisy = psnr(noisy, clean);
    row.psnr = psnr(out, clean);
    row.ssim = ssim(out, clean);
    report.mean_psnr_noisy += row.psnr_noisy;
    report.mean_psnr += row.psnr;
    report.mean_ssim += row.ssim;
    report.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(images.size());
  report.mean_psnr_noisy /= n;
  report.mean_psnr /= n;
  report.mean_ssim /= n;
  return report;
}

std::vector<NamedImage> load_image_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw UsageError("image directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".pgm" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.filename().string(), image_read(f.string())});
  return out;
}

namespace {

std::string format_row(std::size_t iter, double lr, std::size_t batch, std::size_t patch, double loss,
                       const EvalReport* val) {
  char buf[256];
  int n = std::snprintf(buf, sizeof buf, "%zu,%.9g,%zu,%zu,%.9g,", iter, lr, batch, patch, loss);
  if (val) {
    std::snprintf(buf + n, sizeof buf - n, "%.6f,%.6f", val->mean_psnr, val->mean_ssim);
  } else {
    std::snprintf(buf + n, sizeof buf - n, ",");
  }
  return buf;
}

Checkpoint training_checkpoint(const ModelParams<float>& model, const OptimizerState<float>& state,
                               std::size_t next_iter) {
  Checkpoint ckpt = model_checkpoint(model);
  for (std::size_t i = 0; i < model.parameters.size(); ++i) {
    const auto& [path, t] = model.parameters[i];
    ckpt.records.emplace_back("optim.m." + path, Tensor<float>(t.shape(), state.m[i]));
    ckpt.records.emplace_back("optim.v." + path, Tensor<float>(t.shape(), state.v[i]));
  }
  ckpt.records.emplace_back("optim.step", Tensor<float>::scalar(static_cast<float>(state.step)));
  ckpt.records.emplace_back("train.iter", Tensor<float>::scalar(static_cast<float>(next_iter)));
  return ckpt;
}

std::size_t restore_training(const std::string& path, const XformerConfig& cfg, ModelParams<float>& model,
                             OptimizerState<float>& state) {
  const Checkpoint ckpt = load_checkpoint(path);
  ModelParams<float> loaded = model_from_checkpoint(ckpt);
  if (!(loaded.config == cfg)) throw ConfigError("checkpoint '" + path + "' was trained with a different model config");
  for (std::size_t i = 0; i < model.parameters.size(); ++i) {
    const auto& [name, t] = model.parameters[i];
    const auto src = loaded.parameters[i].second.data();
    std::copy(src.begin(), src.end(), model.parameters[i].second.data().begin());
    const Tensor<float>* m = ckpt.find("optim.m." + name);
    const Tensor<float>* v = ckpt.find("optim.v." + name);
    if (!m || !v || m->shape() != t.shape() || v->shape() != t.shape()) {
      throw IoError("checkpoint '" + path + "' lacks optimizer state for '" + name + "'");
    }
    state.m[i].assign(m->data().begin(), m->data().end());
    state.v[i].assign(v->data().begin(), v->data().end());
  }
  const Tensor<float>* step = ckpt.find("optim.step");
  const Tensor<float>* iter = ckpt.find("train.iter");
  if (!step || !iter) throw IoError("checkpoint '" + path + "' lacks training progress records");
  state.step = static_cast<std::uint64_t>(step->item());
  return static_cast<std::size_t>(iter->item());
}

}  // namespace

TrainResult train_loop(const XformerConfig& cfg, const TrainPlan& plan, std::span<const Image> train_set,
                       std::span<const Image> val_set, const TrainOptions& options) {
  cfg.validate();
  plan.validate();
  if (train_set.empty()) throw UsageError("training set is empty");
  for (const auto& img : train_set) {
    if (img.channels != cfg.in_channels) {
      throw UsageError("training image has " + std::to_string(img.channels) + " channels, model expects " +
                       std::to_string(cfg.in_channels));
    }
  }

  TrainResult result{build<float>(cfg, plan.seed), {}, 0};
  ModelParams<float>& model = result.model;
  std::vector<Tensor<float>> params;
  for (const auto& [name, t] : model.parameters) params.push_back(t);
  OptimizerState<float> state = OptimizerState<float>::zeros_like(params);

  std::size_t start = 0;
  if (!options.resume_path.empty()) start = restore_training(options.resume_path, cfg, model, state);
  if (start > plan.total_iters) throw UsageError("checkpoint is past the planned iteration count");

  std::ofstream log;
  if (!options.log_path.empty()) {
    const bool append = start > 0 && std::filesystem::exists(options.log_path);
    log.open(options.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open log '" + options.log_path + "'");
    if (!append) log << "iter,lr,batch,patch,loss,val_psnr,val_ssim\n";
  }

  const float sigma = static_cast<float>(plan.noise_sigma);
  const std::size_t end =
      options.stop_iter ? std::clamp(options.stop_iter, start, plan.total_iters) : plan.total_iters;
  for (std::size_t it = start; it < end; ++it) {
    const auto [batch, patch] = progressive_lookup(it, plan);
    const double lr = cosine_lr(it, plan);
    auto rng = keyed_rng(plan.seed, it, kTrainStream);
    std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);

    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const Image& img = train_set[pick(rng)];
      const std::size_t p = std::min({patch, img.height, img.width});
      const std::size_t y = std::uniform_int_distribution<std::size_t>(0, img.height - p)(rng);
      const std::size_t x = std::uniform_int_distribution<std::size_t>(0, img.width - p)(rng);
      const Image clean = augment(crop(img, y, x, p, p), rng);
      const Image noisy = add_gaussian_noise(clean, sigma, rng);
      const Tensor<float> loss = l1_loss(forward(model, to_tensor<float>(noisy)), to_tensor<float>(clean));
      scale(loss, 1.0f / static_cast<float>(batch)).backward();
      loss_sum += loss.item();
    }
    const double loss = loss_sum / static_cast<double>(batch);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite training loss at iteration " + std::to_string(it) + " (lr " +
                         std::to_string(lr) + ")");
    }
    adamw_step(std::span<Tensor<float>>(params), state, lr, plan);
    model.clamp_temperatures();
    model.zero_grad();
    result.losses.push_back(loss);

    const bool last = it + 1 == plan.total_iters;
    EvalReport val;
    const bool validate = !val_set.empty() && (last || (plan.val_every && (it + 1) % plan.val_every == 0));
    if (validate) val = evaluate(model, val_set, {}, plan.noise_sigma, plan.seed);
    if (log.is_open()) log << format_row(it, lr, batch, patch, loss, validate ? &val : nullptr) << '\n' << std::flush;
    if (options.progress && (validate || (it + 1) % 100 == 0 || last)) {
      *options.progress << "iter " << it + 1 << "/" << plan.total_iters << " loss " << loss;
      if (validate) *options.progress << " val_psnr " << val.mean_psnr << " val_ssim " << val.mean_ssim;
      *options.progress << std::endl;
    }
    if (!options.checkpoint_path.empty() &&
        (it + 1 == end || (plan.checkpoint_every && (it + 1) % plan.checkpoint_every == 0))) {
      save_checkpoint(training_checkpoint(model, state, it + 1), options.checkpoint_path);
    }
  }
  result.final_iter = end;
  return result;
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(std::span<Tensor<float>>, OptimizerState<float>&, double, const TrainPlan&);
template void adamw_step(std::span<Tensor<double>>, OptimizerState<double>&, double, const TrainPlan&);

}  // namespace xf
