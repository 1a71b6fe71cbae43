// xformer: describe, train, denoise and evaluate the dual-branch denoiser.
//
// Exit codes: 0 success, 2 usage/config/input errors, 3 numeric failure,
// 1 anything unexpected.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>

#include "CLI11.hpp"
#include "xformer/checkpoint.hpp"
#include "xformer/config.hpp"
#include "xformer/image.hpp"
#include "xformer/train.hpp"

namespace {

using namespace xf;

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string resume;
  std::optional<double> sigma;
  std::size_t input_size = 128;
  std::size_t stop_at = 0;
  std::string ablation;
  std::string out;
  std::string checkpoint;
  std::string input;
  std::string data;
  bool zero_output = false;
  bool tiny = false;
  std::size_t count = 40;
  std::size_t size = 64;
  std::size_t channels = 3;
};

RunConfig run_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.tiny) cfg.model = tiny_config();
  if (!o.ablation.empty()) cfg.model = ablation_variant(cfg.model, o.ablation);
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.sigma) cfg.train.noise_sigma = *o.sigma;
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

std::string human(double v) {
  char buf[32];
  if (v >= 1e9) {
    std::snprintf(buf, sizeof buf, "%.2fG", v / 1e9);
  } else if (v >= 1e6) {
    std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
  } else if (v >= 1e3) {
    std::snprintf(buf, sizeof buf, "%.2fK", v / 1e3);
  } else {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  }
  return buf;
}

int cmd_describe(const Options& o) {
  const RunConfig cfg = run_config(o);
  const XformerConfig& m = cfg.model;
  const ModelParams<float> model = build<float>(m, cfg.train.seed);
  const std::size_t params = param_count(model);
  const FlopReport flops = flop_report(m, o.input_size, o.input_size);

  std::cout << "layout " << to_string(m.layout) << ", bcu " << to_string(m.bcu) << ", shifted "
            << (m.shifted ? "yes" : "no") << ", C " << m.base_channels << ", window " << m.window << "\n";
  std::cout << "parameters " << params << " (" << human(static_cast<double>(params)) << ")\n";
  std::cout << "flops " << flops.total << " (" << human(static_cast<double>(flops.total)) << ") at "
            << m.in_channels << "x" << o.input_size << "x" << o.input_size << "\n";
  std::cout << "\nparameters by module\n";
  for (const auto& [name, n] : param_breakdown(model)) std::printf("  %-28s %12zu\n", name.c_str(), n);
  std::cout << "\nflops by module\n";
  for (const auto& [name, n] : flops.modules) {
    std::printf("  %-28s %15llu\n", name.c_str(), static_cast<unsigned long long>(n));
  }
  return 0;
}

std::vector<Image> images_of(const std::vector<NamedImage>& named) {
  std::vector<Image> out;
  for (const auto& n : named) out.push_back(n.image);
  return out;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = run_config(o);
  if (cfg.paths.data.empty()) throw UsageError("no training data directory ([paths] data)");
  const auto train_set = images_of(load_image_dir(cfg.paths.data));
  const auto val_set = cfg.paths.val.empty() ? std::vector<Image>{} : images_of(load_image_dir(cfg.paths.val));

  TrainOptions opts;
  opts.checkpoint_path = o.out.empty() ? cfg.paths.checkpoint : o.out;
  opts.log_path = cfg.paths.log;
  opts.resume_path = o.resume;
  opts.stop_iter = o.stop_at;
  for (const auto& file : {opts.checkpoint_path, opts.log_path}) {
    const auto dir = std::filesystem::path(file).parent_path();
    if (!file.empty() && !dir.empty()) std::filesystem::create_directories(dir);
  }
  opts.progress = &std::cerr;
  const TrainResult result = train_loop(cfg.model, cfg.train, train_set, val_set, opts);
  if (result.losses.empty()) {
    std::cout << "nothing to do at iteration " << result.final_iter << "\n";
  } else {
    std::cout << "trained to iteration " << result.final_iter << ", final loss " << result.losses.back() << "\n";
  }
  if (!opts.checkpoint_path.empty()) std::cout << "checkpoint " << opts.checkpoint_path << "\n";
  return 0;
}

int cmd_init(const Options& o) {
  if (o.out.empty()) throw UsageError("init needs --out");
  const RunConfig cfg = run_config(o);
  ModelParams<float> model = build<float>(cfg.model, cfg.train.seed);
  if (o.zero_output) {
    for (auto* t : {&model.output.weight, &model.output.bias}) std::fill(t->data().begin(), t->data().end(), 0.0f);
  }
  save_checkpoint(model_checkpoint(model), o.out);
  std::cout << "checkpoint " << o.out << " (" << param_count(model) << " parameters)\n";
  return 0;
}

int cmd_denoise(const Options& o) {
  const ModelParams<float> model = model_from_checkpoint(load_checkpoint(o.checkpoint));
  Image img = image_read(o.input);
  if (img.channels != model.config.in_channels) {
    throw UsageError("'" + o.input + "' has " + std::to_string(img.channels) + " channels, checkpoint expects " +
                     std::to_string(model.config.in_channels));
  }
  if (o.sigma && *o.sigma > 0.0) {
    std::mt19937_64 rng(o.seed.value_or(0));
    img = add_gaussian_noise(img, *o.sigma, rng);
  }
  NoGradGuard guard;
  image_write(clip(to_image(forward(model, to_tensor<float>(img)))), o.out);
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const ModelParams<float> model = model_from_checkpoint(load_checkpoint(o.checkpoint));
  const auto named = load_image_dir(o.data);
  if (named.empty()) throw UsageError("no images in '" + o.data + "'");
  std::vector<std::string> names;
  for (const auto& n : named) names.push_back(n.name);
  const auto images = images_of(named);
  const EvalReport report = evaluate(model, images, names, o.sigma.value_or(25.0), o.seed.value_or(0));

  std::printf("%-24s %10s %10s %8s\n", "image", "noisy_dB", "psnr_dB", "ssim");
  for (const auto& r : report.rows) {
    std::printf("%-24s %10.4f %10.4f %8.5f\n", r.name.c_str(), r.psnr_noisy, r.psnr, r.ssim);
  }
  std::printf("%-24s %10.4f %10.4f %8.5f\n", "mean", report.mean_psnr_noisy, report.mean_psnr, report.mean_ssim);
  if (!o.out.empty()) {
    std::ofstream csv(o.out, std::ios::trunc);
    if (!csv) throw IoError("cannot write '" + o.out + "'");
    report.write_csv(csv);
  }
  return 0;
}

int cmd_make_synthetic(const Options& o) {
  if (o.out.empty()) throw UsageError("make-synthetic needs --out");
  if (o.channels != 1 && o.channels != 3) throw UsageError("--channels must be 1 or 3");
  std::filesystem::create_directories(o.out);
  const std::uint64_t seed = o.seed.value_or(0);
  for (std::size_t i = 0; i < o.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu.png", i);
    image_write(synthetic_image(o.size, o.size, o.channels, seed * 100003 + i), (std::filesystem::path(o.out) / name).string());
  }
  std::cout << "wrote " << o.count << " images to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch transformer image denoiser"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", o.seed, "Random seed"); };
  auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Run config (sectioned key=value or JSON)");
    cmd->add_option("--ablation", o.ablation, "Model variant")
        ->check(CLI::IsMember({"all_stb", "all_ctb", "bcu_1", "bcu_2", "off", "no_shift"}));
    cmd->add_flag("--tiny", o.tiny, "Use the small desk-scale model instead of the configured one");
    add_seed(cmd);
  };

  auto* describe = app.add_subcommand("describe", "Parameter count, FLOPs and per-module breakdown");
  add_model(describe);
  describe->add_option("--input-size", o.input_size, "Square input extent for FLOP counting")
      ->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train from a run config");
  add_model(train);
  train->add_option("--resume", o.resume, "Checkpoint to continue from");
  train->add_option("--sigma", o.sigma, "Noise level on the 0-255 scale");
  train->add_option("--out", o.out, "Checkpoint path (overrides [paths] checkpoint)");
  train->add_option("--stop-at", o.stop_at, "Stop with a checkpoint after this many iterations");

  auto* init = app.add_subcommand("init", "Write a freshly initialised checkpoint");
  add_model(init);
  init->add_flag("--zero-output", o.zero_output, "Zero the output convolution (identity denoiser)");
  init->add_option("--out", o.out, "Checkpoint path")->required();

  auto* denoise = app.add_subcommand("denoise", "Denoise one image");
  denoise->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  denoise->add_option("--input", o.input, "Input image (png, pgm, ppm)")->required();
  denoise->add_option("--out", o.out, "Output image")->required();
  denoise->add_option("--sigma", o.sigma, "Add demo noise of this level before denoising");
  add_seed(denoise);

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM over a directory of clean images");
  eval->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", o.data, "Directory of clean images")->required();
  eval->add_option("--sigma", o.sigma, "Noise level on the 0-255 scale (default 25)");
  eval->add_option("--out", o.out, "CSV report path");
  add_seed(eval);

  auto* synth = app.add_subcommand("make-synthetic", "Write a set of synthetic training images");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of images")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "Square image extent")->check(CLI::Range(11, 4096));
  synth->add_option("--channels", o.channels, "1 or 3");
  add_seed(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*describe) return cmd_describe(o);
    if (*train) return cmd_train(o);
    if (*init) return cmd_init(o);
    if (*denoise) return cmd_denoise(o);
    if (*eval) return cmd_eval(o);
    if (*synth) return cmd_make_synthetic(o);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
