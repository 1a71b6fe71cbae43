#include "xformer/network.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <random>

namespace xf {

std::string_view to_string(BlockLayout layout) {
  switch (layout) {
    case BlockLayout::dual: return "dual";
    case BlockLayout::all_stb: return "all_stb";
    case BlockLayout::all_ctb: return "all_ctb";
  }
  return "dual";
}

std::string_view to_string(BcuMode mode) {
  switch (mode) {
    case BcuMode::full: return "full";
    case BcuMode::dw_only: return "dw_only";
    case BcuMode::conv_only: return "conv_only";
    case BcuMode::off: return "off";
  }
  return "full";
}

BlockLayout parse_block_layout(std::string_view text) {
  if (text == "dual") return BlockLayout::dual;
  if (text == "all_stb") return BlockLayout::all_stb;
  if (text == "all_ctb") return BlockLayout::all_ctb;
  throw ConfigError("unknown block layout '" + std::string(text) + "'");
}

BcuMode parse_bcu_mode(std::string_view text) {
  if (text == "full") return BcuMode::full;
  if (text == "dw_only") return BcuMode::dw_only;
  if (text == "conv_only") return BcuMode::conv_only;
  if (text == "off") return BcuMode::off;
  throw ConfigError("unknown bcu mode '" + std::string(text) + "'");
}

std::size_t XformerConfig::level_channels(std::size_t level) const {
  return base_channels << level;
}

std::size_t XformerConfig::ffn_hidden(std::size_t channels) const {
  return static_cast<std::size_t>(std::floor(ffn_expansion * static_cast<double>(channels)));
}

void XformerConfig::validate() const {
  if (in_channels != 1 && in_channels != 3) {
    throw ConfigError("in_channels must be 1 or 3, got " + std::to_string(in_channels));
  }
  if (base_channels < 2 || base_channels % 2 != 0) {
    throw ConfigError("base_channels must be even and >= 2, got " + std::to_string(base_channels));
  }
  if (depths.size() != 7 || heads.size() != 7) {
    throw ConfigError("depths and heads need 7 entries, got " + std::to_string(depths.size()) +
                      " and " + std::to_string(heads.size()));
  }
  if (window == 0) throw ConfigError("window must be positive");
  if (!(ffn_expansion > 0) || ffn_hidden(base_channels) == 0) {
    throw ConfigError("ffn_expansion gives an empty hidden layer");
  }
  static constexpr std::array<std::size_t, 7> kLevel{0, 1, 2, 3, 2, 1, 0};
  for (std::size_t i = 0; i < 7; ++i) {
    const std::size_t c = level_channels(kLevel[i]);
    if (heads[i] == 0 || c % heads[i] != 0) {
      throw ConfigError("heads[" + std::to_string(i) + "]=" + std::to_string(heads[i]) +
                        " does not divide " + std::to_string(c) + " channels");
    }
  }
  if (refinement_heads == 0 || (2 * base_channels) % refinement_heads != 0) {
    throw ConfigError("refinement_heads must divide " + std::to_string(2 * base_channels));
  }
}

XformerConfig tiny_config(std::size_t base_channels, std::size_t window) {
  XformerConfig cfg;
  cfg.base_channels = base_channels;
  cfg.depths = {1, 1, 1, 1, 1, 1, 1};
  cfg.refinement_depth = 1;
  cfg.window = window;
  return cfg;
}

XformerConfig ablation_variant(const XformerConfig& cfg, std::string_view which) {
  XformerConfig out = cfg;
  if (which == "all_stb") {
    out.layout = BlockLayout::all_stb;
  } else if (which == "all_ctb") {
    out.layout = BlockLayout::all_ctb;
  } else if (which == "bcu_1") {
    out.bcu = BcuMode::dw_only;
  } else if (which == "bcu_2") {
    out.bcu = BcuMode::conv_only;
  } else if (which == "off") {
    out.bcu = BcuMode::off;
  } else if (which == "no_shift") {
    out.shifted = false;
  } else {
    throw UsageError("unknown ablation '" + std::string(which) +
                     "' (expected all_stb, all_ctb, bcu_1, bcu_2, off, no_shift)");
  }
  return out;
}

namespace {

enum class BlockKind { spatial, channel };

struct SiteKinds {
  BlockKind spatial_branch, channel_branch, bottleneck, refinement;
};

SiteKinds site_kinds(BlockLayout layout) {
  switch (layout) {
    case BlockLayout::all_stb:
      return {BlockKind::spatial, BlockKind::spatial, BlockKind::spatial, BlockKind::spatial};
    case BlockLayout::all_ctb:
      return {BlockKind::channel, BlockKind::channel, BlockKind::channel, BlockKind::channel};
    case BlockLayout::dual:
      break;
  }
  return {BlockKind::spatial, BlockKind::channel, BlockKind::spatial, BlockKind::channel};
}

constexpr double kInitStd = 0.02;

template <typename T>
class Builder {
 public:
  Builder(const XformerConfig& cfg, std::uint64_t seed, ModelParams<T>& model)
      : cfg_(cfg), rng_(seed), model_(model) {}

  Tensor<T> normal(const std::string& path, Shape shape, bool truncated) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, kInitStd);
    for (auto& v : t.data()) {
      double z = dist(rng_);
      while (truncated && std::abs(z) > 2 * kInitStd) z = dist(rng_);
      v = static_cast<T>(z);
    }
    return add(path, std::move(t));
  }

  Tensor<T> constant(const std::string& path, Shape shape, T value) {
    return add(path, Tensor<T>(std::move(shape), value));
  }

  ConvKernel<T> conv(const std::string& path, std::size_t in, std::size_t out, std::size_t k,
                     std::size_t groups, bool bias) {
    ConvKernel<T> c;
    c.weight = normal(path + ".weight", Shape{out, in / groups, k, k}, true);
    if (bias) c.bias = constant(path + ".bias", Shape{out}, T(0));
    c.padding = k / 2;
    c.groups = groups;
    return c;
  }

  Linear<T> linear(const std::string& path, std::size_t in, std::size_t out) {
    Linear<T> l;
    l.weight = normal(path + ".weight", Shape{out, in}, true);
    l.bias = constant(path + ".bias", Shape{out}, T(0));
    return l;
  }

  LayerNormParams<T> norm(const std::string& path, std::size_t c, bool bias) {
    LayerNormParams<T> n;
    n.gamma = constant(path + ".gamma", Shape{c}, T(1));
    if (bias) n.beta = constant(path + ".beta", Shape{c}, T(0));
    return n;
  }

  SpatialBlockParams<T> spatial_block(const std::string& path, std::size_t c, std::size_t heads,
                                      bool shifted) {
    SpatialBlockParams<T> b;
    const std::size_t G = cfg_.window, hidden = cfg_.ffn_hidden(c);
    b.norm1 = norm(path + ".norm1", c, true);
    b.attn.q = linear(path + ".attn.q", c, c);
    b.attn.k = linear(path + ".attn.k", c, c);
    b.attn.v = linear(path + ".attn.v", c, c);
    b.attn.rpe_table = normal(path + ".attn.rpe_table", Shape{(2 * G - 1) * (2 * G - 1), heads}, false);
    b.attn.out = linear(path + ".attn.out", c, c);
    b.attn.heads = heads;
    b.attn.window = G;
    b.attn.shifted = shifted;
    b.norm2 = norm(path + ".norm2", c, true);
    b.ffn.variant = FfnVariant::mlp;
    b.ffn.fc1 = linear(path + ".ffn.fc1", c, hidden);
    b.ffn.fc2 = linear(path + ".ffn.fc2", hidden, c);
    return b;
  }

  ChannelBlockParams<T> channel_block(const std::string& path, std::size_t c, std::size_t heads) {
    ChannelBlockParams<T> b;
    const std::size_t hidden = cfg_.ffn_hidden(c);
    b.norm1 = norm(path + ".norm1", c, false);
    auto& a = b.attn;
    a.q_pw = conv(path + ".attn.q_pw", c, c, 1, 1, false);
    a.q_dw = conv(path + ".attn.q_dw", c, c, 3, c, false);
    a.k_pw = conv(path + ".attn.k_pw", c, c, 1, 1, false);
    a.k_dw = conv(path + ".attn.k_dw", c, c, 3, c, false);
    a.v_pw = conv(path + ".attn.v_pw", c, c, 1, 1, false);
    a.v_dw = conv(path + ".attn.v_dw", c, c, 3, c, false);
    a.temperature = constant(path + ".attn.temperature", Shape{heads}, T(1));
    a.out = conv(path + ".attn.out", c, c, 1, 1, false);
    a.heads = heads;
    b.norm2 = norm(path + ".norm2", c, false);
    b.ffn.variant = FfnVariant::gated_dconv;
    b.ffn.project_in = conv(path + ".ffn.project_in", c, 2 * hidden, 1, 1, false);
    b.ffn.dwconv = conv(path + ".ffn.dwconv", 2 * hidden, 2 * hidden, 3, 2 * hidden, false);
    b.ffn.project_out = conv(path + ".ffn.project_out", hidden, c, 1, 1, false);
    return b;
  }

  std::vector<BlockParams<T>> stage(const std::string& path, BlockKind kind, std::size_t depth,
                                    std::size_t c, std::size_t heads) {
    std::vector<BlockParams<T>> blocks;
    for (std::size_t i = 0; i < depth; ++i) {
      const std::string p = path + "." + std::to_string(i);
      if (kind == BlockKind::spatial) {
        blocks.emplace_back(spatial_block(p, c, heads, cfg_.shifted && i % 2 == 1));
      } else {
        blocks.emplace_back(channel_block(p, c, heads));
      }
    }
    return blocks;
  }

  Branch<T> branch(const std::string& name, BlockKind kind) {
    Branch<T> b;
    for (std::size_t l = 0; l < 3; ++l) {
      const std::size_t c = cfg_.level_channels(l);
      const std::string lvl = std::to_string(l + 1);
      b.encoders[l] = stage(name + ".enc" + lvl, kind, cfg_.depths[l], c, cfg_.heads[l]);
      b.down[l].direction = ResampleDirection::down;
      b.down[l].pre_conv = conv(name + ".down" + lvl, c, c / 2, 3, 1, false);
    }
    for (std::size_t d = 0; d < 3; ++d) {
      const std::size_t l = 2 - d;  // target level index
      const std::size_t c = cfg_.level_channels(l);
      const std::string lvl = std::to_string(l + 1);
      b.up[d].direction = ResampleDirection::up;
      b.up[d].pre_conv = conv(name + ".up" + lvl, 2 * c, 4 * c, 3, 1, false);
      b.reduce[d] = conv(name + ".reduce" + lvl, 2 * c, c, 1, 1, false);
      b.decoders[d] = stage(name + ".dec" + lvl, kind, cfg_.depths[4 + d], c, cfg_.heads[4 + d]);
    }
    return b;
  }

  BCUParams<T> bcu(const std::string& path, std::size_t c) {
    BCUParams<T> p;
    if (cfg_.bcu == BcuMode::full || cfg_.bcu == BcuMode::dw_only) {
      p.spatial_to_channel = conv(path + ".dw", c, c, 3, c, false);
    }
    if (cfg_.bcu == BcuMode::full || cfg_.bcu == BcuMode::conv_only) {
      p.channel_to_spatial = conv(path + ".conv", c, c, 3, 1, false);
    }
    return p;
  }

 private:
  Tensor<T> add(const std::string& path, Tensor<T> t) {
    t.set_requires_grad(true);
    model_.parameters.emplace_back(path, t);
    return t;
  }

  const XformerConfig& cfg_;
  std::mt19937_64 rng_;
  ModelParams<T>& model_;
};

template <typename T>
Tensor<T> run_stage(Tensor<T> x, const std::vector<BlockParams<T>>& blocks) {
  for (const auto& b : blocks) x = block_forward(x, b);
  return x;
}

}  // namespace

template <typename T>
Tensor<T> ModelParams<T>::parameter(std::string_view path) const {
  for (const auto& [name, t] : parameters) {
    if (name == path) return t;
  }
  throw UsageError("no parameter named '" + std::string(path) + "'");
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& [name, t] : parameters) t.zero_grad();
}

template <typename T>
void ModelParams<T>::clamp_temperatures() {
  const std::string_view suffix = ".temperature";
  for (auto& [name, t] : parameters) {
    if (name.size() >= suffix.size() && name.ends_with(suffix)) {
      for (auto& v : t.data()) v = std::max(v, T(1e-4));
    }
  }
}

template <typename T>
ModelParams<T> build(const XformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> m;
  m.config = cfg;
  Builder<T> b(cfg, seed, m);
  const SiteKinds kinds = site_kinds(cfg.layout);
  const std::size_t C = cfg.base_channels;

  m.shallow = b.conv("shallow", cfg.in_channels, C, 3, 1, true);
  m.spatial = b.branch("spatial", kinds.spatial_branch);
  m.channel = b.branch("channel", kinds.channel_branch);
  m.bottleneck = b.stage("bottleneck", kinds.bottleneck, cfg.depths[3], cfg.level_channels(3), cfg.heads[3]);
  m.spatial.bottleneck = m.bottleneck;
  m.channel.bottleneck = m.bottleneck;
  if (cfg.bcu != BcuMode::off) {
    m.encoder_bcu[0] = b.bcu("bcu.enc1", 2 * C);
    m.encoder_bcu[1] = b.bcu("bcu.enc2", 4 * C);
    m.decoder_bcu[0] = b.bcu("bcu.dec1", 2 * C);
    m.decoder_bcu[1] = b.bcu("bcu.dec2", C);
  }
  m.refinement = b.stage("refinement", kinds.refinement, cfg.refinement_depth, 2 * C, cfg.refinement_heads);
  m.output = b.conv("output", 2 * C, cfg.in_channels, 3, 1, true);
  return m;
}

template <typename T>
Tensor<T> forward(const ModelParams<T>& m, const Tensor<T>& image) {
  const auto& cfg = m.config;
  if (image.rank() != 3 || image.extent(2) != cfg.in_channels) {
    throw DimensionError("forward: image " + shape_str(image.shape()) + " does not match " +
                         std::to_string(cfg.in_channels) + " input channels");
  }
  const std::size_t H = image.extent(0), W = image.extent(1);
  const std::size_t Hp = (H + 7) / 8 * 8, Wp = (W + 7) / 8 * 8;
  const Tensor<T> input = reflect_pad2d(image, Hp - H, Wp - W);

  const Tensor<T> f0 = conv2d(input, m.shallow);
  Tensor<T> s = f0, c = f0;
  std::array<Tensor<T>, 3> skip_s, skip_c;
  for (std::size_t l = 0; l < 3; ++l) {
    skip_s[l] = run_stage(s, m.spatial.encoders[l]);
    skip_c[l] = run_stage(c, m.channel.encoders[l]);
    s = downsample(skip_s[l], m.spatial.down[l]);
    c = downsample(skip_c[l], m.channel.down[l]);
    if (l < 2 && cfg.bcu != BcuMode::off) std::tie(s, c) = bcu_exchange(s, c, m.encoder_bcu[l]);
  }
  s = run_stage(s, m.spatial.bottleneck);
  c = run_stage(c, m.channel.bottleneck);
  for (std::size_t d = 0; d < 3; ++d) {
    const std::size_t l = 2 - d;
    s = skip_fuse(upsample(s, m.spatial.up[d]), skip_s[l], m.spatial.reduce[d]);
    c = skip_fuse(upsample(c, m.channel.up[d]), skip_c[l], m.channel.reduce[d]);
    if (d > 0 && cfg.bcu != BcuMode::off) std::tie(s, c) = bcu_exchange(s, c, m.decoder_bcu[d - 1]);
    s = run_stage(s, m.spatial.decoders[d]);
    c = run_stage(c, m.channel.decoders[d]);
  }
  const Tensor<T> refined = run_stage(concat_last(s, c), m.refinement);
  const Tensor<T> restored = add(input, conv2d(refined, m.output));
  return crop2d(restored, H, W);
}

template <typename T>
std::size_t param_count(const ModelParams<T>& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.parameters) n += t.numel();
  return n;
}

namespace {

std::string module_of(const std::string& path) {
  const auto first = path.find('.');
  if (first == std::string::npos) return path;
  const std::string head = path.substr(0, first);
  if (head == "spatial" || head == "channel" || head == "bcu") {
    const auto second = path.find('.', first + 1);
    std::string sub = path.substr(first + 1, second - first - 1);
    while (!sub.empty() && std::isdigit(static_cast<unsigned char>(sub.back()))) sub.pop_back();
    return head + "." + sub;
  }
  return head;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, std::size_t>> param_breakdown(const ModelParams<T>& m) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& [name, t] : m.parameters) {
    const std::string mod = module_of(name);
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& e) { return e.first == mod; });
    if (it == out.end()) {
      out.emplace_back(mod, t.numel());
    } else {
      it->second += t.numel();
    }
  }
  return out;
}

namespace {

using u64 = std::uint64_t;

u64 conv_macs(u64 in, u64 out, u64 k, u64 groups, u64 pixels) {
  return pixels * out * (in / groups) * k * k;
}

u64 spatial_block_macs(const XformerConfig& cfg, u64 c, u64 h, u64 w) {
  const u64 G = cfg.window;
  const u64 tokens_padded = ((h + G - 1) / G * G) * ((w + G - 1) / G * G);
  const u64 hidden = cfg.ffn_hidden(c);
  return 4 * tokens_padded * c * c          // q, k, v, out projections
         + 2 * tokens_padded * G * G * c    // QK^T and AV inside windows
         + 2 * h * w * c * hidden;          // MLP
}

u64 channel_block_macs(const XformerConfig& cfg, u64 c, u64 heads, u64 h, u64 w) {
  const u64 n = h * w, hidden = cfg.ffn_hidden(c);
  return 3 * conv_macs(c, c, 1, 1, n) + 3 * conv_macs(c, c, 3, c, n)  // q/k/v pointwise+depthwise
         + 2 * n * c * c / heads                                          // QK^T and AV
         + conv_macs(c, c, 1, 1, n)                                       // out projection
         + conv_macs(c, 2 * hidden, 1, 1, n) + conv_macs(2 * hidden, 2 * hidden, 3, 2 * hidden, n) +
         conv_macs(hidden, c, 1, 1, n);
}

u64 stage_macs(const XformerConfig& cfg, BlockKind kind, u64 depth, u64 c, u64 heads, u64 h, u64 w) {
  const u64 per = kind == BlockKind::spatial ? spatial_block_macs(cfg, c, h, w)
                                             : channel_block_macs(cfg, c, heads, h, w);
  return depth * per;
}

}  // namespace

FlopReport flop_report(const XformerConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  if (height == 0 || width == 0) throw UsageError("flop_report: empty input size");
  const SiteKinds kinds = site_kinds(cfg.layout);
  const u64 C = cfg.base_channels;
  const u64 H = (height + 7) / 8 * 8, W = (width + 7) / 8 * 8;
  auto hl = [&](std::size_t l) { return H >> l; };
  auto wl = [&](std::size_t l) { return W >> l; };
  auto px = [&](std::size_t l) { return hl(l) * wl(l); };

  FlopReport r;
  auto put = [&r](const std::string& name, u64 v) {
    auto it = std::find_if(r.modules.begin(), r.modules.end(), [&](const auto& e) { return e.first == name; });
    if (it == r.modules.end()) {
      r.modules.emplace_back(name, v);
    } else {
      it->second += v;
    }
    r.total += v;
  };

  put("shallow", conv_macs(cfg.in_channels, C, 3, 1, px(0)));
  for (const auto& [name, kind] : {std::pair{std::string("spatial"), kinds.spatial_branch},
                                   std::pair{std::string("channel"), kinds.channel_branch}}) {
    for (std::size_t l = 0; l < 3; ++l) {
      const u64 c = cfg.level_channels(l);
      put(name + ".enc", stage_macs(cfg, kind, cfg.depths[l], c, cfg.heads[l], hl(l), wl(l)));
      put(name + ".down", conv_macs(c, c / 2, 3, 1, px(l)));
    }
    put("bottleneck", stage_macs(cfg, kinds.bottleneck, cfg.depths[3], cfg.level_channels(3),
                                 cfg.heads[3], hl(3), wl(3)));
    for (std::size_t d = 0; d < 3; ++d) {
      const std::size_t l = 2 - d;
      const u64 c = cfg.level_channels(l);
      put(name + ".up", conv_macs(2 * c, 4 * c, 3, 1, px(l + 1)));
      put(name + ".reduce", conv_macs(2 * c, c, 1, 1, px(l)));
      put(name + ".dec", stage_macs(cfg, kind, cfg.depths[4 + d], c, cfg.heads[4 + d], hl(l), wl(l)));
    }
  }
  if (cfg.bcu != BcuMode::off) {
    const std::array<std::pair<u64, std::size_t>, 4> sites{
        {{2 * C, 1}, {4 * C, 2}, {2 * C, 1}, {C, 0}}};
    for (const auto& [c, l] : sites) {
      if (cfg.bcu != BcuMode::conv_only) put("bcu", conv_macs(c, c, 3, c, px(l)));
      if (cfg.bcu != BcuMode::dw_only) put("bcu", conv_macs(c, c, 3, 1, px(l)));
    }
  }
  put("refinement", stage_macs(cfg, kinds.refinement, cfg.refinement_depth, 2 * C,
                               cfg.refinement_heads, hl(0), wl(0)));
  put("output", conv_macs(2 * C, cfg.in_channels, 3, 1, px(0)));
  return r;
}

std::uint64_t flop_count(const XformerConfig& cfg, std::size_t height, std::size_t width) {
  return flop_report(cfg, height, width).total;
}

template ModelParams<float> build<float>(const XformerConfig&, std::uint64_t);
template ModelParams<double> build<double>(const XformerConfig&, std::uint64_t);
template Tensor<float> forward(const ModelParams<float>&, const Tensor<float>&);
template Tensor<double> forward(const ModelParams<double>&, const Tensor<double>&);
template std::size_t param_count(const ModelParams<float>&);
template std::size_t param_count(const ModelParams<double>&);
template std::vector<std::pair<std::string, std::size_t>> param_breakdown(const ModelParams<float>&);
template std::vector<std::pair<std::string, std::size_t>> param_breakdown(const ModelParams<double>&);
template struct ModelParams<float>;
template struct ModelParams<double>;

}  // namespace xf
