#include "xformer/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace xf {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view what) {
  throw ConfigError("'" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " +
                    std::string(what));
}

std::size_t to_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true/false");
}

std::vector<std::size_t> to_size_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (auto part : split(v, ',')) out.push_back(to_size(key, part));
  return out;
}

std::vector<ProgressivePhase> to_phases(std::string_view key, std::string_view v) {
  std::vector<ProgressivePhase> out;
  for (auto part : split(v, ',')) {
    const auto fields = split(part, ':');
    if (fields.size() != 3) bad_value(key, part, "start:batch:patch");
    out.push_back({to_size(key, fields[0]), to_size(key, fields[1]), to_size(key, fields[2])});
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename Seq>
std::string join(const Seq& items) {
  std::string out;
  for (const auto& item : items) {
    if (!out.empty()) out += ", ";
    out += std::to_string(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;
using SectionTable = std::map<std::string, Setter, std::less<>>;

const std::map<std::string, SectionTable, std::less<>>& setters() {
  static const std::map<std::string, SectionTable, std::less<>> table{
      {"model",
       {
           {"in_channels", [](RunConfig& c, auto k, auto v) { c.model.in_channels = to_size(k, v); }},
           {"base_channels", [](RunConfig& c, auto k, auto v) { c.model.base_channels = to_size(k, v); }},
           {"depths", [](RunConfig& c, auto k, auto v) { c.model.depths = to_size_list(k, v); }},
           {"heads", [](RunConfig& c, auto k, auto v) { c.model.heads = to_size_list(k, v); }},
           {"refinement_depth", [](RunConfig& c, auto k, auto v) { c.model.refinement_depth = to_size(k, v); }},
           {"refinement_heads", [](RunConfig& c, auto k, auto v) { c.model.refinement_heads = to_size(k, v); }},
           {"window", [](RunConfig& c, auto k, auto v) { c.model.window = to_size(k, v); }},
           {"ffn_expansion", [](RunConfig& c, auto k, auto v) { c.model.ffn_expansion = to_double(k, v); }},
           {"shifted", [](RunConfig& c, auto k, auto v) { c.model.shifted = to_bool(k, v); }},
           {"layout", [](RunConfig& c, auto, auto v) { c.model.layout = parse_block_layout(v); }},
           {"bcu", [](RunConfig& c, auto, auto v) { c.model.bcu = parse_bcu_mode(v); }},
       }},
      {"train",
       {
           {"total_iters", [](RunConfig& c, auto k, auto v) { c.train.total_iters = to_size(k, v); }},
           {"lr0", [](RunConfig& c, auto k, auto v) { c.train.lr0 = to_double(k, v); }},
           {"lr_min", [](RunConfig& c, auto k, auto v) { c.train.lr_min = to_double(k, v); }},
           {"beta1", [](RunConfig& c, auto k, auto v) { c.train.beta1 = to_double(k, v); }},
           {"beta2", [](RunConfig& c, auto k, auto v) { c.train.beta2 = to_double(k, v); }},
           {"weight_decay", [](RunConfig& c, auto k, auto v) { c.train.weight_decay = to_double(k, v); }},
           {"adam_eps", [](RunConfig& c, auto k, auto v) { c.train.adam_eps = to_double(k, v); }},
           {"progressive", [](RunConfig& c, auto k, auto v) { c.train.progressive = to_phases(k, v); }},
           {"noise_sigma", [](RunConfig& c, auto k, auto v) { c.train.noise_sigma = to_double(k, v); }},
           {"seed", [](RunConfig& c, auto k, auto v) { c.train.seed = to_u64(k, v); }},
           {"val_every", [](RunConfig& c, auto k, auto v) { c.train.val_every = to_size(k, v); }},
           {"checkpoint_every", [](RunConfig& c, auto k, auto v) { c.train.checkpoint_every = to_size(k, v); }},
       }},
      {"paths",
       {
           {"data", [](RunConfig& c, auto, auto v) { c.paths.data = std::string(v); }},
           {"val", [](RunConfig& c, auto, auto v) { c.paths.val = std::string(v); }},
           {"checkpoint", [](RunConfig& c, auto, auto v) { c.paths.checkpoint = std::string(v); }},
           {"output", [](RunConfig& c, auto, auto v) { c.paths.output = std::string(v); }},
           {"log", [](RunConfig& c, auto, auto v) { c.paths.log = std::string(v); }},
       }},
  };
  return table;
}

class Assigner {
 public:
  void set(RunConfig& cfg, std::string_view section, std::string_view key, std::string_view value) {
    const auto sec = setters().find(section);
    if (sec == setters().end()) throw ConfigError("unknown section [" + std::string(section) + "]");
    const auto entry = sec->second.find(key);
    if (entry == sec->second.end()) {
      throw ConfigError("unknown key '" + std::string(key) + "' in [" + std::string(section) + "]");
    }
    if (!seen_.insert(std::string(section) + "." + std::string(key)).second) {
      throw ConfigError("duplicate key '" + std::string(key) + "' in [" + std::string(section) + "]");
    }
    entry->second(cfg, key, value);
  }

 private:
  std::set<std::string> seen_;
};

void finish(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.train.validate();
}

std::string json_scalar(const nlohmann::json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned() || v.is_number_integer()) return v.dump();
  if (v.is_number_float()) return fmt(v.get<double>());
  throw ConfigError("'" + key + "': unsupported JSON value " + v.dump());
}

std::string json_value(const nlohmann::json& v, const std::string& key) {
  if (!v.is_array()) return json_scalar(v, key);
  std::string out;
  for (const auto& item : v) {
    if (!out.empty()) out += ",";
    if (item.is_array()) {
      std::string phase;
      for (const auto& f : item) phase += (phase.empty() ? "" : ":") + json_scalar(f, key);
      out += phase;
    } else {
      out += json_scalar(item, key);
    }
  }
  return out;
}

RunConfig parse_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON config: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("JSON config must be an object of sections");
  RunConfig cfg;
  Assigner assign;
  for (const auto& [section, body] : doc.items()) {
    if (!body.is_object()) throw ConfigError("JSON section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) assign.set(cfg, section, key, json_value(value, key));
  }
  finish(cfg);
  return cfg;
}

RunConfig parse_text(std::string_view text) {
  RunConfig cfg;
  Assigner assign;
  std::string section;
  std::size_t line_no = 0;
  for (std::string_view raw : split(text, '\n')) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!setters().contains(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "entry outside any section");
    try {
      assign.set(cfg, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  finish(cfg);
  return cfg;
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  const std::string_view body = trim(text);
  if (!body.empty() && body.front() == '{') return parse_json(body);
  return parse_text(text);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string serialize(const XformerConfig& m) {
  std::ostringstream out;
  out << "[model]\n"
      << "in_channels = " << m.in_channels << "\n"
      << "base_channels = " << m.base_channels << "\n"
      << "depths = " << join(m.depths) << "\n"
      << "heads = " << join(m.heads) << "\n"
      << "refinement_depth = " << m.refinement_depth << "\n"
      << "refinement_heads = " << m.refinement_heads << "\n"
      << "window = " << m.window << "\n"
      << "ffn_expansion = " << fmt(m.ffn_expansion) << "\n"
      << "shifted = " << (m.shifted ? "true" : "false") << "\n"
      << "layout = " << to_string(m.layout) << "\n"
      << "bcu = " << to_string(m.bcu) << "\n";
  return out.str();
}

std::string serialize(const RunConfig& cfg) {
  const TrainPlan& t = cfg.train;
  std::ostringstream out;
  out << serialize(cfg.model) << "\n[train]\n"
      << "total_iters = " << t.total_iters << "\n"
      << "lr0 = " << fmt(t.lr0) << "\n"
      << "lr_min = " << fmt(t.lr_min) << "\n"
      << "beta1 = " << fmt(t.beta1) << "\n"
      << "beta2 = " << fmt(t.beta2) << "\n"
      << "weight_decay = " << fmt(t.weight_decay) << "\n"
      << "adam_eps = " << fmt(t.adam_eps) << "\n"
      << "progressive = ";
  for (std::size_t i = 0; i < t.progressive.size(); ++i) {
    const auto& p = t.progressive[i];
    out << (i ? ", " : "") << p.start_iter << ':' << p.batch << ':' << p.patch;
  }
  out << "\nnoise_sigma = " << fmt(t.noise_sigma) << "\n"
      << "seed = " << t.seed << "\n"
      << "val_every = " << t.val_every << "\n"
      << "checkpoint_every = " << t.checkpoint_every << "\n"
      << "\n[paths]\n"
      << "data = " << cfg.paths.data << "\n"
      << "val = " << cfg.paths.val << "\n"
      << "checkpoint = " << cfg.paths.checkpoint << "\n"
      << "output = " << cfg.paths.output << "\n"
      << "log = " << cfg.paths.log << "\n";
  return out.str();
}

XformerConfig parse_model_config(std::string_view text) {
  return parse_run_config(text).model;
}

}  // namespace xf
