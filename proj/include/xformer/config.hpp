#pragma once

#include <string>
#include <string_view>

#include "xformer/network.hpp"
#include "xformer/train.hpp"

namespace xf {

struct RunPaths {
  std::string data;
  std::string val;
  std::string checkpoint;
  std::string output;
  std::string log;
  bool operator==(const RunPaths&) const = default;
};

struct RunConfig {
  XformerConfig model;
  TrainPlan train;
  RunPaths paths;
  bool operator==(const RunConfig&) const = default;
};

// Text grammar, one entry per line:
//
//   # comment            (also ';')
//   [model] | [train] | [paths]
//   key = value
//
// Lists are comma separated; progressive phases are start:batch:patch.
// Booleans are true/false. Omitted keys keep their defaults; unknown keys,
// duplicates and entries outside a section are ConfigErrors. Text starting
// with '{' is read as JSON with the same sections and keys.

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);
std::string serialize(const RunConfig& cfg);

/// The [model] section alone; this is what checkpoints embed.
std::string serialize(const XformerConfig& cfg);
XformerConfig parse_model_config(std::string_view text);

}  // namespace xf
