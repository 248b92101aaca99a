#pragma once

// Task definitions: class map, resizing, patching, training overrides and
// the post-processing chain, loadable from a JSON config file.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dhseg/data_pipeline.hpp"
#include "dhseg/train.hpp"

namespace dhseg {

using OpParam = std::variant<double, std::string>;

struct PostprocStep {
  std::string op;
  std::map<std::string, OpParam> params;

  double number(const std::string& key) const;
  const std::string& text(const std::string& key) const;
  bool has(const std::string& key) const { return params.count(key) != 0; }
};

struct PatchingOption {
  PatchSpec spec;
  int batch_size = 1;
};

struct TaskConfig {
  std::string name = "custom";
  ClassMap classmap;
  /// 0 disables resizing.
  double resize_budget = 0.0;
  std::optional<PatchSpec> patches;
  /// Alternative patch/batch settings for higher-resolution material.
  std::vector<PatchingOption> patch_variants;
  TrainConfig train;
  /// Class indices whose probability channels the chain processes.
  std::vector<int> postprocess_classes;
  std::vector<PostprocStep> postprocessing;
  double baseline_radius = 5.0;

  int n_classes() const { return classmap.size(); }
};

inline const std::vector<std::string> kBuiltinTasks = {"page", "baseline", "layout", "ornament", "photo"};

/// Throws std::invalid_argument for names outside kBuiltinTasks.
TaskConfig builtin_task(const std::string& name);

/// Checks class map, training settings and that the chain type-checks.
void validate(const TaskConfig& task);

/// Parses a config file (see docs/config.md). A "base" key starts from a
/// built-in task whose fields the file then overrides.
TaskConfig load_task_config(const std::filesystem::path& path);
TaskConfig parse_task_config(const std::string& json_text);
std::string task_config_to_json(const TaskConfig& task);

/// FNV-1a of the canonical JSON form.
std::string config_hash(const TaskConfig& task);

}  // namespace dhseg
