#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "hdmae/trainer.hpp"

namespace hdmae {

struct DataConfig {
  int count = 256;
  double lesion_fraction = 0.5;
  std::string manifest;  // when set, images come from this manifest instead
};

struct ProbeRunConfig {
  int train_count = 256;
  int eval_count = 256;
  double lesion_fraction = 0.5;
  int steps = 2000;
  double lr = 0.05;
};

// Everything a CLI run needs. The JSON form groups keys as
//   seed, out_dir,
//   patch.{image_side, patch_side},
//   model.{enc_depth, enc_heads, enc_dim, dec_depth, dec_heads, dec_dim, mlp_ratio},
//   mask.{ratio, inside_weight},
//   optim.{lr, weight_decay, beta1, beta2, eps, schedule, warmup_steps, clip_norm},
//   train.{batch_size, epochs, max_steps, checkpoint_every},
//   data.{count, lesion_fraction, manifest},
//   probe.{train_count, eval_count, lesion_fraction, steps, lr}.
struct RunConfig {
  TrainConfig train;
  std::string out_dir = "runs/default";
  DataConfig data;
  ProbeRunConfig probe;

  void validate() const;  // ConfigError
};

nlohmann::json default_run_config_json();
nlohmann::json to_json(const RunConfig& cfg);
// Requires a complete document (as produced by merging onto the defaults).
RunConfig run_config_from_json(const nlohmann::json& j);

// Overlays `patch` onto `base`. Keys absent from `base` and values whose JSON
// type differs from the default (integers may stand in for floats) throw
// ConfigError naming the dotted path.
void merge_config(nlohmann::json& base, const nlohmann::json& patch);

// `a.b.c=value`; the value is parsed as JSON when possible, otherwise taken
// as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Defaults <- config file (if any) <- overrides, then validated.
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file,
                             std::span<const std::string> overrides);

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir);

}  // namespace hdmae
