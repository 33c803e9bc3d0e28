#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdmae/masking.hpp"
#include "hdmae/model.hpp"
#include "hdmae/phantom.hpp"
#include "hdmae/rng.hpp"

namespace hdmae {

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  double lr = 2.5e-4;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int batch_size = 8;
  int epochs = 83;
  int max_steps = 0;      // > 0 overrides epochs
  int warmup_steps = -1;  // < 0 means 5% of the total step count
  LrSchedule schedule = LrSchedule::kCosine;
  std::uint64_t seed = 0;
  double mask_ratio = 0.75;
  double inside_weight = 4.0;
  double clip_norm = 0.0;     // 0 disables global-norm clipping
  int checkpoint_every = 0;   // 0 disables intermediate checkpoints
  ViTConfig model = ViTConfig::toy();

  void validate() const;  // ConfigError
  int total_steps(int dataset_size) const;
  int resolved_warmup(int total) const;

  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct AdamWState {
  std::vector<Tensor<float>> m;  // mirror ModelParams::visit order
  std::vector<Tensor<float>> v;
  std::int64_t t = 0;

  static AdamWState zeros_like(const ModelParams<float>& params);
};

struct AdamWHyper {
  double lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled-decay Adam update of a single tensor; `t` is the step count
// after incrementing (first update uses t = 1):
//   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
//   theta = theta (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)
// with mhat = m / (1 - b1^t), vhat = v / (1 - b2^t). wd is ignored when
// `decay` is false. Arithmetic is carried out in double per element.
void adamw_update(std::span<float> param, std::span<const float> grad,
                  std::span<float> m, std::span<float> v, std::int64_t t,
                  const AdamWHyper& hyper, bool decay);

// Applies adamw_update to every parameter using its accumulated gradient
// (missing gradients count as zero) and increments state.t. A non-finite
// gradient throws NumericError naming the parameter, before anything changes.
void adamw_step(ModelParams<float>& params, AdamWState& state,
                const TrainConfig& cfg, double lr);

// Linear warmup from 0 to cfg.lr over the warmup steps, then either constant
// or half-cosine decay reaching 0 at `total_steps`.
double lr_at(int step, const TrainConfig& cfg, int total_steps);

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  TrainConfig config;
  ModelParams<float> params;
  AdamWState optimizer;
  Rng::State mask_rng{};
  Rng::State data_rng{};
  std::int64_t step = 0;
  std::int64_t epoch = 0;
};

// Layout: 8 magic bytes "HDMAE001", u64 little-endian header length, UTF-8
// JSON header (format version, config, counters, rng states, tensor manifest
// of name/shape/byte offset), then little-endian float32 payloads in
// manifest order.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);  // IntegrityError
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct MetricRow {
  int step = 0;
  double lr = 0;
  double loss = 0;
  double inside_rate = 0;
  double outside_rate = 0;
  double seconds = 0;
};

// Header `step,lr,loss,inside_rate,outside_rate,seconds`.
void write_metrics_csv(std::span<const MetricRow> rows,
                       const std::filesystem::path& path);

struct StepInfo {
  int step = 0;
  std::vector<int> samples;  // dataset indices of the batch
  std::vector<MaskPlan> plans;
  double lr = 0;
  double loss = 0;
};

struct TrainOptions {
  std::function<void(const StepInfo&)> on_step;
  // When set, receives `step_<N>.ckpt` every checkpoint_every steps and
  // `final.ckpt` at the end.
  std::filesystem::path checkpoint_dir;
  int threads = 1;
};

struct TrainResult {
  Checkpoint final;
  std::vector<MetricRow> log;
};

// Per step: draw the next batch from a per-epoch shuffle, draw one mask
// plan per sample, average the masked reconstruction loss over the batch,
// backpropagate and take one AdamW step. Per-sample gradients are summed in
// batch order, so results do not depend on `threads`.
TrainResult train(const TrainConfig& cfg,
                  const std::vector<PhantomSample>& dataset,
                  const TrainOptions& options = {});

// Loss of one sample under a fixed plan, without recording a tape.
double evaluate_loss(const ModelParams<float>& params, const ViTConfig& cfg,
                     const ImageGray& image, const MaskPlan& plan);

}  // namespace hdmae
