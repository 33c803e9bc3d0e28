#include "hdmae/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "hdmae/errors.hpp"

namespace hdmae {

using nlohmann::json;

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ConfigError("lr must be finite and >= 0");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0 || max_steps < 0) {
    throw ConfigError("epochs and max_steps must be >= 0");
  }
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in (0, 1)");
  }
  if (!(inside_weight >= 1.0) || !std::isfinite(inside_weight)) {
    throw ConfigError("inside_weight must be finite and >= 1");
  }
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

int TrainConfig::total_steps(int dataset_size) const {
  if (max_steps > 0) return max_steps;
  const int per_epoch = (dataset_size + batch_size - 1) / batch_size;
  return epochs * per_epoch;
}

int TrainConfig::resolved_warmup(int total) const {
  if (warmup_steps >= 0) return warmup_steps;
  return static_cast<int>(std::lround(0.05 * total));
}

json to_json(const TrainConfig& c) {
  const ViTConfig& m = c.model;
  return json{
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"eps", c.eps},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"max_steps", c.max_steps},
      {"warmup_steps", c.warmup_steps},
      {"schedule", c.schedule == LrSchedule::kCosine ? "cosine" : "constant"},
      {"seed", c.seed},
      {"mask_ratio", c.mask_ratio},
      {"inside_weight", c.inside_weight},
      {"clip_norm", c.clip_norm},
      {"checkpoint_every", c.checkpoint_every},
      {"model",
       {{"image_side", m.patch.image_side},
        {"patch_side", m.patch.patch_side},
        {"enc_depth", m.enc_depth},
        {"enc_heads", m.enc_heads},
        {"enc_dim", m.enc_dim},
        {"dec_depth", m.dec_depth},
        {"dec_heads", m.dec_heads},
        {"dec_dim", m.dec_dim},
        {"mlp_ratio", m.mlp_ratio}}},
  };
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.at("eps").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.max_steps = j.at("max_steps").get<int>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    const auto sched = j.at("schedule").get<std::string>();
    if (sched == "cosine") {
      c.schedule = LrSchedule::kCosine;
    } else if (sched == "constant") {
      c.schedule = LrSchedule::kConstant;
    } else {
      throw ConfigError("schedule must be 'cosine' or 'constant', got '" + sched + "'");
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.mask_ratio = j.at("mask_ratio").get<double>();
    c.inside_weight = j.at("inside_weight").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
    const json& m = j.at("model");
    c.model.patch.image_side = m.at("image_side").get<int>();
    c.model.patch.patch_side = m.at("patch_side").get<int>();
    c.model.enc_depth = m.at("enc_depth").get<int>();
    c.model.enc_heads = m.at("enc_heads").get<int>();
    c.model.enc_dim = m.at("enc_dim").get<int>();
    c.model.patch.embed_dim = c.model.enc_dim;
    c.model.dec_depth = m.at("dec_depth").get<int>();
    c.model.dec_heads = m.at("dec_heads").get<int>();
    c.model.dec_dim = m.at("dec_dim").get<int>();
    c.model.mlp_ratio = m.at("mlp_ratio").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---- AdamW ------------------------------------------------------------------

AdamWState AdamWState::zeros_like(const ModelParams<float>& params) {
  AdamWState s;
  params.visit([&](const std::string&, const Tensor<float>& p, bool) {
    s.m.push_back(Tensor<float>::zeros(p.shape()));
    s.v.push_back(Tensor<float>::zeros(p.shape()));
  });
  return s;
}

void adamw_update(std::span<float> param, std::span<const float> grad,
                  std::span<float> m, std::span<float> v, std::int64_t t,
                  const AdamWHyper& h, bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() ||
      v.size() != param.size()) {
    throw DimensionError("adamw_update: buffer sizes differ");
  }
  if (t < 1) throw ContractError("adamw_update: t must be >= 1");
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  const double shrink = 1.0 - h.lr * (decay ? h.weight_decay : 0.0);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    param[i] = static_cast<float>(static_cast<double>(param[i]) * shrink -
                                  h.lr * mhat / (std::sqrt(vhat) + h.eps));
  }
}

void adamw_step(ModelParams<float>& params, AdamWState& state,
                const TrainConfig& cfg, double lr) {
  params.visit([&](const std::string& name, Tensor<float>& p, bool) {
    if (p.has_grad()) check_finite<float>(p.grad(), "gradient of " + name);
  });
  const std::int64_t t = state.t + 1;
  const AdamWHyper hyper{lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  std::size_t i = 0;
  std::vector<float> zeros;
  params.visit([&](const std::string&, Tensor<float>& p, bool decays) {
    std::span<const float> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.numel(), 0.0f);
      g = zeros;
    }
    adamw_update(p.mutable_data(), g, state.m[i].mutable_data(),
                 state.v[i].mutable_data(), t, hyper, decays);
    ++i;
  });
  state.t = t;
}

double lr_at(int step, const TrainConfig& cfg, int total_steps) {
  const int warmup = cfg.resolved_warmup(total_steps);
  if (step < warmup) {
    return cfg.lr * static_cast<double>(step) / warmup;
  }
  if (cfg.schedule == LrSchedule::kConstant || total_steps <= warmup) {
    return cfg.lr;
  }
  const double progress = std::min(
      1.0, static_cast<double>(step - warmup) / (total_steps - warmup));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'D', 'M', 'A', 'E', '0', '0', '1'};

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64_le(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

void append_floats_le(std::string& out, std::span<const float> values) {
  for (float f : values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

void read_floats_le(const std::string& in, std::size_t pos, std::span<float> out) {
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + 4 * k + static_cast<std::size_t>(i)]))
              << (8 * i);
    }
    out[k] = std::bit_cast<float>(bits);
  }
}

json rng_to_json(const Rng::State& s) {
  return json::array({s[0], s[1], s[2], s[3]});
}

Rng::State rng_from_json(const json& j) {
  Rng::State s{};
  if (!j.is_array() || j.size() != 4) throw IntegrityError("checkpoint: bad rng state");
  for (std::size_t i = 0; i < 4; ++i) s[i] = j[i].get<std::uint64_t>();
  return s;
}

// Canonical order of every tensor stored in a checkpoint.
template <typename C, typename Fn>
void visit_checkpoint_tensors(C& ckpt, Fn&& fn) {
  std::vector<std::string> names;
  ckpt.params.visit([&](const std::string& name, auto& t, bool) {
    names.push_back(name);
    fn("param/" + name, t);
  });
  for (std::size_t i = 0; i < names.size(); ++i) fn("adam_m/" + names[i], ckpt.optimizer.m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) fn("adam_v/" + names[i], ckpt.optimizer.v[i]);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json manifest = json::array();
  std::string payload;
  visit_checkpoint_tensors(ckpt, [&](const std::string& name, const Tensor<float>& t) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    append_floats_le(payload, t.data());
  });
  json header = {
      {"format_version", Checkpoint::kFormatVersion},
      {"config", to_json(ckpt.config)},
      {"step", ckpt.step},
      {"epoch", ckpt.epoch},
      {"adam_t", ckpt.optimizer.t},
      {"rng", {{"mask", rng_to_json(ckpt.mask_rng)}, {"data", rng_to_json(ckpt.data_rng)}}},
      {"payload_bytes", payload.size()},
      {"tensors", manifest},
  };
  const std::string head = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  append_u64_le(out, head.size());
  out += head;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 5) != 0) {
    throw IntegrityError("checkpoint: missing HDMAE magic");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError("checkpoint: unsupported format version '" +
                         bytes.substr(0, 8) + "', expected 'HDMAE001'");
  }
  const std::uint64_t head_len = read_u64_le(bytes, 8);
  if (head_len > bytes.size() - 16) {
    throw IntegrityError("checkpoint: header length " + std::to_string(head_len) +
                         " exceeds file size");
  }
  const std::size_t payload_pos = 16 + static_cast<std::size_t>(head_len);
  const std::size_t payload_len = bytes.size() - payload_pos;

  Checkpoint ckpt;
  try {
    const json header = json::parse(bytes.substr(16, static_cast<std::size_t>(head_len)));
    const int version = header.at("format_version").get<int>();
    if (version != Checkpoint::kFormatVersion) {
      throw IntegrityError("checkpoint: format version " + std::to_string(version) +
                           ", expected " + std::to_string(Checkpoint::kFormatVersion));
    }
    ckpt.config = train_config_from_json(header.at("config"));
    ckpt.config.validate();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.epoch = header.at("epoch").get<std::int64_t>();
    ckpt.mask_rng = rng_from_json(header.at("rng").at("mask"));
    ckpt.data_rng = rng_from_json(header.at("rng").at("data"));
    ckpt.params = zero_params<float>(ckpt.config.model);
    ckpt.optimizer = AdamWState::zeros_like(ckpt.params);
    ckpt.optimizer.t = header.at("adam_t").get<std::int64_t>();
    if (header.at("payload_bytes").get<std::uint64_t>() != payload_len) {
      throw IntegrityError("checkpoint: payload is " + std::to_string(payload_len) +
                           " bytes, header declares " +
                           std::to_string(header.at("payload_bytes").get<std::uint64_t>()));
    }
    const json& manifest = header.at("tensors");
    std::size_t k = 0;
    std::size_t expected_offset = 0;
    visit_checkpoint_tensors(ckpt, [&](const std::string& name, Tensor<float>& t) {
      if (k >= manifest.size()) {
        throw IntegrityError("checkpoint: manifest lacks tensor " + name);
      }
      const json& entry = manifest[k++];
      if (entry.at("name").get<std::string>() != name) {
        throw IntegrityError("checkpoint: expected tensor " + name + ", found " +
                             entry.at("name").get<std::string>());
      }
      if (entry.at("shape").get<Shape>() != t.shape()) {
        throw IntegrityError("checkpoint: tensor " + name + " declared shape " +
                             shape_str(entry.at("shape").get<Shape>()) +
                             " but config implies " + shape_str(t.shape()));
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t len = 4 * t.numel();
      if (offset != expected_offset || offset + len > payload_len) {
        throw IntegrityError("checkpoint: tensor " + name + " at offset " +
                             std::to_string(offset) + " (" + std::to_string(len) +
                             " bytes) does not fit the payload");
      }
      read_floats_le(bytes, payload_pos + static_cast<std::size_t>(offset), t.mutable_data());
      expected_offset += len;
    });
    if (k != manifest.size() || expected_offset != payload_len) {
      throw IntegrityError("checkpoint: manifest and payload length disagree");
    }
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint: invalid config: ") + e.what());
  }
  for (const auto& t : ckpt.optimizer.v) {
    for (float x : t.data()) {
      if (!(x >= 0.0f)) throw IntegrityError("checkpoint: negative second moment");
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void write_metrics_csv(std::span<const MetricRow> rows,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "step,lr,loss,inside_rate,outside_rate,seconds\n";
  out.precision(9);
  for (const auto& r : rows) {
    out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.inside_rate << ','
        << r.outside_rate << ',' << r.seconds << '\n';
  }
}

// ---- training loop -------------------------------------------------------------

namespace {

std::vector<float> flat_grad(const ModelParams<float>& params, std::int64_t total) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(total));
  params.visit([&](const std::string&, const Tensor<float>& p, bool) {
    if (p.has_grad()) {
      out.insert(out.end(), p.grad().begin(), p.grad().end());
    } else {
      out.insert(out.end(), p.numel(), 0.0f);
    }
  });
  return out;
}

struct SampleResult {
  double loss = 0;
  std::vector<float> grad;
};

SampleResult sample_gradient(ModelParams<float>& params, const ViTConfig& cfg,
                             const PositionTables<float>& pos,
                             const Tensor<float>& patches, const MaskPlan& plan,
                             std::int64_t total) {
  params.zero_grad();
  GradTape<float>::current().clear();
  auto fwd = mae_forward(params, cfg, pos, patches, plan);
  const double loss = fwd.loss.item();
  backward(fwd.loss);
  return {loss, flat_grad(params, total)};
}

}  // namespace

double evaluate_loss(const ModelParams<float>& params, const ViTConfig& cfg,
                     const ImageGray& image, const MaskPlan& plan) {
  NoGradGuard no_grad;
  const auto pos = PositionTables<float>::make(cfg);
  const auto patches = patchify<float>(image, cfg.patch);
  return mae_forward(params, cfg, pos, patches, plan).loss.item();
}

TrainResult train(const TrainConfig& cfg,
                  const std::vector<PhantomSample>& dataset,
                  const TrainOptions& options) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train: dataset is empty");
  const ViTConfig& mcfg = cfg.model;
  for (const auto& s : dataset) {
    if (s.region.grid_side != mcfg.patch.grid_side()) {
      throw ConfigError("train: sample region grid does not match the patch grid");
    }
  }
  const int n = static_cast<int>(dataset.size());
  const int total = cfg.total_steps(n);
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  Checkpoint& ckpt = result.final;
  ckpt.config = cfg;
  ckpt.params = init_params<float>(mcfg, cfg.seed);
  ckpt.optimizer = AdamWState::zeros_like(ckpt.params);
  Rng mask_rng = make_stream(cfg.seed, StreamPurpose::kMasking);
  Rng data_rng = make_stream(cfg.seed, StreamPurpose::kData);

  const auto pos = PositionTables<float>::make(mcfg);
  std::vector<Tensor<float>> patches;
  patches.reserve(dataset.size());
  for (const auto& s : dataset) patches.push_back(patchify<float>(s.image, mcfg.patch));

  const std::int64_t n_params = ckpt.params.numel();
  const int threads = std::max(1, std::min(options.threads, cfg.batch_size));
  std::vector<int> order(static_cast<std::size_t>(n));
  int cursor = n;  // forces a shuffle before the first batch
  std::int64_t epoch = -1;

  for (int step = 0; step < total; ++step) {
    StepInfo info;
    info.step = step;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == n) {
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
          const auto j = static_cast<int>(data_rng.below(static_cast<std::uint64_t>(i) + 1));
          std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        cursor = 0;
        ++epoch;
      }
      info.samples.push_back(order[static_cast<std::size_t>(cursor++)]);
    }
    for (int idx : info.samples) {
      info.plans.push_back(context_aware_mask(dataset[static_cast<std::size_t>(idx)].region,
                                              cfg.mask_ratio, cfg.inside_weight, mask_rng));
    }

    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    std::vector<SampleResult> per_sample(batch);
    auto run_range = [&](ModelParams<float>& local, std::size_t lo, std::size_t hi) {
      for (std::size_t b = lo; b < hi; ++b) {
        per_sample[b] = sample_gradient(local, mcfg, pos,
                                        patches[static_cast<std::size_t>(info.samples[b])],
                                        info.plans[b], n_params);
      }
    };
    if (threads == 1) {
      run_range(ckpt.params, 0, batch);
    } else {
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
      std::vector<std::thread> workers;
      const std::size_t chunk = (batch + static_cast<std::size_t>(threads) - 1) /
                                static_cast<std::size_t>(threads);
      for (int w = 0; w < threads; ++w) {
        const std::size_t lo = static_cast<std::size_t>(w) * chunk;
        const std::size_t hi = std::min(batch, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&, w, lo, hi] {
          try {
            auto local = ckpt.params.clone();
            run_range(local, lo, hi);
          } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
          }
        });
      }
      for (auto& t : workers) t.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }

    // Fixed-order reduction over the batch.
    std::vector<double> acc(static_cast<std::size_t>(n_params), 0.0);
    double loss_sum = 0;
    for (const auto& r : per_sample) {
      loss_sum += r.loss;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.grad[i];
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    double norm2 = 0;
    for (auto& g : acc) {
      g *= inv_b;
      norm2 += g * g;
    }
    double clip = 1.0;
    if (cfg.clip_norm > 0 && std::sqrt(norm2) > cfg.clip_norm) {
      clip = cfg.clip_norm / std::sqrt(norm2);
    }
    std::size_t off = 0;
    ckpt.params.visit([&](const std::string&, Tensor<float>& p, bool) {
      auto g = p.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(acc[off + i] * clip);
      off += g.size();
    });

    info.lr = lr_at(step, cfg, total);
    info.loss = loss_sum * inv_b;
    adamw_step(ckpt.params, ckpt.optimizer, cfg, info.lr);
    ckpt.params.zero_grad();

    double in_rate = 0, out_rate = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto one = mask_stats(std::span<const MaskPlan>(&info.plans[b], 1),
                                  dataset[static_cast<std::size_t>(info.samples[b])].region);
      in_rate += one.inside_rate;
      out_rate += one.outside_rate;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back({step, info.lr, info.loss, in_rate * inv_b, out_rate * inv_b, secs});

    ckpt.step = step + 1;
    ckpt.epoch = epoch;
    ckpt.mask_rng = mask_rng.state();
    ckpt.data_rng = data_rng.state();
    if (options.on_step) options.on_step(info);
    if (!options.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        ckpt.step % cfg.checkpoint_every == 0 && ckpt.step < total) {
      save_checkpoint(ckpt, options.checkpoint_dir /
                                ("step_" + std::to_string(ckpt.step) + ".ckpt"));
    }
  }
  ckpt.mask_rng = mask_rng.state();
  ckpt.data_rng = data_rng.state();
  if (!options.checkpoint_dir.empty()) {
    save_checkpoint(ckpt, options.checkpoint_dir / "final.ckpt");
  }
  return result;
}

}  // namespace hdmae
