#include "hdmae/config.hpp"

#include <fstream>
#include <sstream>

#include "hdmae/errors.hpp"

namespace hdmae {

using nlohmann::json;

namespace {

bool compatible(const json& def, const json& val) {
  if (def.is_number_float()) return val.is_number();
  if (def.is_number_unsigned() || def.is_number_integer()) return val.is_number_integer();
  return def.type() == val.type();
}

void merge_at(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) {
    throw ConfigError("config " + (path.empty() ? std::string("root") : "'" + path + "'") +
                      " must be an object");
  }
  for (const auto& [key, val] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_at(slot, val, where);
    } else if (!compatible(slot, val)) {
      throw ConfigError("config key '" + where + "' expects " + slot.type_name() +
                        ", got " + val.type_name());
    } else if (slot.is_number_float()) {
      slot = val.get<double>();
    } else {
      slot = val;
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (data.manifest.empty() && data.count < 1) throw ConfigError("data.count must be >= 1");
  if (!(data.lesion_fraction >= 0.0 && data.lesion_fraction <= 1.0)) {
    throw ConfigError("data.lesion_fraction must lie in [0, 1]");
  }
  if (probe.train_count < 2 || probe.eval_count < 2) {
    throw ConfigError("probe.train_count and probe.eval_count must be >= 2");
  }
  if (!(probe.lesion_fraction > 0.0 && probe.lesion_fraction < 1.0)) {
    throw ConfigError("probe.lesion_fraction must lie in (0, 1)");
  }
  if (probe.steps < 0) throw ConfigError("probe.steps must be >= 0");
  if (!(probe.lr > 0.0)) throw ConfigError("probe.lr must be positive");
}

json default_run_config_json() { return to_json(RunConfig{}); }

json to_json(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  const ViTConfig& m = t.model;
  return json{
      {"seed", t.seed},
      {"out_dir", cfg.out_dir},
      {"patch", {{"image_side", m.patch.image_side}, {"patch_side", m.patch.patch_side}}},
      {"model",
       {{"enc_depth", m.enc_depth},
        {"enc_heads", m.enc_heads},
        {"enc_dim", m.enc_dim},
        {"dec_depth", m.dec_depth},
        {"dec_heads", m.dec_heads},
        {"dec_dim", m.dec_dim},
        {"mlp_ratio", m.mlp_ratio}}},
      {"mask", {{"ratio", t.mask_ratio}, {"inside_weight", t.inside_weight}}},
      {"optim",
       {{"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"schedule", t.schedule == LrSchedule::kCosine ? "cosine" : "constant"},
        {"warmup_steps", t.warmup_steps},
        {"clip_norm", t.clip_norm}}},
      {"train",
       {{"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"checkpoint_every", t.checkpoint_every}}},
      {"data",
       {{"count", cfg.data.count},
        {"lesion_fraction", cfg.data.lesion_fraction},
        {"manifest", cfg.data.manifest}}},
      {"probe",
       {{"train_count", cfg.probe.train_count},
        {"eval_count", cfg.probe.eval_count},
        {"lesion_fraction", cfg.probe.lesion_fraction},
        {"steps", cfg.probe.steps},
        {"lr", cfg.probe.lr}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    TrainConfig& t = c.train;
    ViTConfig& m = t.model;
    t.seed = j.at("seed").get<std::uint64_t>();
    c.out_dir = j.at("out_dir").get<std::string>();
    m.patch.image_side = j.at("patch").at("image_side").get<int>();
    m.patch.patch_side = j.at("patch").at("patch_side").get<int>();
    const json& mj = j.at("model");
    m.enc_depth = mj.at("enc_depth").get<int>();
    m.enc_heads = mj.at("enc_heads").get<int>();
    m.enc_dim = mj.at("enc_dim").get<int>();
    m.dec_depth = mj.at("dec_depth").get<int>();
    m.dec_heads = mj.at("dec_heads").get<int>();
    m.dec_dim = mj.at("dec_dim").get<int>();
    m.mlp_ratio = mj.at("mlp_ratio").get<int>();
    m.patch.embed_dim = m.enc_dim;
    t.mask_ratio = j.at("mask").at("ratio").get<double>();
    t.inside_weight = j.at("mask").at("inside_weight").get<double>();
    const json& o = j.at("optim");
    t.lr = o.at("lr").get<double>();
    t.weight_decay = o.at("weight_decay").get<double>();
    t.beta1 = o.at("beta1").get<double>();
    t.beta2 = o.at("beta2").get<double>();
    t.eps = o.at("eps").get<double>();
    const auto sched = o.at("schedule").get<std::string>();
    if (sched == "cosine") {
      t.schedule = LrSchedule::kCosine;
    } else if (sched == "constant") {
      t.schedule = LrSchedule::kConstant;
    } else {
      throw ConfigError("optim.schedule must be 'cosine' or 'constant', got '" + sched + "'");
    }
    t.warmup_steps = o.at("warmup_steps").get<int>();
    t.clip_norm = o.at("clip_norm").get<double>();
    const json& tr = j.at("train");
    t.batch_size = tr.at("batch_size").get<int>();
    t.epochs = tr.at("epochs").get<int>();
    t.max_steps = tr.at("max_steps").get<int>();
    t.checkpoint_every = tr.at("checkpoint_every").get<int>();
    c.data.count = j.at("data").at("count").get<int>();
    c.data.lesion_fraction = j.at("data").at("lesion_fraction").get<double>();
    c.data.manifest = j.at("data").at("manifest").get<std::string>();
    const json& p = j.at("probe");
    c.probe.train_count = p.at("train_count").get<int>();
    c.probe.eval_count = p.at("eval_count").get<int>();
    c.probe.lesion_fraction = p.at("lesion_fraction").get<double>();
    c.probe.steps = p.at("steps").get<int>();
    c.probe.lr = p.at("lr").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  c.validate();
  return c;
}

void merge_config(json& base, const json& patch) { merge_at(base, patch, ""); }

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  // Build the nested patch {"a": {"b": value}} and merge it strictly.
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = rest.find('.', start);
    parts.push_back(rest.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw ConfigError("override key '" + key + "' has an empty segment");
    patch = json{{*it, patch}};
  }
  merge_config(doc, patch);
}

RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file,
                             std::span<const std::string> overrides) {
  json doc = default_run_config_json();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + file->string() + " is not valid JSON");
    merge_config(doc, user);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return run_config_from_json(doc);
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.resolved.json");
  if (!out) throw IntegrityError("cannot write " + (dir / "config.resolved.json").string());
  out << to_json(cfg).dump(2) << "\n";
}

}  // namespace hdmae
