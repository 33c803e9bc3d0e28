#include <gtest/gtest.h>

#include <cmath>

#include <filesystem>
#include <fstream>

#include "hdmae/config.hpp"
#include "hdmae/errors.hpp"
#include "hdmae/pipeline.hpp"

using namespace hdmae;
using nlohmann::json;
namespace fs = std::filesystem;

TEST(RunConfigTest, DefaultsRoundTrip) {
  const RunConfig def;
  const auto back = run_config_from_json(default_run_config_json());
  EXPECT_EQ(back.train, def.train);
  EXPECT_EQ(back.out_dir, def.out_dir);
  EXPECT_EQ(to_json(back), default_run_config_json());
  EXPECT_EQ(def.train.lr, 2.5e-4);
  EXPECT_EQ(def.train.weight_decay, 0.04);
  EXPECT_EQ(def.train.epochs, 83);
}

TEST(RunConfigTest, OverridesUseDottedPaths) {
  json doc = default_run_config_json();
  apply_override(doc, "seed=7");
  apply_override(doc, "mask.inside_weight=1");
  apply_override(doc, "optim.schedule=constant");
  apply_override(doc, "optim.lr=1");
  apply_override(doc, "out_dir=some/dir");
  const auto cfg = run_config_from_json(doc);
  EXPECT_EQ(cfg.train.seed, 7u);
  EXPECT_EQ(cfg.train.inside_weight, 1.0);
  EXPECT_EQ(cfg.train.schedule, LrSchedule::kConstant);
  EXPECT_EQ(cfg.train.lr, 1.0);
  EXPECT_EQ(cfg.out_dir, "some/dir");
}

TEST(RunConfigTest, UnknownKeysAndTypeMismatchesRejected) {
  json doc = default_run_config_json();
  EXPECT_THROW(apply_override(doc, "mask.ratoi=0.5"), ConfigError);
  EXPECT_THROW(apply_override(doc, "model.enc_depth=2.5"), ConfigError);
  EXPECT_THROW(apply_override(doc, "seed"), ConfigError);
  EXPECT_THROW(apply_override(doc, "mask=3"), ConfigError);
  EXPECT_THROW(merge_config(doc, json{{"extra", 1}}), ConfigError);
  EXPECT_THROW(merge_config(doc, json{{"train", {{"batch", 2}}}}), ConfigError);
}

TEST(RunConfigTest, SemanticValidation) {
  json doc = default_run_config_json();
  apply_override(doc, "mask.ratio=1.0");
  EXPECT_THROW(run_config_from_json(doc), ConfigError);
  doc = default_run_config_json();
  apply_override(doc, "optim.schedule=\"linear\"");
  EXPECT_THROW(run_config_from_json(doc), ConfigError);
  doc = default_run_config_json();
  apply_override(doc, "model.enc_heads=3");
  EXPECT_THROW(run_config_from_json(doc), ConfigError);
}

TEST(RunConfigTest, FileAndResolvedEcho) {
  const auto dir = fs::temp_directory_path() / "hdmae_config_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "cfg.json");
    out << R"({"seed": 3, "train": {"max_steps": 5}, "data": {"count": 12}})";
  }
  const std::string overrides[] = {"seed=4", "out_dir=" + (dir / "run").string()};
  const auto cfg = resolve_run_config(dir / "cfg.json", overrides);
  EXPECT_EQ(cfg.train.seed, 4u);
  EXPECT_EQ(cfg.train.max_steps, 5);
  EXPECT_EQ(cfg.data.count, 12);
  write_resolved_config(cfg, cfg.out_dir);
  std::ifstream in(dir / "run" / "config.resolved.json");
  const auto echoed = run_config_from_json(json::parse(in));
  EXPECT_EQ(echoed.train, cfg.train);
  EXPECT_THROW(resolve_run_config(dir / "missing.json", {}), ConfigError);
  {
    std::ofstream out(dir / "bad.json");
    out << "{ not json";
  }
  EXPECT_THROW(resolve_run_config(dir / "bad.json", {}), ConfigError);
  fs::remove_all(dir);
}

TEST(Pipeline, ThreadEnvironmentVariable) {
  setenv("HDMAE_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3);
  setenv("HDMAE_THREADS", "zero", 1);
  EXPECT_GE(worker_threads(), 1);
  unsetenv("HDMAE_THREADS");
  EXPECT_GE(worker_threads(), 1);
}

TEST(Pipeline, FeaturesIndependentOfThreadCount) {
  ViTConfig cfg;
  cfg.patch = PatchConfig{16, 4, 16};
  cfg.enc_dim = 16;
  cfg.enc_heads = 2;
  cfg.enc_depth = 1;
  cfg.dec_dim = 8;
  cfg.dec_heads = 2;
  cfg.dec_depth = 1;
  const auto params = init_params<float>(cfg, 0);
  const auto data = make_dataset(0, 5, 0.4, cfg.patch);
  EXPECT_EQ(dataset_features(params, cfg, data, 1), dataset_features(params, cfg, data, 3));
}
