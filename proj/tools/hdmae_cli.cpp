// Command-line front end: pretrain, reconstruct, mask-stats, probe,
// gradcheck, phantom-gen. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hdmae/config.hpp"
#include "hdmae/errors.hpp"
#include "hdmae/gradcheck_suite.hpp"
#include "hdmae/masking.hpp"
#include "hdmae/model.hpp"
#include "hdmae/phantom.hpp"
#include "hdmae/pipeline.hpp"
#include "hdmae/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hdmae;

namespace {

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON run config (defaults apply to missing keys)");
    cmd->add_option("--override", overrides, "Dotted key=value override, repeatable");
  }

  RunConfig resolve() const {
    std::optional<fs::path> file;
    if (!config.empty()) file = config;
    return resolve_run_config(file, overrides);
  }
};

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

int cmd_pretrain(const ConfigArgs& args) {
  const RunConfig cfg = args.resolve();
  const fs::path out = cfg.out_dir;
  write_resolved_config(cfg, out);
  const auto data = pretrain_dataset(cfg);
  TrainOptions opts;
  opts.checkpoint_dir = out;
  opts.threads = worker_threads();
  const int total = cfg.train.total_steps(static_cast<int>(data.size()));
  opts.on_step = [total](const StepInfo& s) {
    if (s.step == 1 || s.step % 50 == 0 || s.step == total) {
      std::cerr << "step " << s.step << "/" << total << " lr " << s.lr << " loss " << s.loss
                << "\n";
    }
  };
  const auto result = train(cfg.train, data, opts);
  write_metrics_csv(result.log, out / "metrics.csv");
  std::cout << "wrote " << (out / "final.ckpt").string() << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& checkpoint, const std::string& image_path,
                    const std::string& region_path, std::uint64_t seed, bool lesion,
                    double ratio, double weight, const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const ViTConfig& model = ckpt.config.model;
  const PatchConfig& patch = model.patch;

  ImageGray image;
  RegionMask region;
  if (!image_path.empty()) {
    image = load_pgm(image_path);
    if (image.side != patch.image_side) image = resize_bilinear(image, patch.image_side);
    region = region_path.empty() ? default_contour(patch.grid_side(), 0.5) : load_region(region_path);
    if (region.grid_side != patch.grid_side()) {
      throw ConfigError("region grid side does not match the checkpoint's patch grid");
    }
  } else {
    auto sample = synth_phantom(seed, patch, lesion);
    image = std::move(sample.image);
    region = std::move(sample.region);
  }

  Rng rng = make_stream(seed, StreamPurpose::kMasking);
  const MaskPlan plan = context_aware_mask(region, ratio, weight, rng);

  Tensor<float> pred;
  {
    NoGradGuard no_grad;
    const auto pos = PositionTables<float>::make(model);
    const auto patches = patchify<float>(image, patch);
    pred = mae_forward(ckpt.params, model, pos, patches, plan).pred;
  }

  const int p = patch.patch_side;
  const int g = patch.grid_side();
  const std::size_t pp = static_cast<std::size_t>(patch.patch_pixels());
  ImageGray masked = image;
  ImageGray recon = image;
  const auto pv = pred.data();
  for (const std::int64_t t : plan.masked) {
    const int gr = static_cast<int>(t) / g;
    const int gc = static_cast<int>(t) % g;
    for (int r = 0; r < p; ++r) {
      for (int c = 0; c < p; ++c) {
        const std::size_t idx =
            static_cast<std::size_t>(gr * p + r) * static_cast<std::size_t>(image.side) +
            static_cast<std::size_t>(gc * p + c);
        const float v = pv[static_cast<std::size_t>(t) * pp + static_cast<std::size_t>(r * p + c)];
        masked.pixels[idx] = 0.0f;
        recon.pixels[idx] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }

  const fs::path out = out_dir;
  fs::create_directories(out);
  save_pgm(image, out / "orig.pgm");
  save_pgm(masked, out / "masked.pgm");
  save_pgm(recon, out / "recon.pgm");
  write_json({{"command", "reconstruct"},
              {"checkpoint", checkpoint},
              {"image", image_path},
              {"region", region_path},
              {"seed", seed},
              {"lesion", lesion},
              {"ratio", ratio},
              {"inside_weight", weight},
              {"masked_tokens", plan.masked.size()},
              {"train_config", to_json(ckpt.config)}},
             out / "config.resolved.json");
  std::cout << "masked " << plan.masked.size() << " of " << plan.n_tokens << " tokens; wrote "
            << out.string() << "\n";
  return 0;
}

int cmd_mask_stats(const ConfigArgs& args, int draws, const std::string& region_path) {
  if (draws < 1) throw ConfigError("--draws must be >= 1");
  const RunConfig cfg = args.resolve();
  const PatchConfig& patch = cfg.train.model.patch;
  const RegionMask region = region_path.empty()
                                ? synth_phantom(cfg.train.seed, patch, false).region
                                : load_region(region_path);
  if (region.grid_side != patch.grid_side()) {
    throw ConfigError("region grid side does not match patch.image_side / patch.patch_side");
  }
  Rng rng = make_stream(cfg.train.seed, StreamPurpose::kMasking);
  std::vector<MaskPlan> plans;
  plans.reserve(static_cast<std::size_t>(draws));
  for (int i = 0; i < draws; ++i) {
    plans.push_back(context_aware_mask(region, cfg.train.mask_ratio, cfg.train.inside_weight, rng));
  }
  const MaskStats stats = mask_stats(plans, region);

  const fs::path out = cfg.out_dir;
  write_resolved_config(cfg, out);
  {
    std::ofstream csv(out / "mask_stats.csv");
    if (!csv) throw IntegrityError("cannot write mask_stats.csv");
    csv << std::setprecision(10) << "metric,value\n"
        << "draws," << stats.plans << "\n"
        << "mask_ratio," << cfg.train.mask_ratio << "\n"
        << "inside_weight," << cfg.train.inside_weight << "\n"
        << "inside_tokens," << region.inside_count() << "\n"
        << "outside_tokens," << region.token_count() - region.inside_count() << "\n"
        << "inside_rate," << stats.inside_rate << "\n"
        << "inside_stderr," << stats.inside_stderr << "\n"
        << "outside_rate," << stats.outside_rate << "\n"
        << "outside_stderr," << stats.outside_stderr << "\n"
        << "mean_masked_fraction," << stats.mean_masked_fraction << "\n";
  }
  {
    std::ofstream csv(out / "mask_frequency.csv");
    if (!csv) throw IntegrityError("cannot write mask_frequency.csv");
    csv << std::setprecision(10) << "token,row,col,inside,frequency\n";
    for (int t = 0; t < region.token_count(); ++t) {
      csv << t << ',' << t / region.grid_side << ',' << t % region.grid_side << ','
          << (region.is_inside(t) ? 1 : 0) << ',' << stats.frequency[static_cast<std::size_t>(t)]
          << "\n";
    }
  }
  ImageGray freq;
  freq.side = region.grid_side;
  for (const double f : stats.frequency) freq.pixels.push_back(static_cast<float>(f));
  save_pgm(freq, out / "mask_frequency.pgm");
  std::cout << "inside_rate " << stats.inside_rate << " +- " << stats.inside_stderr
            << ", outside_rate " << stats.outside_rate << " +- " << stats.outside_stderr << "\n";
  return 0;
}

int cmd_probe(const ConfigArgs& args, const std::string& checkpoint) {
  RunConfig cfg = args.resolve();
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  cfg.train.model = ckpt.config.model;
  const fs::path out = cfg.out_dir;
  write_resolved_config(cfg, out);
  const auto report = run_probe(ckpt.params, cfg, worker_threads());
  write_probe_csv(report, out / "probe.csv");
  for (const auto& r : report.rows) {
    std::cout << r.split << ": auroc " << r.auroc << " f1 " << r.f1 << " accuracy "
              << r.accuracy << " n " << r.n << "\n";
  }
  return 0;
}

int cmd_gradcheck(bool inject_broken) {
  int failed = 0;
  for (const auto& c : gradcheck_registry(inject_broken)) {
    const auto r = c.run(GradCheckOptions{});
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_err " << std::scientific
              << std::setprecision(3) << r.max_rel_err << std::defaultfloat;
    if (!r.passed && !r.detail.empty()) std::cout << " (" << r.detail << ")";
    std::cout << "\n";
    if (!r.passed) {
      ++failed;
      std::cerr << "gradient check failed for op '" << r.name << "'\n";
    }
  }
  return failed == 0 ? 0 : 1;
}

int cmd_phantom_gen(std::uint64_t seed, int count, double lesion_fraction, int image_side,
                    int patch_side, const std::string& out_dir) {
  if (count < 1) throw ConfigError("--count must be >= 1");
  if (!(lesion_fraction >= 0.0 && lesion_fraction <= 1.0)) {
    throw ConfigError("--lesion-fraction must lie in [0, 1]");
  }
  PatchConfig patch;
  patch.image_side = image_side;
  patch.patch_side = patch_side;
  patch.validate();
  const auto data = make_dataset(seed, count, lesion_fraction, patch);
  const fs::path out = out_dir;
  fs::create_directories(out);
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "phantom_%05zu", i);
    const std::string img = std::string(stem) + ".pgm";
    const std::string reg = std::string(stem) + ".region";
    save_pgm(data[i].image, out / img);
    save_region(data[i].region, out / reg);
    rows.push_back({data[i].seed, data[i].label, img, reg});
  }
  write_manifest(rows, out / "manifest.csv");
  write_json({{"command", "phantom-gen"},
              {"seed", seed},
              {"count", count},
              {"lesion_fraction", lesion_fraction},
              {"image_side", image_side},
              {"patch_side", patch_side}},
             out / "config.resolved.json");
  std::cout << "wrote " << rows.size() << " phantoms to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"High-definition X-ray masked autoencoder toolkit"};
  app.require_subcommand(1);

  ConfigArgs pretrain_args;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the masked autoencoder");
  pretrain_args.attach(pretrain);

  std::string rc_ckpt, rc_image, rc_region, rc_out = "recon";
  std::uint64_t rc_seed = 0;
  bool rc_lesion = false;
  double rc_ratio = 0.75, rc_weight = 4.0;
  auto* reconstruct = app.add_subcommand("reconstruct", "Write orig/masked/recon PGM triptych");
  reconstruct->add_option("--checkpoint", rc_ckpt, "Checkpoint file")->required();
  reconstruct->add_option("--image", rc_image, "Input PGM (default: synthesize a phantom)");
  reconstruct->add_option("--region", rc_region, "Region file for --image");
  reconstruct->add_option("--seed", rc_seed, "Phantom and masking seed");
  reconstruct->add_flag("--lesion", rc_lesion, "Synthesized phantom carries a lesion");
  reconstruct->add_option("--ratio", rc_ratio, "Mask ratio in (0, 1)");
  reconstruct->add_option("--weight", rc_weight, "Inside-region weight (>= 1)");
  reconstruct->add_option("--out", rc_out, "Output directory");

  ConfigArgs ms_args;
  int ms_draws = 10000;
  std::string ms_region;
  auto* mstats = app.add_subcommand("mask-stats", "Monte-Carlo mask statistics");
  ms_args.attach(mstats);
  mstats->add_option("--draws", ms_draws, "Number of mask plans to draw");
  mstats->add_option("--region", ms_region, "Region file (default: phantom region of seed)");

  ConfigArgs probe_args;
  std::string pr_ckpt;
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen encoder features");
  probe_args.attach(probe);
  probe->add_option("--checkpoint", pr_ckpt, "Checkpoint file")->required();

  bool gc_broken = false;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck_cmd->add_flag("--inject-broken", gc_broken,
                          "Append a deliberately wrong adjoint (harness self-test)");

  std::uint64_t pg_seed = 0;
  int pg_count = 16, pg_image = 64, pg_patch = 8;
  double pg_frac = 0.5;
  std::string pg_out = "phantoms";
  auto* phantom = app.add_subcommand("phantom-gen", "Write synthetic phantoms and a manifest");
  phantom->add_option("--seed", pg_seed, "Dataset seed");
  phantom->add_option("--count", pg_count, "Number of phantoms");
  phantom->add_option("--lesion-fraction", pg_frac, "Fraction carrying a lesion");
  phantom->add_option("--image-side", pg_image, "Image side in pixels");
  phantom->add_option("--patch-side", pg_patch, "Patch side in pixels");
  phantom->add_option("--out", pg_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) return cmd_pretrain(pretrain_args);
    if (*reconstruct) {
      return cmd_reconstruct(rc_ckpt, rc_image, rc_region, rc_seed, rc_lesion, rc_ratio,
                             rc_weight, rc_out);
    }
    if (*mstats) return cmd_mask_stats(ms_args, ms_draws, ms_region);
    if (*probe) return cmd_probe(probe_args, pr_ckpt);
    if (*gradcheck_cmd) return cmd_gradcheck(gc_broken);
    if (*phantom) return cmd_phantom_gen(pg_seed, pg_count, pg_frac, pg_image, pg_patch, pg_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
