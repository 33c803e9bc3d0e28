#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hdmae/masking.hpp"
#include "hdmae/phantom.hpp"
#include "hdmae/trainer.hpp"

using namespace hdmae;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "hdmae_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(HDMAE_CLI_PATH) + " " + args + " > " +
                          (work_dir() / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTiny =
    " --override patch.image_side=16 --override patch.patch_side=4"
    " --override model.enc_dim=16 --override model.enc_heads=2 --override model.enc_depth=1"
    " --override model.dec_dim=8 --override model.dec_heads=2 --override model.dec_depth=1"
    " --override train.batch_size=2 --override train.max_steps=3 --override data.count=4";

}  // namespace

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("pretrain --config " + (work_dir() / "missing.json").string()), 2);
  EXPECT_EQ(run("pretrain --override nope=1"), 2);
  EXPECT_EQ(run("reconstruct"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, PretrainTwiceIsByteIdentical) {
  const auto a = work_dir() / "pa", b = work_dir() / "pb";
  ASSERT_EQ(run("pretrain --override seed=7 --override out_dir=" + a.string() + kTiny), 0);
  ASSERT_EQ(run("pretrain --override seed=7 --override out_dir=" + b.string() + kTiny), 0);
  EXPECT_EQ(slurp(a / "final.ckpt"), slurp(b / "final.ckpt"));
  EXPECT_TRUE(fs::exists(a / "metrics.csv"));
  EXPECT_TRUE(fs::exists(a / "config.resolved.json"));
  const auto ck = load_checkpoint(a / "final.ckpt");
  EXPECT_EQ(ck.config.seed, 7u);
  EXPECT_EQ(ck.step, 3);

  const auto c = work_dir() / "pc";
  ASSERT_EQ(run("pretrain --override mask.inside_weight=1 --override out_dir=" + c.string() + kTiny), 0);
  EXPECT_EQ(load_checkpoint(c / "final.ckpt").config.inside_weight, 1.0);
}

TEST(Cli, ReconstructTriptych) {
  const auto run_dir = work_dir() / "rc_model";
  ASSERT_EQ(run("pretrain --override out_dir=" + run_dir.string() + kTiny), 0);
  const auto ckpt = (run_dir / "final.ckpt").string();
  const auto out = work_dir() / "rc";
  ASSERT_EQ(run("reconstruct --checkpoint " + ckpt + " --seed 5 --ratio 0.001 --out " + out.string()), 0);
  const auto orig = load_pgm(out / "orig.pgm");
  const auto masked = load_pgm(out / "masked.pgm");
  const auto recon = load_pgm(out / "recon.pgm");
  const PatchConfig patch{16, 4, 16};
  const auto po = patchify<float>(orig, patch), pm = patchify<float>(masked, patch),
             pr = patchify<float>(recon, patch);
  int differing = 0;
  for (int t = 0; t < 16; ++t) {
    bool diff_mask = false, diff_recon = false;
    for (int k = 0; k < 16; ++k) {
      const std::size_t i = static_cast<std::size_t>(t * 16 + k);
      diff_mask |= po.data()[i] != pm.data()[i];
      diff_recon |= po.data()[i] != pr.data()[i];
    }
    differing += diff_mask;
    // Only the masked patch may differ in the reconstruction.
    if (!diff_mask) {
      for (int k = 0; k < 16; ++k) {
        const std::size_t i = static_cast<std::size_t>(t * 16 + k);
        EXPECT_EQ(pm.data()[i], po.data()[i]);
      }
      EXPECT_FALSE(diff_recon) << t;
    }
  }
  EXPECT_EQ(differing, 1);

  const auto out2 = work_dir() / "rc2";
  ASSERT_EQ(run("reconstruct --checkpoint " + ckpt + " --seed 5 --ratio 0.001 --out " + out2.string()), 0);
  EXPECT_EQ(slurp(out / "recon.pgm"), slurp(out2 / "recon.pgm"));
  EXPECT_EQ(run("reconstruct --checkpoint " + (work_dir() / "none.ckpt").string()), 1);
  EXPECT_EQ(run("reconstruct --checkpoint " + ckpt + " --ratio 1.5"), 2);
}

TEST(Cli, MaskStatsRates) {
  const auto out1 = work_dir() / "ms1", out4 = work_dir() / "ms4";
  ASSERT_EQ(run("mask-stats --draws 10000 --override mask.inside_weight=1 --override out_dir=" + out1.string()), 0);
  ASSERT_EQ(run("mask-stats --draws 10000 --override mask.inside_weight=4 --override out_dir=" + out4.string()), 0);
  auto read = [](const fs::path& p) {
    std::map<std::string, double> m;
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto c = line.find(',');
      m[line.substr(0, c)] = std::stod(line.substr(c + 1));
    }
    return m;
  };
  const auto s1 = read(out1 / "mask_stats.csv");
  const auto s4 = read(out4 / "mask_stats.csv");
  EXPECT_NEAR(s1.at("inside_rate"), s1.at("outside_rate"),
              3 * std::hypot(s1.at("inside_stderr"), s1.at("outside_stderr")));
  EXPECT_GT(s4.at("inside_rate") - s4.at("outside_rate"),
            3 * std::hypot(s4.at("inside_stderr"), s4.at("outside_stderr")));
  // Normalised frequency grid sums to the configured ratio.
  std::ifstream in(out4 / "mask_frequency.csv");
  std::string line;
  std::getline(in, line);
  double total = 0;
  int n = 0;
  while (std::getline(in, line)) {
    total += std::stod(line.substr(line.rfind(',') + 1));
    ++n;
  }
  EXPECT_EQ(n, 64);
  EXPECT_NEAR(total / n, 0.75, 1e-3);
  EXPECT_EQ(load_pgm(out4 / "mask_frequency.pgm").side, 8);
}

TEST(Cli, GradcheckExitCodes) {
  EXPECT_EQ(run("gradcheck"), 0);
  const auto log = slurp(work_dir() / "last.log");
  EXPECT_NE(log.find("PASS mae_end_to_end"), std::string::npos);
  EXPECT_EQ(run("gradcheck --inject-broken"), 1);
  EXPECT_NE(slurp(work_dir() / "last.log").find("broken_scale"), std::string::npos);
}

TEST(Cli, PhantomGenManifest) {
  const auto out = work_dir() / "pg";
  ASSERT_EQ(run("phantom-gen --seed 3 --count 10 --lesion-fraction 0.3 --out " + out.string()), 0);
  const auto rows = read_manifest(out / "manifest.csv");
  ASSERT_EQ(rows.size(), 10u);
  int lesions = 0;
  for (const auto& r : rows) lesions += r.label;
  EXPECT_EQ(lesions, 3);
  const auto first = slurp(out / rows[0].path);
  const auto out2 = work_dir() / "pg2";
  ASSERT_EQ(run("phantom-gen --seed 3 --count 10 --lesion-fraction 0.3 --out " + out2.string()), 0);
  EXPECT_EQ(slurp(out2 / rows[0].path), first);
  EXPECT_EQ(slurp(out2 / "manifest.csv"), slurp(out / "manifest.csv"));
  const auto data = load_manifest_dataset(out / "manifest.csv", PatchConfig{});
  EXPECT_EQ(data.size(), 10u);
}

TEST(Cli, ProbeReport) {
  const auto run_dir = work_dir() / "probe_model";
  ASSERT_EQ(run("pretrain --override out_dir=" + run_dir.string() + kTiny), 0);
  const auto out = work_dir() / "probe";
  ASSERT_EQ(run("probe --checkpoint " + (run_dir / "final.ckpt").string() +
                " --override probe.train_count=16 --override probe.eval_count=16"
                " --override probe.steps=50 --override out_dir=" + out.string()),
            0);
  std::ifstream in(out / "probe.csv");
  std::string header, train_row, eval_row;
  std::getline(in, header);
  std::getline(in, train_row);
  std::getline(in, eval_row);
  EXPECT_EQ(header, "split,auroc,f1,accuracy,n");
  EXPECT_EQ(train_row.rfind("train,", 0), 0u);
  EXPECT_EQ(eval_row.rfind("eval,", 0), 0u);
  EXPECT_EQ(eval_row.substr(eval_row.rfind(',') + 1), "16");
}
