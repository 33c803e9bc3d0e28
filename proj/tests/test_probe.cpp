#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "hdmae/errors.hpp"
#include "hdmae/phantom.hpp"
#include "hdmae/probe.hpp"

using namespace hdmae;

namespace {

// All-pairs Mann-Whitney count, written without ranks.
double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / pairs;
}

}  // namespace

TEST(Auroc, WorkedExamples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.6, 0.4, 0.1}, std::vector<int>{1, 0, 1, 0}), 0.75);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}), 0.5);
}

TEST(Auroc, MissingClassIsContractError) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), ContractError);
  EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<int>{1, 0}), ContractError);
}

TEST(Auroc, MatchesBruteForceAndProperties) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + gen() % 49;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(gen() % 20) / 20.0;  // many ties
      y[i] = static_cast<int>(gen() & 1u);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(auroc(s, y), brute_auroc(s, y));
    std::vector<double> t(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = std::exp(3 * s[i]) - 7;
      neg[i] = -s[i];
    }
    EXPECT_EQ(auroc(t, y), auroc(s, y));
    EXPECT_NEAR(auroc(s, y) + auroc(neg, y), 1.0, 1e-12);
  }
}

TEST(F1Accuracy, WorkedExamples) {
  const std::vector<int> y{1, 1, 1, 0, 0, 0};
  // TP=2 FP=1 FN=1 TN=2
  const auto m = f1_accuracy(std::vector<double>{0.9, 0.8, 0.1, 0.7, 0.2, 0.3}, y);
  EXPECT_EQ(m.precision, 2.0 / 3.0);
  EXPECT_EQ(m.recall, 2.0 / 3.0);
  EXPECT_EQ(m.f1, 2.0 / 3.0);
  EXPECT_EQ(m.accuracy, 4.0 / 6.0);
  const auto perfect = f1_accuracy(std::vector<double>{1, 1, 1, 0, 0, 0}, y);
  EXPECT_EQ(perfect.f1, 1.0);
  EXPECT_EQ(perfect.accuracy, 1.0);
  const auto none = f1_accuracy(std::vector<double>{0, 0, 0, 0, 0, 0}, y);
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_EQ(none.accuracy, 0.5);
  // Scores at the threshold count as positive.
  EXPECT_EQ(f1_accuracy(std::vector<double>{0.5, 0.4}, std::vector<int>{1, 0}).accuracy, 1.0);
}

TEST(Probe, SeparableOneDimensional) {
  FeatureMatrix x;
  std::vector<int> y;
  for (int i = 0; i < 10; ++i) {
    x.push_back({i % 2 ? 1.0 : -1.0});
    y.push_back(i % 2);
  }
  ProbeOptions opts;
  opts.steps = 500;
  std::vector<double> trace;
  const auto head = train_probe(x, y, opts, &trace);
  EXPECT_EQ(f1_accuracy(head.scores(x), y).accuracy, 1.0);
  ASSERT_EQ(trace.size(), 501u);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1]);
}

TEST(Probe, ZeroStepsGivesHalfScores) {
  FeatureMatrix x{{1.0, 2.0}, {3.0, -1.0}};
  std::vector<int> y{0, 1};
  ProbeOptions opts;
  opts.steps = 0;
  const auto head = train_probe(x, y, opts);
  EXPECT_EQ(head.bias, 0.0);
  for (double w : head.weight) EXPECT_EQ(w, 0.0);
  for (double s : head.scores(x)) EXPECT_EQ(s, 0.5);
}

TEST(Probe, SingleClassIsConfigError) {
  FeatureMatrix x{{1.0}, {2.0}};
  EXPECT_THROW(train_probe(x, std::vector<int>{1, 1}), ConfigError);
}

TEST(Probe, StandardisationIsFoldedIntoHead) {
  // Logits on raw features equal the logits of the standardised problem.
  FeatureMatrix x{{10.0, 0.1}, {12.0, 0.3}, {11.0, -0.2}, {15.0, 0.0}};
  std::vector<int> y{0, 1, 0, 1};
  ProbeOptions opts;
  opts.steps = 50;
  const auto head = train_probe(x, y, opts);
  ProbeOptions raw = opts;
  raw.standardize = false;
  std::vector<double> mean(2, 0), sd(2, 0);
  for (const auto& r : x)
    for (int j = 0; j < 2; ++j) mean[j] += r[static_cast<std::size_t>(j)] / 4;
  for (const auto& r : x)
    for (int j = 0; j < 2; ++j) sd[j] += std::pow(r[static_cast<std::size_t>(j)] - mean[j], 2) / 4;
  FeatureMatrix z = x;
  for (auto& r : z)
    for (int j = 0; j < 2; ++j) r[static_cast<std::size_t>(j)] = (r[static_cast<std::size_t>(j)] - mean[j]) / std::sqrt(sd[j]);
  const auto zhead = train_probe(z, y, raw);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(head.logit(x[i]), zhead.logit(z[i]), 1e-9);
}

TEST(Features, DeterministicLengthAndMeanPooled) {
  ViTConfig cfg;
  cfg.patch = PatchConfig{16, 4, 16};
  cfg.enc_dim = 16;
  cfg.enc_heads = 2;
  cfg.enc_depth = 1;
  cfg.dec_dim = 8;
  cfg.dec_heads = 2;
  cfg.dec_depth = 1;
  const auto params = init_params<float>(cfg, 1);
  const auto img = synth_phantom(1, cfg.patch, true).image;
  const auto f = extract_features(params, cfg, img);
  EXPECT_EQ(f.size(), 16u);
  EXPECT_EQ(f, extract_features(params, cfg, img));

  NoGradGuard no_grad;
  const auto pos = PositionTables<float>::make(cfg);
  std::vector<std::int64_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  const auto tokens = encode_visible(params, cfg, patchify<float>(img, cfg.patch), all, pos.enc);
  for (int d = 0; d < 16; ++d) {
    double m = 0;
    for (int t = 0; t < 16; ++t) m += tokens.data()[static_cast<std::size_t>(t * 16 + d)];
    EXPECT_NEAR(f[static_cast<std::size_t>(d)], m / 16, 1e-6);
  }
  auto wrong = cfg;
  wrong.enc_dim = 32;
  wrong.patch.embed_dim = 32;
  EXPECT_THROW(extract_features(params, wrong, img), ContractError);
}
