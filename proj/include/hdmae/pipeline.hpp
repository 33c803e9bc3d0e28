#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hdmae/config.hpp"
#include "hdmae/phantom.hpp"
#include "hdmae/probe.hpp"

namespace hdmae {

// HDMAE_THREADS when set to a positive integer, otherwise the hardware
// concurrency (at least 1).
int worker_threads();

// Probe datasets are drawn from their own seed ranges so they never share
// phantoms with the pretraining set of the same run.
inline constexpr std::uint64_t kProbeTrainSeedOffset = 100000;
inline constexpr std::uint64_t kProbeEvalSeedOffset = 200000;

// Phantoms from data.manifest if set, else make_dataset(seed, count, ...).
std::vector<PhantomSample> pretrain_dataset(const RunConfig& cfg);

FeatureMatrix dataset_features(const ModelParams<float>& params, const ViTConfig& cfg,
                               const std::vector<PhantomSample>& data, int threads);

struct ProbeSplitMetrics {
  std::string split;
  double auroc = 0;
  double f1 = 0;
  double accuracy = 0;
  int n = 0;
};

struct ProbeReport {
  std::vector<ProbeSplitMetrics> rows;  // "train" then "eval"
  ProbeHead head;
};

// Fits a linear probe on frozen encoder features of the probe training set
// and scores both splits.
ProbeReport run_probe(const ModelParams<float>& params, const RunConfig& cfg, int threads);

// Header `split,auroc,f1,accuracy,n`.
void write_probe_csv(const ProbeReport& report, const std::filesystem::path& path);

}  // namespace hdmae
