#include "hdmae/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <thread>

#include "hdmae/errors.hpp"

namespace hdmae {

int worker_threads() {
  if (const char* env = std::getenv("HDMAE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<PhantomSample> pretrain_dataset(const RunConfig& cfg) {
  const PatchConfig& patch = cfg.train.model.patch;
  if (!cfg.data.manifest.empty()) return load_manifest_dataset(cfg.data.manifest, patch);
  return make_dataset(cfg.train.seed, cfg.data.count, cfg.data.lesion_fraction, patch);
}

FeatureMatrix dataset_features(const ModelParams<float>& params, const ViTConfig& cfg,
                               const std::vector<PhantomSample>& data, int threads) {
  FeatureMatrix out(data.size());
  const std::size_t n = data.size();
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(threads), 1, std::max<std::size_t>(n, 1));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) {
      out[i] = extract_features(params, cfg, data[i].image);
    }
  };
  if (workers == 1) {
    work(0);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

std::vector<int> labels_of(const std::vector<PhantomSample>& data) {
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& s : data) labels.push_back(s.label);
  return labels;
}

ProbeSplitMetrics score_split(const std::string& split, const ProbeHead& head,
                              const FeatureMatrix& feats, const std::vector<int>& labels) {
  const auto scores = head.scores(feats);
  const auto m = f1_accuracy(scores, labels);
  return {split, auroc(scores, labels), m.f1, m.accuracy, static_cast<int>(labels.size())};
}

}  // namespace

ProbeReport run_probe(const ModelParams<float>& params, const RunConfig& cfg, int threads) {
  const ViTConfig& model = cfg.train.model;
  const auto train_set = make_dataset(cfg.train.seed + kProbeTrainSeedOffset, cfg.probe.train_count,
                                      cfg.probe.lesion_fraction, model.patch);
  const auto eval_set = make_dataset(cfg.train.seed + kProbeEvalSeedOffset, cfg.probe.eval_count,
                                     cfg.probe.lesion_fraction, model.patch);
  const auto train_feats = dataset_features(params, model, train_set, threads);
  const auto eval_feats = dataset_features(params, model, eval_set, threads);
  const auto train_labels = labels_of(train_set);
  const auto eval_labels = labels_of(eval_set);

  ProbeOptions opts;
  opts.steps = cfg.probe.steps;
  opts.lr = cfg.probe.lr;
  ProbeReport report;
  report.head = train_probe(train_feats, train_labels, opts);
  report.rows.push_back(score_split("train", report.head, train_feats, train_labels));
  report.rows.push_back(score_split("eval", report.head, eval_feats, eval_labels));
  return report;
}

void write_probe_csv(const ProbeReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IntegrityError("cannot write " + path.string());
  out << "split,auroc,f1,accuracy,n\n" << std::setprecision(10);
  for (const auto& r : report.rows) {
    out << r.split << ',' << r.auroc << ',' << r.f1 << ',' << r.accuracy << ',' << r.n << "\n";
  }
}

}  // namespace hdmae
