#include "hdmae/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hdmae/errors.hpp"

namespace hdmae {

std::vector<double> extract_features(const ModelParams<float>& params,
                                     const ViTConfig& cfg,
                                     const ImageGray& image) {
  check_params(params, cfg);
  NoGradGuard no_grad;
  const auto patches = patchify<float>(image, cfg.patch);
  const auto pos = sincos_pos_embed<float>(cfg.patch.grid_side(), cfg.enc_dim);
  std::vector<std::int64_t> all(static_cast<std::size_t>(cfg.patch.token_count()));
  std::iota(all.begin(), all.end(), 0);
  const auto tokens = encode_visible(params, cfg, patches, all, pos);
  const auto n = tokens.dim(0);
  const auto d = tokens.dim(1);
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  auto data = tokens.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(j)] += data[static_cast<std::size_t>(i * d + j)];
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

double ProbeHead::logit(std::span<const double> features) const {
  if (features.size() != weight.size()) {
    throw DimensionError("probe: feature length " + std::to_string(features.size()) +
                         " vs head " + std::to_string(weight.size()));
  }
  double z = bias;
  for (std::size_t i = 0; i < weight.size(); ++i) z += weight[i] * features[i];
  return z;
}

double ProbeHead::score(std::span<const double> features) const {
  return 1.0 / (1.0 + std::exp(-logit(features)));
}

std::vector<double> ProbeHead::scores(const FeatureMatrix& features) const {
  std::vector<double> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(score(f));
  return out;
}

namespace {

void check_labels(const FeatureMatrix& features, std::span<const int> labels) {
  if (features.size() != labels.size() || features.empty()) {
    throw ContractError("probe: " + std::to_string(features.size()) + " feature rows for " +
                        std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError("probe: labels must be 0 or 1");
  }
}

// log(1 + exp(z)) without overflow.
double softplus(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

}  // namespace

double probe_loss(const ProbeHead& head, const FeatureMatrix& features,
                  std::span<const int> labels) {
  check_labels(features, labels);
  double total = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double z = head.logit(features[i]);
    // -[y log s(z) + (1 - y) log(1 - s(z))]
    total += labels[i] ? softplus(-z) : softplus(z);
  }
  return total / static_cast<double>(features.size());
}

std::vector<double> probe_gradient(const ProbeHead& head,
                                   const FeatureMatrix& features,
                                   std::span<const int> labels) {
  check_labels(features, labels);
  const std::size_t d = head.weight.size();
  std::vector<double> grad(d + 1, 0.0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double r = head.score(features[i]) - labels[i];
    for (std::size_t j = 0; j < d; ++j) grad[j] += r * features[i][j];
    grad[d] += r;
  }
  for (auto& g : grad) g /= static_cast<double>(features.size());
  return grad;
}

ProbeHead train_probe(const FeatureMatrix& features, std::span<const int> labels,
                      const ProbeOptions& options,
                      std::vector<double>* loss_trace) {
  check_labels(features, labels);
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == static_cast<long>(labels.size())) {
    throw ConfigError("train_probe: labels contain a single class");
  }
  if (options.steps < 0 || !(options.lr > 0)) {
    throw ConfigError("train_probe: steps must be >= 0 and lr > 0");
  }
  const std::size_t d = features.front().size();
  const double n = static_cast<double>(features.size());
  std::vector<double> mu(d, 0.0), sd(d, 1.0);
  if (options.standardize) {
    for (const auto& f : features)
      for (std::size_t j = 0; j < d; ++j) mu[j] += f[j] / n;
    std::vector<double> var(d, 0.0);
    for (const auto& f : features)
      for (std::size_t j = 0; j < d; ++j) var[j] += (f[j] - mu[j]) * (f[j] - mu[j]) / n;
    for (std::size_t j = 0; j < d; ++j) sd[j] = var[j] > 1e-24 ? std::sqrt(var[j]) : 1.0;
  }
  FeatureMatrix z(features.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != d) throw DimensionError("train_probe: ragged features");
    for (std::size_t j = 0; j < d; ++j) z[i][j] = (features[i][j] - mu[j]) / sd[j];
  }

  ProbeHead head{std::vector<double>(d, 0.0), 0.0};
  for (int step = 0; step < options.steps; ++step) {
    if (loss_trace) loss_trace->push_back(probe_loss(head, z, labels));
    const auto g = probe_gradient(head, z, labels);
    for (std::size_t j = 0; j < d; ++j) head.weight[j] -= options.lr * g[j];
    head.bias -= options.lr * g[d];
  }
  if (loss_trace) loss_trace->push_back(probe_loss(head, z, labels));

  // w.(x - mu)/sd + b  ==  (w/sd).x + (b - sum w mu / sd)
  ProbeHead out{std::vector<double>(d), head.bias};
  for (std::size_t j = 0; j < d; ++j) {
    out.weight[j] = head.weight[j] / sd[j];
    out.bias -= head.weight[j] * mu[j] / sd[j];
  }
  return out;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ContractError("auroc: score and label counts differ");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive ranks with average ranks for ties (1-based).
  double pos_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        pos_rank_sum += avg_rank;
        ++pos;
      } else if (labels[order[k]] != 0) {
        throw ContractError("auroc: labels must be 0 or 1");
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) {
    throw ContractError("auroc: undefined without both classes");
  }
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1) / 2.0) / (p * static_cast<double>(neg));
}

BinaryMetrics f1_accuracy(std::span<const double> scores,
                          std::span<const int> labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw ContractError("f1_accuracy: need equal, non-zero score and label counts");
  }
  long tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] == 1;
    if (pred && truth) ++tp;
    else if (pred) ++fp;
    else if (truth) ++fn;
    else ++tn;
  }
  BinaryMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = tp ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
  return m;
}

}  // namespace hdmae
