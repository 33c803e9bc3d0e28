#pragma once

#include <span>
#include <vector>

#include "hdmae/model.hpp"
#include "hdmae/patch.hpp"

namespace hdmae {

// All N tokens (no masking) through the encoder, mean-pooled over tokens.
std::vector<double> extract_features(const ModelParams<float>& params,
                                     const ViTConfig& cfg,
                                     const ImageGray& image);

using FeatureMatrix = std::vector<std::vector<double>>;

struct ProbeHead {
  std::vector<double> weight;
  double bias = 0.0;

  double logit(std::span<const double> features) const;
  double score(std::span<const double> features) const;  // sigmoid(logit)
  std::vector<double> scores(const FeatureMatrix& features) const;
};

// Mean binary cross-entropy of sigmoid(w.x + b) against labels in {0, 1}.
double probe_loss(const ProbeHead& head, const FeatureMatrix& features,
                  std::span<const int> labels);
// Analytic gradient of probe_loss; the last entry is d/d bias.
std::vector<double> probe_gradient(const ProbeHead& head,
                                   const FeatureMatrix& features,
                                   std::span<const int> labels);

struct ProbeOptions {
  int steps = 2000;
  double lr = 0.05;
  // Standardise each feature with training-set mean and std before descent;
  // the scaling is folded back into the returned head.
  bool standardize = true;
};

// Logistic regression by full-batch gradient descent from a zero head.
// `loss_trace`, when given, receives the standardized-space loss before every
// step and after the last one. Throws ConfigError if only one class appears.
ProbeHead train_probe(const FeatureMatrix& features, std::span<const int> labels,
                      const ProbeOptions& options = {},
                      std::vector<double>* loss_trace = nullptr);

// Mann-Whitney AUROC: fraction of (positive, negative) pairs with
// score_pos > score_neg, ties counted as one half. ContractError when a
// class is missing.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct BinaryMetrics {
  double f1 = 0;
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
};

// Predicts positive when score >= threshold. F1 is 0 when there are no true
// positives (this covers the no-predicted-positive case).
BinaryMetrics f1_accuracy(std::span<const double> scores,
                          std::span<const int> labels, double threshold = 0.5);

}  // namespace hdmae
