#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "neuropipe/boxes.hpp"
#include "neuropipe/tensor.hpp"

namespace neuropipe {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, tn += o.tn, fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Overlap counts of two binary masks, kept as integers.
struct OverlapCounts {
  std::int64_t a = 0, b = 0, both = 0;
};

OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

// 2|A n B| / (|A| + |B|), 1.0 when both masks are empty. ShapeMismatch.
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
// Masks given as tensors: a pixel is set when its value is > 0.5.
double dice(const Tensor& a, const Tensor& b);
double dice_from_counts(const OverlapCounts& c);

std::vector<std::uint8_t> binarize(const Tensor& mask);

// Dice over all pixels of all pairs pooled, and the mean of per-pair Dice.
double pooled_dice(const std::vector<std::pair<Tensor, Tensor>>& pairs);
double mean_dice(const std::vector<std::pair<Tensor, Tensor>>& pairs);

// One-vs-rest counts for `positive`. LengthMismatch.
ConfusionCounts confusion(std::span<const int> pred, std::span<const int> truth, int positive);
// Pixelwise counts of a predicted mask against a truth mask.
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

struct MetricValues {
  double dice = 0, sensitivity = 0, specificity = 0, accuracy = 0;
  friend bool operator==(const MetricValues&, const MetricValues&) = default;
};

// Ratios with an empty denominator population are 1.0.
MetricValues metrics_from_counts(const ConfusionCounts& c);

struct MetricsReport {
  std::vector<std::pair<std::string, MetricValues>> rows;
  std::map<std::string, ConfusionCounts> counts;
  MetricValues macro;
  // Extra scalar lines (overall accuracy, pooled vs per-slice Dice, ...).
  std::vector<std::pair<std::string, double>> extras;

  const MetricValues& at(const std::string& key) const;
  void write(std::ostream& out) const;
};

MetricsReport summarize(const std::vector<std::pair<std::string, ConfusionCounts>>& counts);

// Per-class one-vs-rest report over integer labels 0..names.size()-1, plus an
// `overall_accuracy` extra.
MetricsReport classification_report(std::span<const int> pred, std::span<const int> truth,
                                    const std::vector<std::string>& names);

}  // namespace neuropipe
