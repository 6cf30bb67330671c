#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "neuropipe/augment.hpp"
#include "neuropipe/optimizer.hpp"

namespace neuropipe {

struct HistoryRow {
  long iteration = 0;
  double train_loss = 0;
  double test_loss = 0;
  double accuracy = 0;
  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

// Rows with strictly increasing iterations and finite losses.
struct TrainHistory {
  std::vector<HistoryRow> rows;

  void add(const HistoryRow& row);  // BadConfig on order, DivergedLoss on non-finite
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct TrainOptions {
  int iterations = 20000;
  int batch_size = 8;
  int log_every = 100;  // the last iteration is always logged
  OptimizerConfig optimizer;
  AugmentPolicy augment = AugmentPolicy::identity();
  std::uint64_t seed = 1;
  std::function<void(const HistoryRow&)> on_row;  // called as rows are produced

  void validate() const;
};

// Throws DivergedLoss naming the model and iteration when `loss` is not finite.
void check_loss(double loss, long iteration, const std::string& model);

// Deterministic epoch-shuffled batches over n items.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(int batch_size);

 private:
  void reshuffle();
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

bool should_log(long iteration, const TrainOptions& opt);

}  // namespace neuropipe
