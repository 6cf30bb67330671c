#include "neuropipe/training.hpp"

#include <cmath>

#include "neuropipe/error.hpp"

namespace neuropipe {

void TrainHistory::add(const HistoryRow& row) {
  require(rows.empty() || row.iteration > rows.back().iteration, Errc::BadConfig,
          "history iterations must increase");
  check_loss(row.train_loss, row.iteration, "history");
  check_loss(row.test_loss, row.iteration, "history");
  rows.push_back(row);
}

void TrainOptions::validate() const {
  require(iterations >= 1, Errc::BadConfig, "iterations must be >= 1");
  require(batch_size >= 1, Errc::BadConfig, "batch size must be >= 1");
  require(log_every >= 1, Errc::BadConfig, "log interval must be >= 1");
  require(optimizer.learning_rate >= 0, Errc::BadConfig, "learning rate must be >= 0");
  augment.validate();
}

void check_loss(double loss, long iteration, const std::string& model) {
  require(std::isfinite(loss), Errc::DivergedLoss,
          model + " loss became " + std::to_string(loss) + " at iteration " + std::to_string(iteration) +
              "; lower the learning rate or check the inputs");
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
  require(n > 0, Errc::EmptyDataset, "no training samples");
  order_.resize(n);
  reshuffle();
}

void BatchSampler::reshuffle() {
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  for (std::size_t i = n_; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_.uniform() * static_cast<double>(i));
    std::swap(order_[i - 1], order_[j]);
  }
  pos_ = 0;
}

std::vector<std::size_t> BatchSampler::next(int batch_size) {
  std::vector<std::size_t> out;
  for (int b = 0; b < batch_size; ++b) {
    if (pos_ == n_) reshuffle();
    out.push_back(order_[pos_++]);
  }
  return out;
}

bool should_log(long iteration, const TrainOptions& opt) {
  return iteration % opt.log_every == 0 || iteration == opt.iterations;
}

}  // namespace neuropipe
