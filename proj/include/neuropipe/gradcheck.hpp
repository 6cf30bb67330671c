#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace neuropipe {

// |a - n| / max(|a|, |n|, 1e-6): relative for ordinary magnitudes, absolute
// near zero so exact-zero gradients do not divide by zero.
double relative_error(double analytic, double numeric);

// Central differences of `loss` w.r.t. the entries of `x` listed in `which`
// (all entries when empty). `x` is restored afterwards.
std::vector<double> numeric_gradient(const std::function<double()>& loss, std::span<double> x,
                                     double eps, std::span<const std::size_t> which = {});

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int checked = 0;
  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

inline constexpr double kGradEps = 1e-3;
inline constexpr double kOperatorTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

// Operator-level checks: l2pool, hinge, softmax-ce, smooth-l1, sigmoid-bce,
// roi pooling, conv2d and linear.
std::vector<GradCheckResult> operator_gradient_checks(std::uint64_t seed);
// Whole-network checks on tiny configurations of the three models.
std::vector<GradCheckResult> end_to_end_gradient_checks(std::uint64_t seed);
std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed);

}  // namespace neuropipe
