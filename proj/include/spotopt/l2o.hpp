// Learned-optimizer driver: per-spot feature assembly from objective
// gradients with adaptive-moment normalization, and the inference loop that
// applies network-proposed steps to a plan problem.

#pragma once

#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "spotopt/network.hpp"
#include "spotopt/objective.hpp"
#include "spotopt/problem.hpp"
#include "spotopt/trace.hpp"

namespace spotopt {

inline constexpr double kMomentBeta1 = 0.9;
inline constexpr double kMomentBeta2 = 0.99;
inline constexpr double kMomentEps = 1e-8;

// Exponential moving averages of the objective gradient and its square,
// advanced once per optimizer iteration.
struct MomentState {
  std::vector<double> m, v;
  std::int64_t t = 0;

  explicit MomentState(std::int64_t n = 0) : m(static_cast<std::size_t>(n), 0.0),
                                              v(static_cast<std::size_t>(n), 0.0) {}
  void advance(const std::vector<double>& g);
};

// Bias-correction denominators (1 - beta^t) for the state's timestep.
// Normalizing a state that has absorbed no gradient yet is rejected.
std::pair<double, double> bias_corrections(const MomentState& s);

// Everything produced while assembling one iteration's feature matrix.
// The gradient column g is defined as the fixed-order sum of the per
// component columns, so the column decomposition reconstructs it exactly.
struct StepFeatures {
  Mat<double> features;       // [n_spots, k_slots + 2]
  double loss = 0.0;          // objective value at x
  std::vector<double> g;      // summed gradient
  std::vector<double> split;  // [n_components * n_spots] per-component columns
  std::vector<double> mhat;   // bias-corrected first moment
  std::vector<double> denom;  // sqrt(bias-corrected second moment) + eps
  std::int64_t t = 0;         // moment timestep used for the normalization
};

// Computes the objective value, gradient columns, and normalized feature
// matrix at x, advancing the moment state in place. Columns: the normalized
// summed gradient, the normalized first moment, then one normalized column
// per objective component; unused slots stay zero. Throws if the problem
// has more components than k_slots.
StepFeatures assemble_features(const ObjectiveEvaluator& ev, const std::vector<double>& x,
                               MomentState& moments, std::int64_t k_slots,
                               Exec e = default_exec());

// Pulls a gradient with respect to the feature matrix back to a gradient
// with respect to x and to the moment state entering this iteration.
// d_features is consumed as [n, k_slots+2]; d_x is overwritten; dm/dv are
// the adjoints of the post-advance moments on entry and hold the adjoints
// of the pre-advance moments on exit.
void assemble_features_backward(const ObjectiveEvaluator& ev, const std::vector<double>& x,
                                const StepFeatures& fs, const Mat<double>& d_features,
                                std::vector<double>& dm, std::vector<double>& dv,
                                std::vector<double>& d_x, Exec e = default_exec());

// First optimizer iteration whose update is followed by a projection of the
// iterate into the deliverable-MU box.
inline constexpr std::int64_t kClipStartIter = 50;

struct L2ORunOptions {
  std::int64_t max_iters = 100;
  double max_seconds = std::numeric_limits<double>::infinity();
  double target_loss = -std::numeric_limits<double>::infinity();
  AttentionMode mode = AttentionMode::tiled;
};

// Runs the learned optimizer on a problem from start point x (updated in
// place). Records the objective per iteration; iterate entries are clipped
// into [mu_lo, mu_hi] after every update past iteration kClipStartIter.
// Non-finite losses or steps terminate the run with a partial trace.
RunTrace l2o_minimize(const ObjectiveEvaluator& ev, const PlanProblem& p,
                      const L2OParams<float>& net, std::vector<double>& x,
                      const L2ORunOptions& opt, Exec e = default_exec());

}  // namespace spotopt
