// Outer planning loop: objective initialization from clinical goals,
// per-round parameter adjustment driven by a pluggable policy, episode
// bookkeeping, and the optimizer comparison harness.

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "spotopt/goals.hpp"
#include "spotopt/l2o.hpp"
#include "spotopt/lbfgsb.hpp"
#include "spotopt/plan_eval.hpp"
#include "spotopt/problem.hpp"
#include "spotopt/trace.hpp"

namespace spotopt {

// Per-round multiplicative factor bounds.
inline constexpr double kFactorLo = 0.5;
inline constexpr double kFactorHi = 2.0;

// Caps reached by repeated rule-based adjustment on a fixed report.
inline constexpr double kRuleWeightCap = 100.0;
inline constexpr double kRuleLimitFloorGy = 1e-3;

// Per-objective multiplicative factors on weight and dose limit.
struct AdjustmentAction {
  std::vector<double> weight_factor;
  std::vector<double> limit_factor;

  static AdjustmentAction identity(std::size_t n);
  bool is_identity() const;
  void validate() const;  // sizes equal, every factor in [kFactorLo, kFactorHi]
};

// Builds the starting objective set for a problem: each target contributes
// a coverage pair (lower limit at its prescription, upper limit at the
// shared overdose ceiling), each organ contributes its tolerance kind with
// limit min(d_predict, d_clinic). Organs missing a prediction use the
// clinical limit alone; negative predictions and organs without a goal
// entry are rejected. All weights start at 1.
std::vector<ObjectiveComponent> init_objectives(const PlanProblem& p,
                                                const std::map<std::string, double>& d_predict,
                                                const ClinicalGoalTable& goals);

// Policy interface: proposes the next adjustment from the parameters the
// round optimized and the scored result.
using AdjustPolicy = std::function<AdjustmentAction(
    const PlanProblem&, const std::vector<ObjectiveComponent>&, const PlanReport&)>;

AdjustPolicy identity_policy();
AdjustPolicy rule_policy();

// Deterministic baseline rule. Objectives whose structure is scored as
// violated get weight x1.5 (capped so the weight never exceeds
// kRuleWeightCap); violated organ objectives also tighten their limit x0.9
// down to kRuleLimitFloorGy, and an underdosed target raises its lower
// dose limit x1.1 up to the overdose ceiling. Satisfied objectives keep
// factors of 1, and a target's lower limit never drops below its
// prescription.
AdjustmentAction rule_based_adjust(const PlanProblem& p,
                                   const std::vector<ObjectiveComponent>& params,
                                   const PlanReport& report);

// Applies factors to a parameter set. Target lower-dose limits are floored
// at the structure's prescription after scaling.
std::vector<ObjectiveComponent> apply_action(const PlanProblem& p,
                                             const std::vector<ObjectiveComponent>& params,
                                             const AdjustmentAction& a);

enum class InnerOptimizer { lbfgsb, l2o };

struct EpisodeConfig {
  InnerOptimizer optimizer = InnerOptimizer::lbfgsb;
  std::int64_t max_iters = 200;
  std::int64_t adjustments = 4;
  const L2OParams<float>* net = nullptr;  // required for the l2o inner loop
  AttentionMode mode = AttentionMode::tiled;
  // Best-round selection tolerates this much target-coverage drop
  // (fraction of the structure volume) against the best-coverage round.
  double coverage_guard = 0.005;

  void validate() const;
};

struct RoundRecord {
  std::vector<ObjectiveComponent> objectives;  // parameters optimized this round
  double final_loss = 0.0;
  std::int64_t iterations = 0;
  double seconds = 0.0;
  RunStatus status = RunStatus::ok;
  bool failed = false;  // optimizer blew up; the round kept the previous iterate
  PlanReport report;
  double reward = 0.0;  // plan-score delta against the previous round
};

struct EpisodeRecord {
  std::vector<RoundRecord> rounds;  // adjustments + 1 entries
  std::size_t best_round = 0;
  SpotVector best_x;   // iterate of the selected round
  SpotVector final_x;  // iterate after the last round

  double best_score() const { return rounds[best_round].report.total_score; }
};

// Runs the full planning episode: optimize, score, adjust, repeat. The
// problem's own objective list seeds round 0; every later round warm
// starts from the previous iterate. The best round maximizes total plan
// score among rounds whose worst target coverage stays within
// coverage_guard of the episode's best.
EpisodeRecord run_episode(const PlanProblem& p, const AdjustPolicy& policy,
                          const ClinicalGoalTable& goals, const EpisodeConfig& cfg = {},
                          Exec e = default_exec());

// ---- Optimizer comparison harness ------------------------------------

// Loss improvement of the learned optimizer at the reference optimizer's
// wall time: (loss_ref - loss_l2o) / loss_ref. Unclamped; negative when
// the learned optimizer ends higher.
double effectiveness(double loss_ref, double loss_l2o);

// Wall-time saving at the reference optimizer's loss level:
// (t_ref - t_l2o) / t_ref. Unclamped; negative when slower.
double efficiency(double t_ref, double t_l2o);

struct BenchOptions {
  std::int64_t ref_iters = 100;
  double time_cap_factor = 3.0;  // efficiency run gives up past cap * t_ref
  AttentionMode mode = AttentionMode::tiled;
};

struct BenchResult {
  std::string name;
  RunTrace ref, l2o;
  std::int64_t ref_iterations = 0;
  double t_ref = 0.0;
  double loss_ref = 0.0;
  std::int64_t l2o_iterations = 0;
  double t_l2o = 0.0;
  double loss_l2o = 0.0;
  double metric = 0.0;  // effectiveness or efficiency, as a fraction
  bool reached = true;  // efficiency only: hit the reference loss in time
};

// Reference run: bound-constrained quasi-Newton for ref_iters iterations.
// Learned run: same start, wall-clock budget equal to the reference time.
BenchResult bench_effectiveness(const PlanProblem& p, const L2OParams<float>& net,
                                const std::string& name = "", const BenchOptions& opt = {},
                                Exec e = default_exec());

// Learned run chases the reference's best loss; reached goes false when the
// level is not hit within cap * t_ref.
BenchResult bench_efficiency(const PlanProblem& p, const L2OParams<float>& net,
                             const std::string& name = "", const BenchOptions& opt = {},
                             Exec e = default_exec());

// The comparison metrics recomputed from recorded traces alone, so saved
// trace files reproduce every reported number exactly.
double effectiveness_from_traces(const RunTrace& ref, const RunTrace& l2o);
double efficiency_from_traces(const RunTrace& ref, const RunTrace& l2o);

// CSV rows: case, iterations, seconds, loss_min, <metric>. The metric
// column is the fraction in percent with two decimals; an efficiency case
// that never reached the reference loss prints "failed".
std::string bench_to_csv(const std::vector<BenchResult>& rows, bool efficiency_metric);

}  // namespace spotopt
