// Clipped-surrogate policy optimization over planning episodes.
//
// The policy observes the current objective parameters and the scored plan
// and proposes per-objective multiplicative factors. Actions live in a
// fixed-width slot layout matching the optimizer's objective capacity, so
// one network serves problems of any size. Raw Gaussian actions are
// squashed to factors 2^tanh(a), landing exactly in the allowed
// [0.5, 2.0] range with the mean at the identity when the head is zero.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spotopt/autoplan.hpp"
#include "spotopt/tensor.hpp"

namespace spotopt {

inline constexpr std::int64_t kPolicySlots = 58;       // objective capacity
inline constexpr std::int64_t kPolicyFeatureCols = 5;  // per-objective features
inline constexpr std::int64_t kPolicyStateDim = kPolicySlots * kPolicyFeatureCols;
inline constexpr std::int64_t kPolicyActionDim = 2 * kPolicySlots;  // weight+limit factors

// Factor applied for a raw pre-squash action value.
double factor_from_raw(double a);

// Fixed-width state: per objective [log1p(weight), limit/100,
// log1p(structure penalty), mean dose/100, max dose/100], zero padded.
// Rejects problems with more objectives than kPolicySlots.
std::vector<double> policy_features(const PlanProblem& p,
                                    const std::vector<ObjectiveComponent>& params,
                                    const PlanReport& report);

// Two-hidden-layer tanh networks: an action trunk with a mean head plus a
// state-independent log-std vector, and a separate value trunk. The mean
// head starts at zero, so the untrained policy proposes the identity
// action with exploration noise around it.
struct PpoPolicy {
  std::int64_t hidden = 64;
  Mat<double> p_w1, p_w2, p_wmu;
  std::vector<double> p_b1, p_b2, p_bmu, log_std;
  Mat<double> v_w1, v_w2;
  std::vector<double> v_b1, v_b2, v_w3, v_b3;

  static PpoPolicy init(std::int64_t hidden, double init_log_std, std::uint64_t seed);
  std::vector<std::pair<std::string, std::vector<double>*>> tensors();
  std::vector<std::pair<std::string, const std::vector<double>*>> tensors() const;
  std::size_t param_count() const;
};

// Mean action and value for one state.
void policy_forward(const PpoPolicy& net, const std::vector<double>& state,
                    std::vector<double>& mu);
double value_forward(const PpoPolicy& net, const std::vector<double>& state);

struct PolicyConfig {
  std::int64_t hidden = 64;
  double clip_ratio = 0.2;
  double discount = 0.99;
  double gae_lambda = 0.95;
  int epochs_per_batch = 4;
  int batch_episodes = 16;
  std::int64_t iterations = 10;
  double lr = 3e-4;
  double init_log_std = -0.5;
  std::uint64_t seed = 0;
  EpisodeConfig episode;  // inner-loop settings for collected episodes

  void validate() const;
};

// One transition of a collected episode.
struct PpoStep {
  std::vector<double> state;
  std::vector<double> raw;  // pre-squash action, one entry per used dim
  double logp = 0.0;        // behavior log density of `raw`
  double reward = 0.0;
  double value = 0.0;      // critic estimate at collection time
  double advantage = 0.0;  // filled by the advantage pass
  double ret = 0.0;        // advantage + value
};

struct PpoUpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
};

// One full-batch gradient epoch on the clipped surrogate plus value
// regression, applied with a shared Adam state.
class PpoUpdater {
 public:
  PpoUpdateStats update(PpoPolicy& net, const std::vector<PpoStep>& steps,
                        const PolicyConfig& cfg);

 private:
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// Discounted generalized-advantage pass over one episode's steps (ordered,
// terminal after the last entry). Fills advantage and ret in place.
void compute_advantages(std::vector<PpoStep>& episode, double discount, double lambda);

struct PpoTrainRow {
  std::int64_t iteration = 0;
  double mean_reward = 0.0;
  double mean_best_score = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
};

struct PpoTrainResult {
  PpoPolicy policy;
  std::vector<PpoTrainRow> log;
};

// Trains the adjustment policy on planning episodes over the given
// problems (cycled round robin). A non-finite batch reward aborts training
// with an error naming the failing iteration.
PpoTrainResult ppo_train(const std::vector<PlanProblem>& problems,
                         const ClinicalGoalTable& goals, const PolicyConfig& cfg,
                         Exec e = default_exec());

// Wraps the policy for run_episode. Deterministic mode plays the mean
// action; otherwise actions are sampled with the stored log-std.
AdjustPolicy policy_adapter(const PpoPolicy& net, bool deterministic = true,
                            std::uint64_t seed = 0);

void save_policy(const PpoPolicy& net, const std::string& path);
PpoPolicy load_policy(const std::string& path);

}  // namespace spotopt
