// Meta-training for the step-proposal network: inner optimization unrolled
// in fixed windows, a step-weighted window loss, truncated backpropagation
// with recurrent state carried across windows, and a decoupled-weight-decay
// adaptive outer optimizer on a cosine learning-rate schedule.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spotopt/l2o.hpp"
#include "spotopt/network.hpp"
#include "spotopt/objective.hpp"

namespace spotopt {

// Weight of the loss recorded after inner step n_step during epoch n_epoch:
// min(1, n_step / (20 * (n_epoch/10)^2)). Early steps of late epochs count
// less, which keeps long unrolls from being dominated by their noisy start.
// Both arguments are 1-based; nonpositive values are rejected.
double weight_schedule(std::int64_t n_step, std::int64_t n_epoch);

// Weighted sum of a window of per-step losses, where losses[i] was recorded
// after inner step first_step + i. Rejects an empty window.
double meta_loss(const std::vector<double>& losses, std::int64_t first_step,
                 std::int64_t n_epoch);

// lr0 * (1 + cos(pi * step/total)) / 2: lr0 at step 0, zero at step = total.
double cosine_lr(double lr0, std::int64_t step, std::int64_t total);

// Everything needed to recompute one window's weighted loss.
struct MetaLossRecord {
  std::int64_t n_epoch = 1;
  std::int64_t first_step = 1;   // inner-step index of losses[0]
  std::vector<double> weights;   // schedule weight per inner step
  std::vector<double> losses;    // objective after each inner step
  double value = 0.0;            // weighted window loss
};

struct MetaConfig {
  L2OConfig net;
  std::int64_t window = 20;                // inner steps per outer update
  std::int64_t n_epochs = 30;              // restarts per problem
  std::int64_t inner_steps_per_epoch = 100;
  std::int64_t batch = 8;                  // problems per outer update
  double lr0 = 4e-4;
  double weight_decay = 1e-2;
  double grad_clip = 1.0;                  // global-norm cap, <= 0 disables
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 50;      // outer steps between snapshots
  AttentionMode mode = AttentionMode::tiled;

  void validate() const;
};

// Inner-optimization state of one problem, carried across windows within an
// epoch. Gradients never flow through it between windows; only the values.
template <typename T>
struct RolloutState {
  std::vector<double> x;
  MomentState moments;
  Mat<T> hidden;
  bool have_hidden = false;
  std::int64_t step = 0;   // inner steps completed this epoch
  std::int64_t epoch = 1;  // 1-based epoch index
};

template <typename T>
struct StepRecord {
  StepFeatures fs;              // assembled at the pre-update iterate
  L2OCache<T> net;              // network forward cache
  std::vector<T> steps;
  std::vector<double> x_after;  // iterate after update and clip
  double weight = 0.0;
};

template <typename T>
struct WindowCache {
  std::vector<double> x_entry;
  std::vector<StepRecord<T>> steps;
  std::vector<double> g_final;  // objective gradient at the final iterate
  double f_final = 0.0;
  MetaLossRecord record;
};

// Advances the rollout state by len inner steps, filling the cache, and
// returns the weighted window loss. The deliverable-MU clip applies past
// iteration kClipStartIter exactly as at inference.
template <typename T>
double rollout_window(const ObjectiveEvaluator& ev, const PlanProblem& p,
                      const L2OParams<T>& params, RolloutState<T>& st, std::int64_t len,
                      WindowCache<T>& cache,
                      const std::type_identity_t<RopeTable<T>>* rope = nullptr,
                      AttentionMode mode = AttentionMode::tiled, Exec e = default_exec());

// Reverse sweep over one recorded window; accumulates the gradient of the
// window loss into grad. The clip is treated as a straight-through identity
// and no gradient crosses the window entry.
template <typename T>
void window_backward(const ObjectiveEvaluator& ev, const L2OParams<T>& params,
                     const WindowCache<T>& cache, L2OParams<T>& grad,
                     const std::type_identity_t<RopeTable<T>>* rope = nullptr,
                     Exec e = default_exec());

// Decoupled-weight-decay adaptive outer optimizer over the flattened
// parameter list.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  std::vector<double> m, v;
  std::int64_t t = 0;

  void step(L2OParams<float>& params, const L2OParams<float>& grad, double lr);
};

struct TrainLogRow {
  std::int64_t outer_step = 0;
  double meta_loss = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  L2OParams<float> params;
  std::vector<TrainLogRow> log;
  std::int64_t outer_steps = 0;
  std::int64_t nonfinite_windows = 0;
};

// Trains the network on the given problems. Each epoch restarts every
// problem from its uniform start, shuffles the problem order, and walks
// batches through the epoch window by window with one outer update per
// window. Non-finite windows skip the update, halve the offending inner
// state, and abort after more than 5 in a row. When out_dir is nonempty,
// checkpoints and the training log are written there. Honors the
// L2O_THREADS environment variable as a worker cap.
TrainResult train_l2o(const MetaConfig& cfg, const std::vector<PlanProblem>& problems,
                      const std::string& out_dir = "", Exec e = default_exec());

// CSV with header outer_step,meta_loss,lr,wall_seconds.
void save_training_log(const std::vector<TrainLogRow>& log, const std::string& path);

}  // namespace spotopt
