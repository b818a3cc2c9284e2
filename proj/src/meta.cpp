#include "spotopt/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "spotopt/phantom.hpp"

namespace spotopt {

double weight_schedule(std::int64_t n_step, std::int64_t n_epoch) {
  if (n_step < 1 || n_epoch < 1)
    throw std::invalid_argument("weight_schedule: step and epoch are 1-based counts");
  const double s = static_cast<double>(n_epoch) / 10.0;
  const double w = static_cast<double>(n_step) / (20.0 * s * s);
  return w < 1.0 ? w : 1.0;
}

double meta_loss(const std::vector<double>& losses, std::int64_t first_step,
                 std::int64_t n_epoch) {
  if (losses.empty()) throw std::invalid_argument("meta_loss: empty window");
  double acc = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i)
    acc += weight_schedule(first_step + static_cast<std::int64_t>(i), n_epoch) * losses[i];
  return acc;
}

void MetaConfig::validate() const {
  net.validate();
  if (window < 1) throw std::invalid_argument("meta config: window must be >= 1");
  if (n_epochs < 1) throw std::invalid_argument("meta config: n_epochs must be >= 1");
  if (inner_steps_per_epoch < window)
    throw std::invalid_argument("meta config: fewer inner steps per epoch than one window");
  if (batch < 1) throw std::invalid_argument("meta config: batch must be >= 1");
  if (!(lr0 > 0.0)) throw std::invalid_argument("meta config: lr0 must be positive");
  if (checkpoint_every < 1)
    throw std::invalid_argument("meta config: checkpoint cadence must be >= 1");
}

double cosine_lr(double lr0, std::int64_t step, std::int64_t total) {
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total)));
}

template <typename T>
double rollout_window(const ObjectiveEvaluator& ev, const PlanProblem& p,
                      const L2OParams<T>& params, RolloutState<T>& st, std::int64_t len,
                      WindowCache<T>& cache, const std::type_identity_t<RopeTable<T>>* rope,
                      AttentionMode mode, Exec e) {
  if (len < 1) throw std::invalid_argument("rollout_window: window length must be >= 1");
  const std::int64_t n = ev.n_spots();
  if (static_cast<std::int64_t>(st.x.size()) != n)
    throw std::invalid_argument("rollout_window: state size mismatch");
  const double lo = p.mu_lo(), hi = p.mu_hi();

  cache.x_entry = st.x;
  cache.steps.assign(static_cast<std::size_t>(len), StepRecord<T>{});
  cache.record = MetaLossRecord{};
  cache.record.n_epoch = st.epoch;
  cache.record.first_step = st.step + 1;

  Mat<T> feat(n, params.cfg.feature_dim());
  Mat<T> h_scratch;
  for (std::int64_t t = 0; t < len; ++t) {
    StepRecord<T>& r = cache.steps[static_cast<std::size_t>(t)];
    r.fs = assemble_features(ev, st.x, st.moments, params.cfg.k_slots, e);
    for (std::size_t i = 0; i < feat.a.size(); ++i)
      feat.a[i] = static_cast<T>(r.fs.features.a[i]);
    const Mat<T>* hp = t == 0 ? (st.have_hidden ? &st.hidden : nullptr)
                              : &cache.steps[static_cast<std::size_t>(t - 1)].net.h_out;
    l2o_forward(params, feat, hp, h_scratch, r.steps, &r.net, mode, rope, e);
    ++st.step;
    for (std::int64_t i = 0; i < n; ++i)
      st.x[static_cast<std::size_t>(i)] -= static_cast<double>(r.steps[static_cast<std::size_t>(i)]);
    if (st.step > kClipStartIter)
      for (auto& xi : st.x) xi = std::min(hi, std::max(lo, xi));
    r.x_after = st.x;
    r.weight = weight_schedule(st.step, st.epoch);
    cache.record.weights.push_back(r.weight);
  }
  st.hidden = cache.steps.back().net.h_out;
  st.have_hidden = true;

  // The loss after updates 1..len-1 falls out of the next step's feature
  // assembly; the last needs a fresh evaluation, whose gradient seeds the
  // reverse sweep.
  cache.g_final.assign(static_cast<std::size_t>(n), 0.0);
  cache.f_final = ev.gradient(st.x.data(), cache.g_final.data(), e);
  for (std::int64_t t = 0; t + 1 < len; ++t)
    cache.record.losses.push_back(cache.steps[static_cast<std::size_t>(t + 1)].fs.loss);
  cache.record.losses.push_back(cache.f_final);
  cache.record.value =
      meta_loss(cache.record.losses, cache.record.first_step, cache.record.n_epoch);
  return cache.record.value;
}

template <typename T>
void window_backward(const ObjectiveEvaluator& ev, const L2OParams<T>& params,
                     const WindowCache<T>& cache, L2OParams<T>& grad,
                     const std::type_identity_t<RopeTable<T>>* rope, Exec e) {
  const std::int64_t len = static_cast<std::int64_t>(cache.steps.size());
  if (len == 0) throw std::invalid_argument("window_backward: empty cache");
  const std::int64_t n = static_cast<std::int64_t>(cache.x_entry.size());

  std::vector<double> dx(static_cast<std::size_t>(n));
  const double w_last = cache.steps.back().weight;
  for (std::int64_t i = 0; i < n; ++i)
    dx[static_cast<std::size_t>(i)] = w_last * cache.g_final[static_cast<std::size_t>(i)];

  std::vector<double> dm(static_cast<std::size_t>(n), 0.0), dv(dm), dxf;
  std::vector<T> d_steps(static_cast<std::size_t>(n));
  Mat<T> d_feat, dh, dh_prev;
  Mat<double> d_feat_d;
  bool have_dh = false;

  for (std::int64_t t = len - 1; t >= 0; --t) {
    const StepRecord<T>& r = cache.steps[static_cast<std::size_t>(t)];
    // The update x -= steps flips the sign; the clip passes the adjoint
    // through unchanged.
    for (std::int64_t i = 0; i < n; ++i)
      d_steps[static_cast<std::size_t>(i)] = static_cast<T>(-dx[static_cast<std::size_t>(i)]);
    l2o_backward(params, r.net, d_steps, have_dh ? &dh : nullptr, grad, d_feat, &dh_prev, rope,
                 e);
    dh = dh_prev;
    have_dh = true;

    d_feat_d = Mat<double>(d_feat.rows, d_feat.cols);
    for (std::size_t i = 0; i < d_feat.a.size(); ++i)
      d_feat_d.a[i] = static_cast<double>(d_feat.a[i]);
    const std::vector<double>& x_prev =
        t == 0 ? cache.x_entry : cache.steps[static_cast<std::size_t>(t - 1)].x_after;
    assemble_features_backward(ev, x_prev, r.fs, d_feat_d, dm, dv, dxf, e);
    for (std::int64_t i = 0; i < n; ++i)
      dx[static_cast<std::size_t>(i)] += dxf[static_cast<std::size_t>(i)];
    if (t >= 1) {
      // Direct loss term at the iterate this step started from; its
      // gradient was already computed during feature assembly.
      const double w = cache.steps[static_cast<std::size_t>(t - 1)].weight;
      for (std::int64_t i = 0; i < n; ++i)
        dx[static_cast<std::size_t>(i)] += w * r.fs.g[static_cast<std::size_t>(i)];
    }
  }
  // The adjoints of the window-entry iterate, moments, and hidden state are
  // dropped here: gradient flow is severed at window boundaries.
}

void AdamW::step(L2OParams<float>& params, const L2OParams<float>& grad, double lr) {
  auto pt = params.tensors();
  auto gt = grad.tensors();
  std::size_t total = 0;
  for (auto& [name, vec] : pt) total += vec->size();
  if (m.size() != total) {
    m.assign(total, 0.0);
    v.assign(total, 0.0);
    t = 0;
  }
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  std::size_t off = 0;
  for (std::size_t k = 0; k < pt.size(); ++k) {
    auto& pv = *pt[k].second;
    const auto& gv = *gt[k].second;
    for (std::size_t i = 0; i < pv.size(); ++i, ++off) {
      const double g = static_cast<double>(gv[i]);
      m[off] = beta1 * m[off] + (1.0 - beta1) * g;
      v[off] = beta2 * v[off] + (1.0 - beta2) * g * g;
      const double mh = m[off] / bc1;
      const double vh = v[off] / bc2;
      double p = static_cast<double>(pv[i]);
      p -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * p);
      pv[i] = static_cast<float>(p);
    }
  }
}

namespace {

void zero_grads(L2OParams<float>& g) {
  for (auto& [name, vec] : g.tensors()) std::fill(vec->begin(), vec->end(), 0.0f);
}

void halve_state(RolloutState<float>& st, const std::vector<double>& start) {
  for (std::size_t i = 0; i < st.x.size(); ++i) {
    if (!std::isfinite(st.x[i]))
      st.x[i] = start[i];
    else
      st.x[i] *= 0.5;
  }
  st.moments = MomentState(static_cast<std::int64_t>(st.x.size()));
  st.have_hidden = false;
}

}  // namespace

TrainResult train_l2o(const MetaConfig& cfg, const std::vector<PlanProblem>& problems,
                      const std::string& out_dir, Exec e) {
  cfg.validate();
  if (problems.empty()) throw std::invalid_argument("train_l2o: empty problem set");
  if (const char* cap = std::getenv("L2O_THREADS")) set_thread_cap(std::atoi(cap));

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto wall = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

  TrainResult res;
  res.params.init(cfg.net, cfg.seed);
  AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  const std::int64_t n_problems = static_cast<std::int64_t>(problems.size());
  const std::int64_t n_batches = (n_problems + cfg.batch - 1) / cfg.batch;
  const std::int64_t windows_per_epoch =
      (cfg.inner_steps_per_epoch + cfg.window - 1) / cfg.window;
  const std::int64_t total = cfg.n_epochs * n_batches * windows_per_epoch;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::int64_t> order(problems.size());
  std::iota(order.begin(), order.end(), 0);

  L2OParams<float> grad;
  grad.zero_like(cfg.net);
  std::int64_t outer = 0, consecutive_bad = 0;

  auto write_ckpt = [&] {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    const std::string tmp = out_dir + "/checkpoint.bin.tmp";
    save_checkpoint(res.params, tmp);
    std::filesystem::rename(tmp, out_dir + "/checkpoint.bin");
  };

  for (std::int64_t epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t b0 = 0; b0 < n_problems; b0 += cfg.batch) {
      const std::int64_t bn = std::min(cfg.batch, n_problems - b0);
      std::vector<const PlanProblem*> probs(static_cast<std::size_t>(bn));
      std::vector<std::unique_ptr<ObjectiveEvaluator>> evs(static_cast<std::size_t>(bn));
      std::vector<RopeTable<float>> ropes;
      std::vector<std::vector<double>> starts(static_cast<std::size_t>(bn));
      std::vector<RolloutState<float>> states(static_cast<std::size_t>(bn));
      ropes.reserve(static_cast<std::size_t>(bn));
      for (std::int64_t i = 0; i < bn; ++i) {
        const std::size_t s = static_cast<std::size_t>(i);
        probs[s] = &problems[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + i)])];
        evs[s] = std::make_unique<ObjectiveEvaluator>(*probs[s]);
        starts[s] = default_start(*probs[s]);
        states[s].x = starts[s];
        states[s].moments = MomentState(probs[s]->n_spots());
        states[s].epoch = epoch;
        ropes.push_back(make_rope_table<float>(cfg.net, probs[s]->n_spots()));
      }

      std::int64_t done = 0;
      while (done < cfg.inner_steps_per_epoch) {
        const std::int64_t len = std::min(cfg.window, cfg.inner_steps_per_epoch - done);
        zero_grads(grad);
        double loss_acc = 0.0;
        bool bad = false;
        std::vector<char> offender(static_cast<std::size_t>(bn), 0);
        for (std::int64_t i = 0; i < bn; ++i) {
          const std::size_t s = static_cast<std::size_t>(i);
          WindowCache<float> wc;
          const double wl =
              rollout_window(*evs[s], *probs[s], res.params, states[s], len, wc, &ropes[s],
                             cfg.mode, e);
          if (!std::isfinite(wl)) {
            bad = true;
            offender[s] = 1;
            continue;
          }
          window_backward(*evs[s], res.params, wc, grad, &ropes[s], e);
          loss_acc += wl;
        }

        const double lr = cosine_lr(cfg.lr0, outer, total);
        double logged = std::numeric_limits<double>::quiet_NaN();
        if (!bad) {
          const float inv = 1.0f / static_cast<float>(bn);
          double norm2 = 0.0;
          bool gbad = false;
          for (auto& [name, vec] : grad.tensors())
            for (auto& g : *vec) {
              g *= inv;
              if (!std::isfinite(g)) gbad = true;
              norm2 += static_cast<double>(g) * static_cast<double>(g);
            }
          if (gbad) {
            bad = true;
            std::fill(offender.begin(), offender.end(), 1);
          } else {
            const double norm = std::sqrt(norm2);
            if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
              const float sc = static_cast<float>(cfg.grad_clip / norm);
              for (auto& [name, vec] : grad.tensors())
                for (auto& g : *vec) g *= sc;
            }
            opt.step(res.params, grad, lr);
            logged = loss_acc / static_cast<double>(bn);
          }
        }
        if (bad) {
          ++res.nonfinite_windows;
          ++consecutive_bad;
          for (std::int64_t i = 0; i < bn; ++i)
            if (offender[static_cast<std::size_t>(i)])
              halve_state(states[static_cast<std::size_t>(i)],
                          starts[static_cast<std::size_t>(i)]);
          if (consecutive_bad > 5) {
            std::ostringstream msg;
            msg << "train_l2o: " << consecutive_bad
                << " consecutive non-finite windows (epoch " << epoch << ", outer step "
                << outer << ", lr " << lr << "); aborting";
            throw std::runtime_error(msg.str());
          }
        } else {
          consecutive_bad = 0;
        }
        res.log.push_back({outer, logged, lr, wall()});
        ++outer;
        if (!out_dir.empty() && outer % cfg.checkpoint_every == 0) write_ckpt();
        done += len;
      }
    }
  }
  res.outer_steps = outer;
  write_ckpt();
  if (!out_dir.empty()) save_training_log(res.log, out_dir + "/training_log.csv");
  return res;
}

void save_training_log(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_training_log: cannot open " + path);
  f << "outer_step,meta_loss,lr,wall_seconds\n";
  f.precision(17);
  for (const auto& r : log)
    f << r.outer_step << ',' << r.meta_loss << ',' << r.lr << ',' << r.wall_seconds << '\n';
  if (!f) throw std::runtime_error("save_training_log: write failed for " + path);
}

template double rollout_window<float>(const ObjectiveEvaluator&, const PlanProblem&,
                                      const L2OParams<float>&, RolloutState<float>&,
                                      std::int64_t, WindowCache<float>&, const RopeTable<float>*,
                                      AttentionMode, Exec);
template double rollout_window<double>(const ObjectiveEvaluator&, const PlanProblem&,
                                       const L2OParams<double>&, RolloutState<double>&,
                                       std::int64_t, WindowCache<double>&,
                                       const RopeTable<double>*, AttentionMode, Exec);
template void window_backward<float>(const ObjectiveEvaluator&, const L2OParams<float>&,
                                     const WindowCache<float>&, L2OParams<float>&,
                                     const RopeTable<float>*, Exec);
template void window_backward<double>(const ObjectiveEvaluator&, const L2OParams<double>&,
                                      const WindowCache<double>&, L2OParams<double>&,
                                      const RopeTable<double>*, Exec);

}  // namespace spotopt
