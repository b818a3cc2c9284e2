#include "spotopt/l2o.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace spotopt {

void MomentState::advance(const std::vector<double>& g) {
  if (g.size() != m.size()) throw std::invalid_argument("moment advance: size mismatch");
  for (std::size_t i = 0; i < m.size(); ++i) {
    m[i] = kMomentBeta1 * m[i] + (1.0 - kMomentBeta1) * g[i];
    v[i] = kMomentBeta2 * v[i] + (1.0 - kMomentBeta2) * g[i] * g[i];
  }
  ++t;
}

std::pair<double, double> bias_corrections(const MomentState& s) {
  if (s.t <= 0)
    throw std::invalid_argument("bias_corrections: moments hold no gradient yet (t = 0); "
                                "advance with the first gradient before normalizing");
  return {1.0 - std::pow(kMomentBeta1, static_cast<double>(s.t)),
          1.0 - std::pow(kMomentBeta2, static_cast<double>(s.t))};
}

StepFeatures assemble_features(const ObjectiveEvaluator& ev, const std::vector<double>& x,
                               MomentState& moments, std::int64_t k_slots, Exec e) {
  const std::int64_t n = ev.n_spots();
  const std::int64_t k = ev.n_components();
  if (k > k_slots)
    throw std::invalid_argument("assemble_features: problem has more objective components than "
                                "feature slots");
  if (static_cast<std::int64_t>(x.size()) != n)
    throw std::invalid_argument("assemble_features: x size mismatch");
  if (static_cast<std::int64_t>(moments.m.size()) != n)
    throw std::invalid_argument("assemble_features: moment size mismatch");

  StepFeatures fs;
  fs.split.assign(static_cast<std::size_t>(k * n), 0.0);
  fs.loss = ev.split_gradients(x.data(), fs.split.data(), e);

  fs.g.assign(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t c = 0; c < k; ++c) {
    const double* col = fs.split.data() + c * n;
    for (std::int64_t i = 0; i < n; ++i) fs.g[static_cast<std::size_t>(i)] += col[i];
  }

  moments.advance(fs.g);
  fs.t = moments.t;
  const auto [bc1, bc2] = bias_corrections(moments);

  fs.mhat.resize(static_cast<std::size_t>(n));
  fs.denom.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t s = static_cast<std::size_t>(i);
    fs.mhat[s] = moments.m[s] / bc1;
    fs.denom[s] = std::sqrt(moments.v[s] / bc2) + kMomentEps;
  }

  fs.features = Mat<double>(n, k_slots + 2);
  fs.features.zero();
  parallel_for(
      n,
      [&](std::int64_t i) {
        const std::size_t s = static_cast<std::size_t>(i);
        double* row = fs.features.row(i);
        const double inv = 1.0 / fs.denom[s];
        // Column 0 sums the normalized per-component columns so the
        // decomposition reconstructs it exactly.
        double sum = 0.0;
        for (std::int64_t c = 0; c < k; ++c) {
          const double z = fs.split[static_cast<std::size_t>(c * n + i)] * inv;
          row[2 + c] = z;
          sum += z;
        }
        row[0] = sum;
        row[1] = fs.mhat[s] * inv;
      },
      e);
  return fs;
}

void assemble_features_backward(const ObjectiveEvaluator& ev, const std::vector<double>& x,
                                const StepFeatures& fs, const Mat<double>& d_features,
                                std::vector<double>& dm, std::vector<double>& dv,
                                std::vector<double>& d_x, Exec e) {
  const std::int64_t n = ev.n_spots();
  const std::int64_t k = ev.n_components();
  const double bc1 = 1.0 - std::pow(kMomentBeta1, static_cast<double>(fs.t));
  const double bc2 = 1.0 - std::pow(kMomentBeta2, static_cast<double>(fs.t));

  // Per-component adjoint columns (inputs to the curvature products) plus
  // the summed-gradient adjoint routed through the moment recurrences.
  std::vector<double> cols(static_cast<std::size_t>(k * n), 0.0);
  std::vector<double> dg(static_cast<std::size_t>(n), 0.0);

  parallel_for(
      n,
      [&](std::int64_t i) {
        const std::size_t s = static_cast<std::size_t>(i);
        const double* drow = d_features.row(i);
        const double d = fs.denom[s];
        const double inv = 1.0 / d;
        const double mh = fs.mhat[s];

        // z_c = split_c / d; column 0 = sum_c z_c; column 1 = mhat / d.
        double dd = -drow[1] * mh * inv * inv;
        for (std::int64_t c = 0; c < k; ++c) {
          const double dz = drow[2 + c] + drow[0];
          const double z = fs.split[static_cast<std::size_t>(c * n + i)] * inv;
          cols[static_cast<std::size_t>(c * n + i)] = dz * inv;
          dd -= dz * z * inv;
        }
        const double dmhat = drow[1] * inv;

        // d = sqrt(vhat) + eps with the square-root kink pinned to zero.
        const double root = d - kMomentEps;
        const double dvhat = root > 0.0 ? dd / (2.0 * root) : 0.0;

        double dm_t = dmhat / bc1 + dm[s];
        double dv_t = dvhat / bc2 + dv[s];
        dg[s] = (1.0 - kMomentBeta1) * dm_t + 2.0 * (1.0 - kMomentBeta2) * fs.g[s] * dv_t;
        dm[s] = kMomentBeta1 * dm_t;
        dv[s] = kMomentBeta2 * dv_t;
      },
      e);

  // Fold the summed-gradient adjoint into every component column, then pull
  // everything through the per-component curvature.
  for (std::int64_t c = 0; c < k; ++c) {
    double* col = cols.data() + c * n;
    for (std::int64_t i = 0; i < n; ++i) col[i] += dg[static_cast<std::size_t>(i)];
  }
  d_x.assign(static_cast<std::size_t>(n), 0.0);
  if (k > 0) ev.mixed_hvp(x.data(), cols.data(), d_x.data(), e);
}

RunTrace l2o_minimize(const ObjectiveEvaluator& ev, const PlanProblem& p,
                      const L2OParams<float>& net, std::vector<double>& x,
                      const L2ORunOptions& opt, Exec e) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto seconds = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

  const std::int64_t n = ev.n_spots();
  const double lo = p.mu_lo(), hi = p.mu_hi();
  RunTrace trace;
  MomentState moments(n);
  Mat<float> hidden;
  bool have_hidden = false;
  const RopeTable<float> rope = make_rope_table<float>(net.cfg, n);

  Mat<float> feat_f(n, net.cfg.feature_dim());
  std::vector<float> steps;
  Mat<float> h_next;

  for (std::int64_t iter = 1; iter <= opt.max_iters; ++iter) {
    StepFeatures fs = assemble_features(ev, x, moments, net.cfg.k_slots, e);
    trace.append(iter - 1, fs.loss, seconds());
    if (!std::isfinite(fs.loss)) {
      trace.status = RunStatus::non_finite;
      return trace;
    }
    if (fs.loss <= opt.target_loss) {
      trace.status = RunStatus::converged;
      return trace;
    }
    if (seconds() > opt.max_seconds) {
      trace.status = RunStatus::ok;
      return trace;
    }

    for (std::size_t i = 0; i < fs.features.a.size(); ++i)
      feat_f.a[i] = static_cast<float>(fs.features.a[i]);
    l2o_forward(net, feat_f, have_hidden ? &hidden : nullptr, h_next, steps, nullptr, opt.mode,
                &rope, e);
    hidden = h_next;
    have_hidden = true;

    bool finite = true;
    for (std::int64_t i = 0; i < n; ++i) {
      const double s = static_cast<double>(steps[static_cast<std::size_t>(i)]);
      if (!std::isfinite(s)) {
        finite = false;
        break;
      }
      x[static_cast<std::size_t>(i)] -= s;
    }
    if (!finite) {
      trace.status = RunStatus::non_finite;
      return trace;
    }
    if (iter > kClipStartIter)
      for (auto& xi : x) xi = std::min(hi, std::max(lo, xi));
  }
  trace.append(opt.max_iters, ev.value(x.data(), e), seconds());
  trace.status = RunStatus::ok;
  return trace;
}

}  // namespace spotopt
