#include "spotopt/lbfgsb.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace spotopt {
namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

void clamp_into(std::vector<double>& x, const Bounds& b) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], b.lo[i], b.hi[i]);
}

double projected_grad_norm(const std::vector<double>& x, const std::vector<double>& g,
                           const Bounds& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double step = std::clamp(x[i] - g[i], b.lo[i], b.hi[i]) - x[i];
    worst = std::max(worst, std::abs(step));
  }
  return worst;
}

}  // namespace

bool QuasiNewtonHistory::push(const std::vector<double>& s, const std::vector<double>& y) {
  const double sy = dot(s, y);
  if (!(sy > 1e-10 * norm2(s) * norm2(y))) return false;
  Pair p;
  p.s = s;
  p.y = y;
  p.sy = sy;
  p.yy = dot(y, y);
  pairs_.push_back(std::move(p));
  if (static_cast<int>(pairs_.size()) > depth_) pairs_.erase(pairs_.begin());
  return true;
}

void QuasiNewtonHistory::clear() { pairs_.clear(); }

double QuasiNewtonHistory::gamma() const {
  if (pairs_.empty()) return 1.0;
  const Pair& p = pairs_.back();
  return p.sy / p.yy;
}

std::vector<double> QuasiNewtonHistory::search_direction(const std::vector<double>& g) const {
  std::vector<double> q = g;
  const int m = size();
  std::vector<double> alpha(static_cast<std::size_t>(m));
  for (int i = m - 1; i >= 0; --i) {
    const Pair& p = pairs_[static_cast<std::size_t>(i)];
    alpha[i] = dot(p.s, q) / p.sy;
    for (std::size_t j = 0; j < q.size(); ++j) q[j] -= alpha[i] * p.y[j];
  }
  const double g0 = gamma();
  for (auto& v : q) v *= g0;
  for (int i = 0; i < m; ++i) {
    const Pair& p = pairs_[static_cast<std::size_t>(i)];
    const double beta = dot(p.y, q) / p.sy;
    for (std::size_t j = 0; j < q.size(); ++j) q[j] += (alpha[i] - beta) * p.s[j];
  }
  for (auto& v : q) v = -v;
  return q;
}

void Bounds::validate(std::size_t n) const {
  if (lo.size() != n || hi.size() != n)
    throw std::invalid_argument("bounds size mismatch");
  for (std::size_t i = 0; i < n; ++i)
    if (!(lo[i] <= hi[i])) throw std::invalid_argument("infeasible bounds (lo > hi)");
}

RunTrace lbfgsb_minimize(const ValueGradFn& fg, std::vector<double>& x, const Bounds& bounds,
                         const LbfgsbOptions& opt) {
  const std::size_t n = x.size();
  bounds.validate(n);
  clamp_into(x, bounds);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  RunTrace trace;
  auto record = [&](std::int64_t iter, double loss) {
    trace.append(iter, loss, elapsed());
    if (opt.record_snapshots) trace.snapshots.push_back(x);
  };

  QuasiNewtonHistory hist(opt.memory);
  std::vector<double> g(n), g_new(n), x_new(n), d(n), masked(n);
  double f = fg(x, g);
  record(0, f);

  for (std::int64_t it = 1; it <= opt.max_iters; ++it) {
    if (f <= opt.target_loss || elapsed() >= opt.max_seconds) break;
    if (projected_grad_norm(x, g, bounds) <= opt.pg_tol) {
      trace.status = RunStatus::converged;
      break;
    }

    // Active variables sit on a bound with the gradient pushing outward.
    std::vector<char> active(n, 0);
    if (!opt.project_after_line_search) {
      for (std::size_t i = 0; i < n; ++i)
        active[i] = (x[i] <= bounds.lo[i] && g[i] > 0.0) ||
                    (x[i] >= bounds.hi[i] && g[i] < 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) masked[i] = active[i] ? 0.0 : g[i];

    d = hist.search_direction(masked);
    // Keep the step inside the feasible cone: drop active components and
    // any component that would immediately leave the box.
    auto conform = [&] {
      for (std::size_t i = 0; i < n; ++i) {
        if (active[i]) d[i] = 0.0;
        if (opt.project_after_line_search) continue;
        if (x[i] <= bounds.lo[i] && d[i] < 0.0) d[i] = 0.0;
        if (x[i] >= bounds.hi[i] && d[i] > 0.0) d[i] = 0.0;
      }
    };
    conform();
    double dg = dot(d, g);
    if (!(dg < 0.0)) {
      hist.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -masked[i];
      conform();
      dg = dot(d, g);
      if (!(dg < 0.0)) {
        trace.status = RunStatus::converged;  // no feasible descent left
        break;
      }
    }

    // Largest feasible step before a free variable hits a bound.
    double a_max = std::numeric_limits<double>::infinity();
    if (!opt.project_after_line_search) {
      for (std::size_t i = 0; i < n; ++i) {
        if (d[i] > 0.0)
          a_max = std::min(a_max, (bounds.hi[i] - x[i]) / d[i]);
        else if (d[i] < 0.0)
          a_max = std::min(a_max, (bounds.lo[i] - x[i]) / d[i]);
      }
      if (!(a_max > 0.0)) {
        trace.status = RunStatus::converged;
        break;
      }
    }

    // Strong Wolfe search on the feasible segment (bracketing + zoom).
    const double c1 = opt.wolfe_c1, c2 = opt.wolfe_c2;
    auto phi = [&](double a, double* dphi) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = x[i] + a * d[i];
      if (opt.project_after_line_search) clamp_into(x_new, bounds);
      const double v = fg(x_new, g_new);
      if (dphi) *dphi = dot(d, g_new);
      return v;
    };

    double a_prev = 0.0, f_prev = f;
    double a = std::min(1.0, a_max);
    bool accepted = false;
    double f_acc = f;
    int evals = 0;

    // On success x_new/g_new hold the accepted point, so no re-evaluation
    // is needed after the search.
    auto zoom = [&](double lo_a, double f_lo, double hi_a) {
      for (; evals < opt.max_line_search;) {
        const double mid = 0.5 * (lo_a + hi_a);
        double dphi_m;
        const double fm = phi(mid, &dphi_m);
        ++evals;
        if (fm > f + c1 * mid * dg || fm >= f_lo) {
          hi_a = mid;
        } else {
          if (std::abs(dphi_m) <= -c2 * dg) {
            a = mid;
            f_acc = fm;
            accepted = true;
            return;
          }
          if (dphi_m * (hi_a - lo_a) >= 0.0) hi_a = lo_a;
          lo_a = mid;
          f_lo = fm;
        }
        if (std::abs(hi_a - lo_a) < 1e-16 * std::max(1.0, std::abs(hi_a))) break;
      }
      // Out of evaluations or interval collapsed: fall back to the best
      // sufficient-decrease point seen, re-evaluating to restore state.
      if (f_lo < f && lo_a > 0.0) {
        a = lo_a;
        f_acc = phi(lo_a, nullptr);
        accepted = true;
      }
    };

    while (evals < opt.max_line_search) {
      double dphi_a;
      const double fa = phi(a, &dphi_a);
      ++evals;
      if (fa > f + c1 * a * dg || (evals > 1 && fa >= f_prev)) {
        zoom(a_prev, f_prev, a);
        break;
      }
      if (std::abs(dphi_a) <= -c2 * dg) {
        f_acc = fa;
        accepted = true;
        break;
      }
      if (dphi_a >= 0.0) {
        zoom(a, fa, a_prev);
        break;
      }
      if (a >= a_max) {
        // Bound hit while still descending: accept the boundary step.
        f_acc = fa;
        accepted = true;
        break;
      }
      a_prev = a;
      f_prev = fa;
      a = std::min(2.0 * a, a_max);
    }

    if (!accepted || !(a > 0.0)) {
      trace.status = RunStatus::line_search_failed;
      break;
    }
    if (!std::isfinite(f_acc)) {
      trace.status = RunStatus::non_finite;
      break;
    }

    clamp_into(x_new, bounds);  // guard against rounding past a bound
    std::vector<double> s(n), yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - x[i];
      yv[i] = g_new[i] - g[i];
    }
    hist.push(s, yv);

    x.swap(x_new);
    g.swap(g_new);
    f = f_acc;
    record(it, f);
  }
  return trace;
}

RunTrace lbfgsb_minimize_problem(const ObjectiveEvaluator& ev, const PlanProblem& p,
                                 SpotVector& x, const LbfgsbOptions& opt) {
  Bounds b;
  b.lo.assign(static_cast<std::size_t>(p.n_spots()), p.mu_lo());
  b.hi.assign(static_cast<std::size_t>(p.n_spots()), p.mu_hi());
  const ValueGradFn fg = [&](const std::vector<double>& xv, std::vector<double>& gv) {
    return ev.gradient(xv.data(), gv.data());
  };
  return lbfgsb_minimize(fg, x, b, opt);
}

}  // namespace spotopt
