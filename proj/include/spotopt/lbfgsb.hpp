// Bound-constrained limited-memory quasi-Newton minimizer.
//
// Active-set mode (default): gradient-projection identification of the
// active bounds, a two-loop recursion step restricted to the free
// variables, and a strong Wolfe line search capped at the first bound
// crossing. A simpler project-after-line-search mode exists for tests.

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "spotopt/objective.hpp"
#include "spotopt/problem.hpp"
#include "spotopt/trace.hpp"

namespace spotopt {

class QuasiNewtonHistory {
 public:
  explicit QuasiNewtonHistory(int depth = 10) : depth_(depth) {}

  // Stores the pair unless the curvature test s.y > 1e-10 |s||y| fails.
  bool push(const std::vector<double>& s, const std::vector<double>& y);
  void clear();
  int size() const { return static_cast<int>(pairs_.size()); }

  // Initial inverse-Hessian scale gamma = s.y / y.y from the newest pair.
  double gamma() const;

  // Two-loop recursion: d = -H g.
  std::vector<double> search_direction(const std::vector<double>& g) const;

 private:
  struct Pair {
    std::vector<double> s, y;
    double sy = 0.0, yy = 0.0;
  };
  int depth_;
  std::vector<Pair> pairs_;  // oldest first
};

struct Bounds {
  std::vector<double> lo, hi;
  void validate(std::size_t n) const;
};

struct LbfgsbOptions {
  int memory = 10;
  std::int64_t max_iters = 100;
  double max_seconds = std::numeric_limits<double>::infinity();
  double target_loss = -std::numeric_limits<double>::infinity();
  double pg_tol = 1e-8;  // stop when the projected gradient inf-norm falls below
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
  int max_line_search = 20;
  bool project_after_line_search = false;
  bool record_snapshots = false;
};

// f(x) -> value, fills grad. x and grad have equal length.
using ValueGradFn =
    std::function<double(const std::vector<double>&, std::vector<double>&)>;

// Minimizes fg over the box. x holds the start and receives the final
// iterate. The trace records the start as iteration 0 and one point per
// accepted step.
RunTrace lbfgsb_minimize(const ValueGradFn& fg, std::vector<double>& x, const Bounds& bounds,
                         const LbfgsbOptions& opt = {});

// Convenience wrapper: penalty objective over the problem's MU box.
RunTrace lbfgsb_minimize_problem(const ObjectiveEvaluator& ev, const PlanProblem& p,
                                 SpotVector& x, const LbfgsbOptions& opt = {});

}  // namespace spotopt
