// Penalty objective for spot weight optimization.
//
//   f(x) = sum_k f_k(x)
//
//   d_max : f_k = (w/N) * sum_v max(0, d_v - D)^2
//   d_min : f_k = (w/N) * sum_v min(0, d_v - D)^2
//   d_mean: f_k = w * max(0, mean_v(d_v) - D)^2
//
// with d = M_S x restricted to the component's structure S (N voxels).
// The evaluator slices the influence matrix into per-structure blocks at
// construction and keeps a transposed copy of each block, so gradients and
// Hessian products run as race-free row-parallel products. All reductions
// use fixed-size blocks combined in index order, so serial and parallel
// execution give bit-identical results.

#pragma once

#include <cstdint>
#include <vector>

#include "spotopt/parallel.hpp"
#include "spotopt/problem.hpp"
#include "spotopt/sparse.hpp"

namespace spotopt {

class ObjectiveEvaluator {
 public:
  explicit ObjectiveEvaluator(const PlanProblem& p);

  std::int64_t n_spots() const { return n_spots_; }
  std::int64_t n_components() const { return static_cast<std::int64_t>(comps_.size()); }

  double value(const double* x, Exec e = default_exec()) const;

  // Per-component penalty terms, in objective order.
  std::vector<double> component_values(const double* x, Exec e = default_exec()) const;

  // grad[n_spots] <- df/dx; returns f(x). Components sharing a structure are
  // folded into one transpose product.
  double gradient(const double* x, double* grad, Exec e = default_exec()) const;

  // split[k * n_spots + i] <- df_k/dx_i for every component k; returns f(x).
  double split_gradients(const double* x, double* split, Exec e = default_exec()) const;

  // out[n_spots] <- H(x) v using the generalized second derivative of the
  // one-sided penalties (kinks count as inactive).
  void hvp(const double* x, const double* v, double* out, Exec e = default_exec()) const;

  // out[n_spots] <- sum_k H_k(x) c_k where H_k is the Hessian of component
  // k alone and c_k = cols[k * n_spots ... ]. With all c_k equal this is
  // hvp. Used to pull gradients back through per-component feature columns.
  void mixed_hvp(const double* x, const double* cols, double* out,
                 Exec e = default_exec()) const;

 private:
  struct Block {
    std::int64_t structure_index = -1;
    CsrMatrix sub;    // N_s x n_spots
    CsrMatrix sub_t;  // n_spots x N_s
    std::vector<std::int64_t> comp_ids;  // objective indices on this structure
  };

  struct Comp {
    std::int64_t block = -1;
    ObjectiveKind kind = ObjectiveKind::d_max;
    double weight = 0.0;
    double limit = 0.0;
    std::int64_t n = 0;  // structure voxel count
  };

  const Block& block_of(const Comp& c) const { return blocks_[static_cast<std::size_t>(c.block)]; }

  std::int64_t n_spots_ = 0;
  std::vector<Block> blocks_;
  std::vector<Comp> comps_;
};

}  // namespace spotopt
