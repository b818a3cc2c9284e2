// Shared test helpers: random problem construction and an independently
// coded dense reference for the penalty objective. The dense path uses
// plain row-major arrays and naive loops on purpose; it shares no code
// with the sparse evaluator it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "spotopt/problem.hpp"

namespace testsup {

inline std::vector<double> densify(const spotopt::CsrMatrix& m) {
  std::vector<double> d(static_cast<std::size_t>(m.rows * m.cols), 0.0);
  for (std::int64_t r = 0; r < m.rows; ++r)
    for (std::uint64_t k = m.row_offsets[r]; k < m.row_offsets[r + 1]; ++k)
      d[static_cast<std::size_t>(r) * m.cols + m.col_idx[k]] += m.values[k];
  return d;
}

inline std::vector<double> dense_matvec(const std::vector<double>& m, std::int64_t rows,
                                        std::int64_t cols, const std::vector<double>& x) {
  std::vector<double> y(static_cast<std::size_t>(rows), 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) s += m[static_cast<std::size_t>(r) * cols + c] * x[c];
    y[r] = s;
  }
  return y;
}

struct DenseRef {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> m;  // row-major
  const spotopt::PlanProblem* p = nullptr;

  explicit DenseRef(const spotopt::PlanProblem& prob)
      : rows(prob.matrix.rows), cols(prob.matrix.cols), m(densify(prob.matrix)), p(&prob) {}

  std::vector<double> structure_dose(std::int64_t si, const std::vector<double>& x) const {
    const auto& vox = p->structures[static_cast<std::size_t>(si)].voxel_ids;
    std::vector<double> d(vox.size(), 0.0);
    for (std::size_t i = 0; i < vox.size(); ++i) {
      double s = 0.0;
      for (std::int64_t c = 0; c < cols; ++c)
        s += m[static_cast<std::size_t>(vox[i]) * cols + c] * x[c];
      d[i] = s;
    }
    return d;
  }

  double component_value(std::int64_t k, const std::vector<double>& x) const {
    const auto& o = p->objectives[static_cast<std::size_t>(k)];
    const auto d = structure_dose(o.structure_index, x);
    const double n = static_cast<double>(d.size());
    using spotopt::ObjectiveKind;
    if (o.kind == ObjectiveKind::d_mean) {
      double mean = 0.0;
      for (double v : d) mean += v;
      mean /= n;
      const double r = std::max(0.0, mean - o.dose_limit);
      return o.weight * r * r;
    }
    double acc = 0.0;
    for (double v : d) {
      const double r = o.kind == ObjectiveKind::d_max ? std::max(0.0, v - o.dose_limit)
                                                      : std::min(0.0, v - o.dose_limit);
      acc += r * r;
    }
    return o.weight / n * acc;
  }

  double value(const std::vector<double>& x) const {
    double f = 0.0;
    for (std::int64_t k = 0; k < p->n_objectives(); ++k) f += component_value(k, x);
    return f;
  }

  std::vector<double> component_grad(std::int64_t k, const std::vector<double>& x) const {
    const auto& o = p->objectives[static_cast<std::size_t>(k)];
    const auto& vox = p->structures[static_cast<std::size_t>(o.structure_index)].voxel_ids;
    const auto d = structure_dose(o.structure_index, x);
    const double n = static_cast<double>(d.size());
    std::vector<double> g(static_cast<std::size_t>(cols), 0.0);
    using spotopt::ObjectiveKind;
    if (o.kind == ObjectiveKind::d_mean) {
      double mean = 0.0;
      for (double v : d) mean += v;
      mean /= n;
      const double r = std::max(0.0, mean - o.dose_limit);
      const double coef = 2.0 * o.weight * r / n;
      for (std::size_t i = 0; i < vox.size(); ++i)
        for (std::int64_t c = 0; c < cols; ++c)
          g[c] += coef * m[static_cast<std::size_t>(vox[i]) * cols + c];
      return g;
    }
    for (std::size_t i = 0; i < vox.size(); ++i) {
      const double r = o.kind == ObjectiveKind::d_max
                           ? std::max(0.0, d[i] - o.dose_limit)
                           : std::min(0.0, d[i] - o.dose_limit);
      const double coef = 2.0 * o.weight * r / n;
      for (std::int64_t c = 0; c < cols; ++c)
        g[c] += coef * m[static_cast<std::size_t>(vox[i]) * cols + c];
    }
    return g;
  }

  std::vector<double> grad(const std::vector<double>& x) const {
    std::vector<double> g(static_cast<std::size_t>(cols), 0.0);
    for (std::int64_t k = 0; k < p->n_objectives(); ++k) {
      const auto gk = component_grad(k, x);
      for (std::int64_t c = 0; c < cols; ++c) g[c] += gk[c];
    }
    return g;
  }

  std::vector<double> hvp(const std::vector<double>& x, const std::vector<double>& v) const {
    std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
    using spotopt::ObjectiveKind;
    for (std::int64_t k = 0; k < p->n_objectives(); ++k) {
      const auto& o = p->objectives[static_cast<std::size_t>(k)];
      const auto& vox = p->structures[static_cast<std::size_t>(o.structure_index)].voxel_ids;
      const auto d = structure_dose(o.structure_index, x);
      const auto dv = structure_dose(o.structure_index, v);
      const double n = static_cast<double>(d.size());
      if (o.kind == ObjectiveKind::d_mean) {
        double mean = 0.0, mdv = 0.0;
        for (double t : d) mean += t;
        for (double t : dv) mdv += t;
        mean /= n;
        mdv /= n;
        if (mean - o.dose_limit > 0.0) {
          const double coef = 2.0 * o.weight * mdv / n;
          for (std::size_t i = 0; i < vox.size(); ++i)
            for (std::int64_t c = 0; c < cols; ++c)
              out[c] += coef * m[static_cast<std::size_t>(vox[i]) * cols + c];
        }
        continue;
      }
      for (std::size_t i = 0; i < vox.size(); ++i) {
        const bool active = o.kind == ObjectiveKind::d_max ? d[i] - o.dose_limit > 0.0
                                                           : d[i] - o.dose_limit < 0.0;
        if (!active) continue;
        const double coef = 2.0 * o.weight * dv[i] / n;
        for (std::int64_t c = 0; c < cols; ++c)
          out[c] += coef * m[static_cast<std::size_t>(vox[i]) * cols + c];
      }
    }
    return out;
  }

  // True when any one-sided term flips between active and inactive across
  // the two points; finite-difference checks skip such coordinates.
  bool activity_differs(const std::vector<double>& xa, const std::vector<double>& xb) const {
    using spotopt::ObjectiveKind;
    for (std::int64_t k = 0; k < p->n_objectives(); ++k) {
      const auto& o = p->objectives[static_cast<std::size_t>(k)];
      const auto da = structure_dose(o.structure_index, xa);
      const auto db = structure_dose(o.structure_index, xb);
      if (o.kind == ObjectiveKind::d_mean) {
        double ma = 0.0, mb = 0.0;
        for (double t : da) ma += t;
        for (double t : db) mb += t;
        ma /= static_cast<double>(da.size());
        mb /= static_cast<double>(db.size());
        if ((ma > o.dose_limit) != (mb > o.dose_limit)) return true;
        continue;
      }
      for (std::size_t i = 0; i < da.size(); ++i) {
        const bool aa = o.kind == ObjectiveKind::d_max ? da[i] > o.dose_limit : da[i] < o.dose_limit;
        const bool ab = o.kind == ObjectiveKind::d_max ? db[i] > o.dose_limit : db[i] < o.dose_limit;
        if (aa != ab) return true;
      }
    }
    return false;
  }
};

// Random sparse problem with n_structures random subsets and k components
// cycling through the three kinds. Limits are scaled off the unit-MU dose
// so that penalties are a mix of active and inactive at x ~ U[0, 2].
inline spotopt::PlanProblem random_problem(std::mt19937_64& rng, std::int64_t n_voxels,
                                           std::int64_t n_spots, double density,
                                           std::int64_t k_components) {
  using namespace spotopt;
  std::uniform_real_distribution<double> uval(0.0, 1.0);
  PlanProblem p;
  CooBuilder coo(n_voxels, n_spots);
  std::bernoulli_distribution keep(density);
  for (std::int64_t r = 0; r < n_voxels; ++r)
    for (std::int64_t c = 0; c < n_spots; ++c)
      if (keep(rng)) coo.add(r, c, uval(rng));
  // Guarantee no all-zero columns so gradients can reach every spot.
  for (std::int64_t c = 0; c < n_spots; ++c)
    coo.add(std::uniform_int_distribution<std::int64_t>(0, n_voxels - 1)(rng), c,
            0.05 + uval(rng));
  p.matrix = coo.build();

  const std::int64_t n_structs = std::min<std::int64_t>(k_components, 4);
  std::uniform_int_distribution<std::int64_t> uvox(0, n_voxels - 1);
  for (std::int64_t s = 0; s < n_structs; ++s) {
    Structure st;
    st.name = "S" + std::to_string(s);
    st.kind = s == 0 ? StructureKind::target : StructureKind::oar;
    std::vector<char> used(static_cast<std::size_t>(n_voxels), 0);
    const std::int64_t want = 1 + uvox(rng) % std::max<std::int64_t>(1, n_voxels / 2);
    for (std::int64_t i = 0; i < want; ++i) {
      const std::int64_t v = uvox(rng);
      if (!used[v]) {
        used[v] = 1;
        st.voxel_ids.push_back(v);
      }
    }
    if (st.voxel_ids.empty()) st.voxel_ids.push_back(uvox(rng));
    p.structures.push_back(std::move(st));
  }

  const auto base = unit_mu_dose(p);
  double dmean = 0.0;
  for (double v : base) dmean += v;
  dmean /= static_cast<double>(base.size());
  std::uniform_real_distribution<double> ulim(0.2, 2.0);
  for (std::int64_t k = 0; k < k_components; ++k) {
    ObjectiveComponent o;
    o.structure_index = k % n_structs;
    o.kind = static_cast<ObjectiveKind>(k % 3);
    o.weight = 0.25 + uval(rng);
    o.dose_limit = std::max(1e-3, dmean * ulim(rng));
    p.objectives.push_back(o);
  }
  p.prescriptions["S0"] = std::max(0.5, dmean);
  p.fractions = 1;
  p.validate();
  return p;
}

inline std::vector<double> random_x(std::mt19937_64& rng, std::int64_t n, double lo = 0.0,
                                    double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> x(static_cast<std::size_t>(n));
  for (auto& v : x) v = u(rng);
  return x;
}

inline double rel_err(double a, double b) {
  const double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / scale;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

}  // namespace testsup
