#include "spotopt/objective.hpp"

#include <algorithm>
#include <cstring>
#include <map>

namespace spotopt {
namespace {

// Extracts the rows of `m` listed in `voxels` as a compact CSR block.
CsrMatrix slice_rows(const CsrMatrix& m, const std::vector<std::int64_t>& voxels) {
  CsrMatrix s;
  s.rows = static_cast<std::int64_t>(voxels.size());
  s.cols = m.cols;
  s.row_offsets.assign(voxels.size() + 1, 0);
  std::uint64_t nnz = 0;
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const std::int64_t v = voxels[i];
    nnz += m.row_offsets[v + 1] - m.row_offsets[v];
    s.row_offsets[i + 1] = nnz;
  }
  s.col_idx.resize(nnz);
  s.values.resize(nnz);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const std::int64_t v = voxels[i];
    const std::uint64_t src = m.row_offsets[v];
    const std::uint64_t len = m.row_offsets[v + 1] - src;
    std::memcpy(s.col_idx.data() + s.row_offsets[i], m.col_idx.data() + src,
                len * sizeof(std::uint32_t));
    std::memcpy(s.values.data() + s.row_offsets[i], m.values.data() + src,
                len * sizeof(double));
  }
  return s;
}

}  // namespace

ObjectiveEvaluator::ObjectiveEvaluator(const PlanProblem& p) {
  p.validate();
  n_spots_ = p.n_spots();
  std::map<std::int64_t, std::int64_t> block_of_structure;
  comps_.reserve(p.objectives.size());
  for (std::size_t k = 0; k < p.objectives.size(); ++k) {
    const ObjectiveComponent& o = p.objectives[k];
    auto it = block_of_structure.find(o.structure_index);
    if (it == block_of_structure.end()) {
      Block b;
      b.structure_index = o.structure_index;
      const auto& vox = p.structures[static_cast<std::size_t>(o.structure_index)].voxel_ids;
      b.sub = slice_rows(p.matrix, vox);
      b.sub_t = transpose(b.sub);
      it = block_of_structure.emplace(o.structure_index,
                                      static_cast<std::int64_t>(blocks_.size())).first;
      blocks_.push_back(std::move(b));
    }
    Comp c;
    c.block = it->second;
    c.kind = o.kind;
    c.weight = o.weight;
    c.limit = o.dose_limit;
    c.n = blocks_[static_cast<std::size_t>(c.block)].sub.rows;
    blocks_[static_cast<std::size_t>(c.block)].comp_ids.push_back(static_cast<std::int64_t>(k));
    comps_.push_back(c);
  }
}

std::vector<double> ObjectiveEvaluator::component_values(const double* x, Exec e) const {
  std::vector<double> out(comps_.size(), 0.0);
  std::vector<double> dose;
  for (const Block& b : blocks_) {
    dose.resize(static_cast<std::size_t>(b.sub.rows));
    csr_matvec(b.sub, x, dose.data(), e);
    for (std::int64_t k : b.comp_ids) {
      const Comp& c = comps_[static_cast<std::size_t>(k)];
      const double inv_n = 1.0 / static_cast<double>(c.n);
      switch (c.kind) {
        case ObjectiveKind::d_max:
          out[k] = c.weight * inv_n *
                   block_sum(static_cast<std::size_t>(c.n),
                             [&](std::size_t v) {
                               const double r = std::max(0.0, dose[v] - c.limit);
                               return r * r;
                             },
                             e);
          break;
        case ObjectiveKind::d_min:
          out[k] = c.weight * inv_n *
                   block_sum(static_cast<std::size_t>(c.n),
                             [&](std::size_t v) {
                               const double r = std::min(0.0, dose[v] - c.limit);
                               return r * r;
                             },
                             e);
          break;
        case ObjectiveKind::d_mean: {
          const double mean =
              inv_n * block_sum(static_cast<std::size_t>(c.n),
                                [&](std::size_t v) { return dose[v]; }, e);
          const double r = std::max(0.0, mean - c.limit);
          out[k] = c.weight * r * r;
          break;
        }
      }
    }
  }
  return out;
}

double ObjectiveEvaluator::value(const double* x, Exec e) const {
  const std::vector<double> terms = component_values(x, e);
  double f = 0.0;
  for (double t : terms) f += t;
  return f;
}

double ObjectiveEvaluator::gradient(const double* x, double* grad, Exec e) const {
  std::fill(grad, grad + n_spots_, 0.0);
  double f = 0.0;
  std::vector<double> dose;
  std::vector<double> resid;
  for (const Block& b : blocks_) {
    const std::size_t n = static_cast<std::size_t>(b.sub.rows);
    dose.resize(n);
    resid.assign(n, 0.0);
    csr_matvec(b.sub, x, dose.data(), e);
    double uniform = 0.0;  // shared coefficient from d_mean components
    for (std::int64_t k : b.comp_ids) {
      const Comp& c = comps_[static_cast<std::size_t>(k)];
      const double inv_n = 1.0 / static_cast<double>(c.n);
      const double coef = 2.0 * c.weight * inv_n;
      switch (c.kind) {
        case ObjectiveKind::d_max: {
          f += c.weight * inv_n *
               block_sum(n,
                         [&](std::size_t v) {
                           const double r = std::max(0.0, dose[v] - c.limit);
                           return r * r;
                         },
                         e);
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t v) {
                         resid[v] += coef * std::max(0.0, dose[v] - c.limit);
                       },
                       e);
          break;
        }
        case ObjectiveKind::d_min: {
          f += c.weight * inv_n *
               block_sum(n,
                         [&](std::size_t v) {
                           const double r = std::min(0.0, dose[v] - c.limit);
                           return r * r;
                         },
                         e);
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t v) {
                         resid[v] += coef * std::min(0.0, dose[v] - c.limit);
                       },
                       e);
          break;
        }
        case ObjectiveKind::d_mean: {
          const double mean = inv_n * block_sum(n, [&](std::size_t v) { return dose[v]; }, e);
          const double r = std::max(0.0, mean - c.limit);
          f += c.weight * r * r;
          uniform += coef * r;
          break;
        }
      }
    }
    if (uniform != 0.0)
      parallel_for(static_cast<std::int64_t>(n),
                   [&](std::int64_t v) { resid[v] += uniform; }, e);
    csr_matvec_add(b.sub_t, resid.data(), grad, e);
  }
  return f;
}

double ObjectiveEvaluator::split_gradients(const double* x, double* split, Exec e) const {
  double f = 0.0;
  std::vector<double> dose;
  std::vector<double> resid;
  for (const Block& b : blocks_) {
    const std::size_t n = static_cast<std::size_t>(b.sub.rows);
    dose.resize(n);
    csr_matvec(b.sub, x, dose.data(), e);
    for (std::int64_t k : b.comp_ids) {
      const Comp& c = comps_[static_cast<std::size_t>(k)];
      const double inv_n = 1.0 / static_cast<double>(c.n);
      const double coef = 2.0 * c.weight * inv_n;
      double* col = split + k * n_spots_;
      if (c.kind == ObjectiveKind::d_mean) {
        const double mean = inv_n * block_sum(n, [&](std::size_t v) { return dose[v]; }, e);
        const double r = std::max(0.0, mean - c.limit);
        f += c.weight * r * r;
        resid.assign(n, coef * r);
      } else {
        resid.resize(n);
        const bool upper = c.kind == ObjectiveKind::d_max;
        f += c.weight * inv_n *
             block_sum(n,
                       [&](std::size_t v) {
                         const double d = dose[v] - c.limit;
                         const double r = upper ? std::max(0.0, d) : std::min(0.0, d);
                         return r * r;
                       },
                       e);
        parallel_for(static_cast<std::int64_t>(n),
                     [&](std::int64_t v) {
                       const double d = dose[v] - c.limit;
                       resid[v] = coef * (upper ? std::max(0.0, d) : std::min(0.0, d));
                     },
                     e);
      }
      csr_matvec(b.sub_t, resid.data(), col, e);
    }
  }
  return f;
}

void ObjectiveEvaluator::hvp(const double* x, const double* v, double* out, Exec e) const {
  std::fill(out, out + n_spots_, 0.0);
  std::vector<double> dose;
  std::vector<double> dv;
  std::vector<double> resid;
  for (const Block& b : blocks_) {
    const std::size_t n = static_cast<std::size_t>(b.sub.rows);
    dose.resize(n);
    dv.resize(n);
    resid.assign(n, 0.0);
    csr_matvec(b.sub, x, dose.data(), e);
    csr_matvec(b.sub, v, dv.data(), e);
    double uniform = 0.0;
    for (std::int64_t k : b.comp_ids) {
      const Comp& c = comps_[static_cast<std::size_t>(k)];
      const double inv_n = 1.0 / static_cast<double>(c.n);
      const double coef = 2.0 * c.weight * inv_n;
      switch (c.kind) {
        case ObjectiveKind::d_max:
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t i) {
                         if (dose[i] - c.limit > 0.0) resid[i] += coef * dv[i];
                       },
                       e);
          break;
        case ObjectiveKind::d_min:
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t i) {
                         if (dose[i] - c.limit < 0.0) resid[i] += coef * dv[i];
                       },
                       e);
          break;
        case ObjectiveKind::d_mean: {
          const double mean = inv_n * block_sum(n, [&](std::size_t i) { return dose[i]; }, e);
          if (mean - c.limit > 0.0) {
            const double sum_dv = block_sum(n, [&](std::size_t i) { return dv[i]; }, e);
            uniform += coef * inv_n * sum_dv;
          }
          break;
        }
      }
    }
    if (uniform != 0.0)
      parallel_for(static_cast<std::int64_t>(n),
                   [&](std::int64_t i) { resid[i] += uniform; }, e);
    csr_matvec_add(b.sub_t, resid.data(), out, e);
  }
}

void ObjectiveEvaluator::mixed_hvp(const double* x, const double* cols, double* out,
                                   Exec e) const {
  std::fill(out, out + n_spots_, 0.0);
  std::vector<double> dose;
  std::vector<double> dv;
  std::vector<double> resid;
  for (const Block& b : blocks_) {
    const std::size_t n = static_cast<std::size_t>(b.sub.rows);
    dose.resize(n);
    dv.resize(n);
    resid.assign(n, 0.0);
    csr_matvec(b.sub, x, dose.data(), e);
    double uniform = 0.0;
    for (std::int64_t k : b.comp_ids) {
      const Comp& c = comps_[static_cast<std::size_t>(k)];
      const double inv_n = 1.0 / static_cast<double>(c.n);
      const double coef = 2.0 * c.weight * inv_n;
      csr_matvec(b.sub, cols + k * n_spots_, dv.data(), e);
      switch (c.kind) {
        case ObjectiveKind::d_max:
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t i) {
                         if (dose[i] - c.limit > 0.0) resid[i] += coef * dv[i];
                       },
                       e);
          break;
        case ObjectiveKind::d_min:
          parallel_for(static_cast<std::int64_t>(n),
                       [&](std::int64_t i) {
                         if (dose[i] - c.limit < 0.0) resid[i] += coef * dv[i];
                       },
                       e);
          break;
        case ObjectiveKind::d_mean: {
          const double mean = inv_n * block_sum(n, [&](std::size_t i) { return dose[i]; }, e);
          if (mean - c.limit > 0.0) {
            const double sum_dv = block_sum(n, [&](std::size_t i) { return dv[i]; }, e);
            uniform += coef * inv_n * sum_dv;
          }
          break;
        }
      }
    }
    if (uniform != 0.0)
      parallel_for(static_cast<std::int64_t>(n),
                   [&](std::int64_t i) { resid[i] += uniform; }, e);
    csr_matvec_add(b.sub_t, resid.data(), out, e);
  }
}

}  // namespace spotopt
