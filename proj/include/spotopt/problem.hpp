// Planning problem data model: structures, penalty objectives, spot bounds.
//
// A PlanProblem couples a dose influence matrix (voxels x spots, Gy per MU)
// with named structures and an ordered list of one-sided penalty
// objectives. Spot MU values are stored per course, i.e. per-fraction MU
// times the fraction count; machine bounds of 3..300 MU per fraction scale
// accordingly.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "spotopt/parallel.hpp"
#include "spotopt/sparse.hpp"

namespace spotopt {

using SpotVector = std::vector<double>;

inline constexpr double kMuMinPerFraction = 3.0;
inline constexpr double kMuMaxPerFraction = 300.0;

enum class StructureKind { target, oar, auxiliary };

struct Structure {
  std::string name;
  StructureKind kind = StructureKind::oar;
  std::vector<std::int64_t> voxel_ids;  // unique, < n_voxels
};

enum class ObjectiveKind { d_max, d_min, d_mean };

const char* to_string(ObjectiveKind k);
ObjectiveKind objective_kind_from_string(const std::string& s);

struct ObjectiveComponent {
  std::int64_t structure_index = -1;  // into PlanProblem::structures
  ObjectiveKind kind = ObjectiveKind::d_max;
  double weight = 1.0;      // >= 0
  double dose_limit = 0.0;  // Gy, >= 0
};

struct PlanProblem {
  CsrMatrix matrix;  // rows = voxels, cols = spots
  std::vector<Structure> structures;
  std::vector<ObjectiveComponent> objectives;  // order defines channel layout
  std::map<std::string, double> prescriptions;  // target name -> Rx (Gy, course)
  std::int64_t fractions = 1;

  // Optional geometry carried by phantom-generated problems; zero when the
  // problem came from raw arrays.
  std::array<std::int64_t, 3> grid_dims{0, 0, 0};
  double voxel_spacing_mm = 0.0;

  std::int64_t n_voxels() const { return matrix.rows; }
  std::int64_t n_spots() const { return matrix.cols; }
  std::int64_t n_objectives() const { return static_cast<std::int64_t>(objectives.size()); }

  double mu_lo() const { return kMuMinPerFraction * static_cast<double>(fractions); }
  double mu_hi() const { return kMuMaxPerFraction * static_cast<double>(fractions); }

  // Largest prescription among all targets (Rx_max).
  double rx_max() const;

  std::int64_t structure_index(const std::string& name) const;  // -1 if absent

  // Checks all documented invariants; throws std::invalid_argument.
  void validate() const;
};

// Full-grid dose M x (Gy). x must have n_spots entries.
std::vector<double> dose(const PlanProblem& p, const SpotVector& x, Exec e = default_exec());

// Row sums of M: the dose delivered when every spot carries 1 MU.
std::vector<double> unit_mu_dose(const PlanProblem& p, Exec e = default_exec());

}  // namespace spotopt
