#include "spotopt/problem.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace spotopt {

const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::d_max: return "d_max";
    case ObjectiveKind::d_min: return "d_min";
    case ObjectiveKind::d_mean: return "d_mean";
  }
  return "d_max";
}

ObjectiveKind objective_kind_from_string(const std::string& s) {
  if (s == "d_max") return ObjectiveKind::d_max;
  if (s == "d_min") return ObjectiveKind::d_min;
  if (s == "d_mean") return ObjectiveKind::d_mean;
  throw std::invalid_argument("unknown objective kind: " + s);
}

double PlanProblem::rx_max() const {
  double rx = 0.0;
  for (const auto& s : structures) {
    if (s.kind != StructureKind::target) continue;
    auto it = prescriptions.find(s.name);
    if (it != prescriptions.end()) rx = std::max(rx, it->second);
  }
  return rx;
}

std::int64_t PlanProblem::structure_index(const std::string& name) const {
  for (std::size_t i = 0; i < structures.size(); ++i)
    if (structures[i].name == name) return static_cast<std::int64_t>(i);
  return -1;
}

void PlanProblem::validate() const {
  matrix.validate();
  if (fractions < 1) throw std::invalid_argument("fractions must be >= 1");
  if (objectives.empty()) throw std::invalid_argument("problem needs at least one objective");

  std::unordered_set<std::string> names;
  for (const auto& s : structures) {
    if (s.name.empty()) throw std::invalid_argument("structure with empty name");
    if (!names.insert(s.name).second)
      throw std::invalid_argument("duplicate structure name: " + s.name);
    std::unordered_set<std::int64_t> seen;
    for (auto v : s.voxel_ids) {
      if (v < 0 || v >= matrix.rows)
        throw std::invalid_argument("voxel id out of range in " + s.name);
      if (!seen.insert(v).second)
        throw std::invalid_argument("duplicate voxel id in " + s.name);
    }
  }
  for (const auto& o : objectives) {
    if (o.structure_index < 0 ||
        o.structure_index >= static_cast<std::int64_t>(structures.size()))
      throw std::invalid_argument("objective references missing structure");
    if (structures[static_cast<std::size_t>(o.structure_index)].voxel_ids.empty())
      throw std::invalid_argument("objective on empty structure");
    if (!(o.weight >= 0.0) || !std::isfinite(o.weight))
      throw std::invalid_argument("objective weight must be finite and >= 0");
    if (!(o.dose_limit >= 0.0) || !std::isfinite(o.dose_limit))
      throw std::invalid_argument("objective dose limit must be finite and >= 0");
  }
  for (const auto& [name, rx] : prescriptions) {
    if (structure_index(name) < 0)
      throw std::invalid_argument("prescription for unknown structure: " + name);
    if (!(rx > 0.0) || !std::isfinite(rx))
      throw std::invalid_argument("prescription must be finite and > 0");
  }
}

std::vector<double> dose(const PlanProblem& p, const SpotVector& x, Exec e) {
  if (static_cast<std::int64_t>(x.size()) != p.n_spots())
    throw std::invalid_argument("dose: x length does not match spot count");
  std::vector<double> d(static_cast<std::size_t>(p.n_voxels()));
  csr_matvec(p.matrix, x.data(), d.data(), e);
  return d;
}

std::vector<double> unit_mu_dose(const PlanProblem& p, Exec e) {
  const SpotVector ones(static_cast<std::size_t>(p.n_spots()), 1.0);
  return dose(p, ones, e);
}

}  // namespace spotopt
