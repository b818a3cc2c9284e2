// planprob/1 on-disk container: a directory holding
//   problem.json      header (dims, structures, objectives, prescriptions, Fx)
//   row_offsets.u64   little-endian uint64 array, n_voxels + 1 entries
//   col_indices.u32   little-endian uint32 array, nnz entries
//   values.f64        little-endian float64 array, nnz entries

#pragma once

#include <string>

#include "spotopt/problem.hpp"

namespace spotopt {

inline constexpr const char* kPlanProblemVersion = "planprob/1";

void save_problem(const PlanProblem& p, const std::string& dir);
PlanProblem load_problem(const std::string& dir);

// Raw little-endian float64 array; used for MU vectors on disk.
void save_f64(const std::vector<double>& x, const std::string& path);
std::vector<double> load_f64(const std::string& path);

}  // namespace spotopt
