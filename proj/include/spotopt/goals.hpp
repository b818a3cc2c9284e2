// Clinical goal table: per-OAR dose limits (used to seed objectives) and
// allowable dose intervals (used by the plan score). Targets are not
// listed; their interval is derived from the prescription at scoring time.

#pragma once

#include <string>
#include <vector>

#include "spotopt/problem.hpp"

namespace spotopt {

struct DoseInterval {
  double lo = 0.0;
  double hi = 0.0;
  void validate() const;  // 0 <= lo <= hi
};

struct ClinicalGoal {
  std::string structure;
  ObjectiveKind kind = ObjectiveKind::d_max;  // d_max or d_mean
  double d_clinic = 0.0;                      // Gy, objective limit
  DoseInterval interval;                      // Gy, allowed band for scoring
};

struct ClinicalGoalTable {
  std::vector<ClinicalGoal> goals;

  const ClinicalGoal* find(const std::string& structure) const;
  void validate() const;

  // The built-in head-and-neck tolerance set shipped with the repo.
  static ClinicalGoalTable builtin();
};

// Canonical JSON form (stable field order and indentation), so a saved
// table is byte-stable under load/save round trips.
std::string goals_to_json(const ClinicalGoalTable& t);
ClinicalGoalTable goals_from_json(const std::string& text);

void save_goals(const ClinicalGoalTable& t, const std::string& path);
ClinicalGoalTable load_goals(const std::string& path);

}  // namespace spotopt
