// Plan-quality scoring and DVH metrics. Scores are negated mean squared
// distances of structure doses to their allowed intervals: zero is the
// best attainable, every violated voxel pulls the score down.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "spotopt/goals.hpp"
#include "spotopt/parallel.hpp"
#include "spotopt/problem.hpp"

namespace spotopt {

// Mean over voxels of max(0, lo-d)^2 + max(0, d-hi)^2. Rejects an empty
// dose vector.
double structure_penalty(const std::vector<double>& dose, const DoseInterval& iv);

// Allowed interval for a target: [rx, 1.05 * rx_max].
DoseInterval target_interval(double rx, double rx_max);

// ---- DVH metrics -----------------------------------------------------

// Minimum dose received by the hottest p percent of the volume, with
// linear interpolation between sorted voxels. p in (0, 100].
double dvh_d_percent(const std::vector<double>& dose, double p);

// Fraction of voxels receiving at least d_gy.
double dvh_v_at(const std::vector<double>& dose, double d_gy);

double dvh_mean(const std::vector<double>& dose);

// Minimum dose in the hottest `cc` cubic centimeters; voxel_cc is the
// volume of one voxel. Both must be positive.
double dvh_d_cc(const std::vector<double>& dose, double cc, double voxel_cc);

// ---- Plan report -----------------------------------------------------

struct StructureScore {
  std::string name;
  StructureKind kind = StructureKind::oar;
  DoseInterval interval;
  double penalty = 0.0;  // mean squared interval distance
  double score = 0.0;    // -penalty
  double d_mean = 0.0;
  double d_min = 0.0;
  double d_max = 0.0;
  std::optional<double> d99;     // targets: D_99%
  std::optional<double> v99;     // targets: fraction >= 0.99 * Rx
  std::optional<double> d003cc;  // hottest 0.03 cc, when voxel volume known
  bool unknown_goal = false;     // scored with the fallback interval
};

struct PlanReport {
  std::vector<StructureScore> structures;
  double total_score = 0.0;  // sum of structure scores
};

// Scores every target and OAR structure: targets against the prescription
// interval, OARs against their goal-table interval. A structure missing
// from the table is scored with `fallback` and flagged. Auxiliary
// structures are skipped.
PlanReport plan_score(const PlanProblem& p, const SpotVector& x, const ClinicalGoalTable& goals,
                      const DoseInterval& fallback = DoseInterval{0.0, 50.0},
                      Exec e = default_exec());

std::string report_to_csv(const PlanReport& r);
std::string report_to_text(const PlanReport& r);
void save_report(const PlanReport& r, const std::string& csv_path,
                 const std::string& text_path);

}  // namespace spotopt
