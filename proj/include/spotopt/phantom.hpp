// Synthetic phantom generator: ellipsoidal targets and organs at risk in a
// homogeneous water box, hexagonal spot grids per beam, and an analytic
// pencil-beam dose kernel assembled into a sparse influence matrix.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "spotopt/goals.hpp"
#include "spotopt/parallel.hpp"
#include "spotopt/problem.hpp"

namespace spotopt {

struct TargetSpec {
  std::string name;
  double rx_gy = 60.0;  // course prescription
  double weight = 1.0;  // weight of both default objectives
  std::array<double, 3> center_mm{};
  std::array<double, 3> radii_mm{};
};

struct OarSpec {
  std::string name;          // unique structure name
  std::string goal;          // goal-table key; defaults to name
  double weight = 1.0;
  double limit_gy = -1.0;    // override for the objective limit; < 0 = use table
  std::array<double, 3> center_mm{};
  std::array<double, 3> radii_mm{};
};

struct BeamSpec {
  double gantry_deg = 0.0;  // 0 = beam travels toward -y; rotates in the x-y plane
};

struct PhantomSpec {
  std::array<std::int64_t, 3> grid_dims{50, 50, 50};
  double voxel_spacing_mm = 2.0;
  std::vector<TargetSpec> targets;  // 1 to 4
  std::vector<OarSpec> oars;
  std::vector<BeamSpec> beams;  // 1 to 5
  std::int64_t fractions = 1;
  std::uint64_t seed = 0;
  // "auto": rescale the kernel so the least-squares uniform start lands
  // mid-way through the MU box; "none": keep raw kernel units.
  std::string dose_scale = "auto";

  void validate() const;
};

void save_phantom_spec(const PhantomSpec& s, const std::string& path);
PhantomSpec load_phantom_spec(const std::string& path);

struct Spot {
  std::int32_t beam = 0;
  std::int32_t layer = 0;
  std::int64_t row = 0, col = 0;  // hex lattice indices
  double a_mm = 0.0, b_mm = 0.0;  // lateral position in the beam frame
  double depth_mm = 0.0;          // Bragg depth (water-equivalent)
  double shifter_mm = 0.0;        // virtual range shifter thickness
  double energy_mev = 0.0;
};

struct SpotGrid {
  std::vector<Spot> spots;  // sorted by (beam, layer, row, col)
};

// Bragg-Kleeman power-law range-energy relation (water).
double proton_range_mm(double energy_mev);
double proton_energy_for_range_mm(double range_mm);

// Analytic depth-dose: entrance plateau that rises slowly with depth and
// rolls off through the peak region, plus a Gaussian Bragg peak at z = R.
double bragg_depth_dose(double z_mm, double range_mm, double sigma_mm);

// Range straggling plus energy-spread width of the Bragg peak.
double bragg_sigma_mm(double range_mm);

inline constexpr double kSpotSpacingMm = 7.0;
inline constexpr double kLayerSpacingMm = 7.0;
inline constexpr double kFieldExpansionMm = 5.0;
inline constexpr double kMinEnergyMev = 70.0;
inline constexpr double kMaxEnergyMev = 240.0;
inline constexpr double kInfluenceRelThreshold = 1e-4;

SpotGrid place_spots(const PhantomSpec& spec);
CsrMatrix build_influence(const PhantomSpec& spec, const SpotGrid& grid,
                          Exec e = default_exec());
PlanProblem generate_problem(const PhantomSpec& spec,
                             const ClinicalGoalTable& goals = ClinicalGoalTable::builtin());

// Uniform start: alpha * 1 with alpha the scalar least-squares fit of the
// target dose to the prescriptions, clamped into the MU box.
SpotVector default_start(const PlanProblem& p);

// Random spec families. sample_spec draws a broad mix; the training family
// places tight organ limits against the target so the optimum needs a
// genuine trade-off.
PhantomSpec sample_spec(std::uint64_t seed);
PhantomSpec sample_training_spec(std::uint64_t seed);

}  // namespace spotopt
