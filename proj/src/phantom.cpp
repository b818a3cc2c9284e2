#include "spotopt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace spotopt {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

struct BeamFrame {
  Vec3 d;  // beam travel direction
  Vec3 u;  // lateral axis in the gantry plane
  Vec3 v;  // lateral axis along the grid z axis
  double entry_offset;  // dot(p, d) at the upstream grid face
  double iso_depth;

  double depth(Vec3 p) const { return dot(p, d) - entry_offset; }
};

Vec3 grid_extent(const PhantomSpec& s) {
  return {s.grid_dims[0] * s.voxel_spacing_mm, s.grid_dims[1] * s.voxel_spacing_mm,
          s.grid_dims[2] * s.voxel_spacing_mm};
}

Vec3 isocenter(const PhantomSpec& s) { return 0.5 * grid_extent(s); }

BeamFrame beam_frame(const PhantomSpec& s, const BeamSpec& b) {
  const double t = b.gantry_deg * kPi / 180.0;
  BeamFrame f;
  f.d = {std::sin(t), -std::cos(t), 0.0};
  f.u = {std::cos(t), std::sin(t), 0.0};
  f.v = {0.0, 0.0, 1.0};
  const Vec3 e = grid_extent(s);
  double lo = std::numeric_limits<double>::infinity();
  for (int cx = 0; cx < 2; ++cx)
    for (int cy = 0; cy < 2; ++cy)
      for (int cz = 0; cz < 2; ++cz)
        lo = std::min(lo, dot({cx * e.x, cy * e.y, cz * e.z}, f.d));
  f.entry_offset = lo;
  f.iso_depth = f.depth(isocenter(s));
  return f;
}

Vec3 voxel_center(const PhantomSpec& s, std::int64_t ix, std::int64_t iy, std::int64_t iz) {
  const double sp = s.voxel_spacing_mm;
  return {(ix + 0.5) * sp, (iy + 0.5) * sp, (iz + 0.5) * sp};
}

bool inside_ellipsoid(Vec3 p, const std::array<double, 3>& c, const std::array<double, 3>& r,
                      double margin_mm) {
  const double dx = (p.x - c[0]) / (r[0] + margin_mm);
  const double dy = (p.y - c[1]) / (r[1] + margin_mm);
  const double dz = (p.z - c[2]) / (r[2] + margin_mm);
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

// Half-width of an ellipsoid's shadow along a unit direction.
double support(const std::array<double, 3>& r, Vec3 dir, double margin_mm) {
  const double a = (r[0] + margin_mm) * dir.x;
  const double b = (r[1] + margin_mm) * dir.y;
  const double c = (r[2] + margin_mm) * dir.z;
  return std::sqrt(a * a + b * b + c * c);
}

}  // namespace

double proton_range_mm(double energy_mev) {
  return 10.0 * 0.0022 * std::pow(energy_mev, 1.77);
}

double proton_energy_for_range_mm(double range_mm) {
  return std::pow(range_mm / (10.0 * 0.0022), 1.0 / 1.77);
}

double bragg_sigma_mm(double range_mm) {
  const double straggle_mm = 10.0 * 0.012 * std::pow(range_mm / 10.0, 0.935);
  const double spread_mm = 1.5;
  return std::hypot(straggle_mm, spread_mm);
}

double bragg_depth_dose(double z_mm, double range_mm, double sigma_mm) {
  if (z_mm < 0.0) return 0.0;
  const double zr = z_mm / range_mm;
  const double plateau = 0.35 * (1.0 + 0.6 * zr * zr) *
                         0.5 * std::erfc(-(range_mm - z_mm) / (sigma_mm * std::sqrt(2.0)));
  const double dz = z_mm - range_mm;
  const double peak = std::exp(-dz * dz / (2.0 * sigma_mm * sigma_mm));
  return plateau + peak;
}

void PhantomSpec::validate() const {
  if (grid_dims[0] < 4 || grid_dims[1] < 4 || grid_dims[2] < 4)
    throw std::invalid_argument("grid too small");
  if (!(voxel_spacing_mm > 0.0)) throw std::invalid_argument("voxel spacing must be > 0");
  if (targets.empty() || targets.size() > 4)
    throw std::invalid_argument("need 1 to 4 targets");
  if (beams.empty() || beams.size() > 5) throw std::invalid_argument("need 1 to 5 beams");
  if (fractions < 1) throw std::invalid_argument("fractions must be >= 1");
  const Vec3 e = grid_extent(*this);
  auto check_shape = [&](const std::string& name, const std::array<double, 3>& c,
                         const std::array<double, 3>& r) {
    for (int i = 0; i < 3; ++i)
      if (!(r[i] > 0.0)) throw std::invalid_argument(name + ": radii must be > 0");
    if (c[0] - r[0] < 0.0 || c[1] - r[1] < 0.0 || c[2] - r[2] < 0.0 ||
        c[0] + r[0] > e.x || c[1] + r[1] > e.y || c[2] + r[2] > e.z)
      throw std::invalid_argument(name + ": shape extends outside the grid");
  };
  for (const auto& t : targets) {
    if (t.name.empty()) throw std::invalid_argument("target with empty name");
    if (!(t.rx_gy > 0.0)) throw std::invalid_argument(t.name + ": prescription must be > 0");
    check_shape(t.name, t.center_mm, t.radii_mm);
  }
  for (const auto& o : oars) {
    if (o.name.empty()) throw std::invalid_argument("organ with empty name");
    check_shape(o.name, o.center_mm, o.radii_mm);
  }
  if (dose_scale != "auto" && dose_scale != "none")
    throw std::invalid_argument("dose_scale must be 'auto' or 'none'");
}

void save_phantom_spec(const PhantomSpec& s, const std::string& path) {
  s.validate();
  nlohmann::json j;
  j["grid_dims"] = s.grid_dims;
  j["voxel_spacing_mm"] = s.voxel_spacing_mm;
  j["fractions"] = s.fractions;
  j["seed"] = s.seed;
  j["dose_scale"] = s.dose_scale;
  j["targets"] = nlohmann::json::array();
  for (const auto& t : s.targets)
    j["targets"].push_back({{"name", t.name},
                            {"rx_gy", t.rx_gy},
                            {"weight", t.weight},
                            {"center_mm", t.center_mm},
                            {"radii_mm", t.radii_mm}});
  j["oars"] = nlohmann::json::array();
  for (const auto& o : s.oars)
    j["oars"].push_back({{"name", o.name},
                         {"goal", o.goal.empty() ? o.name : o.goal},
                         {"weight", o.weight},
                         {"limit_gy", o.limit_gy},
                         {"center_mm", o.center_mm},
                         {"radii_mm", o.radii_mm}});
  j["beams"] = nlohmann::json::array();
  for (const auto& b : s.beams) j["beams"].push_back({{"gantry_deg", b.gantry_deg}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write phantom spec: " + path);
  out << j.dump(2) << "\n";
}

PhantomSpec load_phantom_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open phantom spec: " + path);
  const auto j = nlohmann::json::parse(in);
  PhantomSpec s;
  if (j.contains("grid_dims")) {
    const auto d = j["grid_dims"].get<std::vector<std::int64_t>>();
    if (d.size() != 3) throw std::runtime_error("grid_dims must have 3 entries");
    s.grid_dims = {d[0], d[1], d[2]};
  }
  s.voxel_spacing_mm = j.value("voxel_spacing_mm", s.voxel_spacing_mm);
  s.fractions = j.value("fractions", s.fractions);
  s.seed = j.value("seed", s.seed);
  s.dose_scale = j.value("dose_scale", s.dose_scale);
  for (const auto& t : j.value("targets", nlohmann::json::array())) {
    TargetSpec ts;
    ts.name = t.at("name").get<std::string>();
    ts.rx_gy = t.at("rx_gy").get<double>();
    ts.weight = t.value("weight", 1.0);
    const auto c = t.at("center_mm").get<std::vector<double>>();
    const auto r = t.at("radii_mm").get<std::vector<double>>();
    if (c.size() != 3 || r.size() != 3) throw std::runtime_error("bad shape for " + ts.name);
    ts.center_mm = {c[0], c[1], c[2]};
    ts.radii_mm = {r[0], r[1], r[2]};
    s.targets.push_back(std::move(ts));
  }
  for (const auto& o : j.value("oars", nlohmann::json::array())) {
    OarSpec os;
    os.name = o.at("name").get<std::string>();
    os.goal = o.value("goal", os.name);
    os.weight = o.value("weight", 1.0);
    os.limit_gy = o.value("limit_gy", -1.0);
    const auto c = o.at("center_mm").get<std::vector<double>>();
    const auto r = o.at("radii_mm").get<std::vector<double>>();
    if (c.size() != 3 || r.size() != 3) throw std::runtime_error("bad shape for " + os.name);
    os.center_mm = {c[0], c[1], c[2]};
    os.radii_mm = {r[0], r[1], r[2]};
    s.oars.push_back(std::move(os));
  }
  for (const auto& b : j.value("beams", nlohmann::json::array()))
    s.beams.push_back({b.at("gantry_deg").get<double>()});
  s.validate();
  return s;
}

SpotGrid place_spots(const PhantomSpec& spec) {
  spec.validate();
  const Vec3 iso = isocenter(spec);
  SpotGrid grid;
  const double row_pitch = kSpotSpacingMm * std::sqrt(3.0) / 2.0;

  for (std::size_t bi = 0; bi < spec.beams.size(); ++bi) {
    const BeamFrame f = beam_frame(spec, spec.beams[bi]);

    // Depth interval of the target union along this beam.
    double d_lo = std::numeric_limits<double>::infinity();
    double d_hi = -d_lo;
    // Lateral bounding box of the expanded union in the beam frame.
    double a_lo = d_lo, a_hi = d_hi, b_lo = d_lo, b_hi = d_hi;
    for (const auto& t : spec.targets) {
      const Vec3 c{t.center_mm[0], t.center_mm[1], t.center_mm[2]};
      const double cd = f.depth(c);
      const double sd = support(t.radii_mm, f.d, 0.0);
      d_lo = std::min(d_lo, cd - sd);
      d_hi = std::max(d_hi, cd + sd);
      const double ca = dot(c - iso, f.u), cb = dot(c - iso, f.v);
      const double sa = support(t.radii_mm, f.u, kFieldExpansionMm);
      const double sb = support(t.radii_mm, f.v, kFieldExpansionMm);
      a_lo = std::min(a_lo, ca - sa);
      a_hi = std::max(a_hi, ca + sa);
      b_lo = std::min(b_lo, cb - sb);
      b_hi = std::max(b_hi, cb + sb);
    }

    const double max_range = proton_range_mm(kMaxEnergyMev);
    const double min_range = proton_range_mm(kMinEnergyMev);
    if (d_hi > max_range) {
      std::ostringstream msg;
      msg << "beam " << bi << " (gantry " << spec.beams[bi].gantry_deg
          << " deg): distal target edge at " << d_hi
          << " mm exceeds the range of the highest available energy";
      throw std::runtime_error(msg.str());
    }

    const int n_layers = static_cast<int>(std::ceil((d_hi - d_lo) / kLayerSpacingMm - 1e-9)) + 1;
    for (int li = 0; li < n_layers; ++li) {
      const double depth = d_lo + li * kLayerSpacingMm;
      if (depth > d_hi + kFieldExpansionMm + 1e-9) break;
      double shifter = 0.0;
      double energy;
      if (depth < min_range) {
        shifter = min_range - depth;
        energy = kMinEnergyMev;
      } else {
        energy = proton_energy_for_range_mm(depth);
      }

      const std::int64_t row0 = static_cast<std::int64_t>(std::floor(b_lo / row_pitch)) - 1;
      const std::int64_t row1 = static_cast<std::int64_t>(std::ceil(b_hi / row_pitch)) + 1;
      for (std::int64_t row = row0; row <= row1; ++row) {
        const double b = row * row_pitch;
        const double a_off = (row % 2 != 0) ? kSpotSpacingMm / 2.0 : 0.0;
        const std::int64_t col0 =
            static_cast<std::int64_t>(std::floor((a_lo - a_off) / kSpotSpacingMm)) - 1;
        const std::int64_t col1 =
            static_cast<std::int64_t>(std::ceil((a_hi - a_off) / kSpotSpacingMm)) + 1;
        for (std::int64_t col = col0; col <= col1; ++col) {
          const double a = col * kSpotSpacingMm + a_off;
          const Vec3 p = iso + a * f.u + b * f.v + (depth - f.iso_depth) * f.d;
          bool keep = false;
          for (const auto& t : spec.targets)
            if (inside_ellipsoid(p, t.center_mm, t.radii_mm, kFieldExpansionMm)) {
              keep = true;
              break;
            }
          if (!keep) continue;
          Spot s;
          s.beam = static_cast<std::int32_t>(bi);
          s.layer = li;
          s.row = row;
          s.col = col;
          s.a_mm = a;
          s.b_mm = b;
          s.depth_mm = depth;
          s.shifter_mm = shifter;
          s.energy_mev = energy;
          grid.spots.push_back(s);
        }
      }
    }
  }
  if (grid.spots.empty()) throw std::runtime_error("no spots placed; target too small?");
  return grid;
}

CsrMatrix build_influence(const PhantomSpec& spec, const SpotGrid& grid, Exec e) {
  const std::int64_t nx = spec.grid_dims[0], ny = spec.grid_dims[1], nz = spec.grid_dims[2];
  const std::int64_t n_voxels = nx * ny * nz;
  const std::int64_t n_spots = static_cast<std::int64_t>(grid.spots.size());

  // Per-beam voxel coordinates in the beam frame, computed once.
  std::vector<BeamFrame> frames;
  for (const auto& b : spec.beams) frames.push_back(beam_frame(spec, b));
  const std::size_t nb = frames.size();
  std::vector<std::vector<double>> vx_a(nb), vx_b(nb), vx_z(nb);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    vx_a[bi].resize(static_cast<std::size_t>(n_voxels));
    vx_b[bi].resize(static_cast<std::size_t>(n_voxels));
    vx_z[bi].resize(static_cast<std::size_t>(n_voxels));
  }
  const Vec3 iso = isocenter(spec);
  parallel_for(
      n_voxels,
      [&](std::int64_t id) {
        const std::int64_t ix = id % nx, iy = (id / nx) % ny, iz = id / (nx * ny);
        const Vec3 p = voxel_center(spec, ix, iy, iz);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          vx_a[bi][id] = dot(p - iso, frames[bi].u);
          vx_b[bi][id] = dot(p - iso, frames[bi].v);
          vx_z[bi][id] = frames[bi].depth(p);
        }
      },
      e);

  // Column entries per spot, computed independently so assembly order does
  // not depend on the thread count.
  struct Entry {
    std::int64_t voxel;
    double value;
  };
  std::vector<std::vector<Entry>> columns(static_cast<std::size_t>(n_spots));
  const double lat_cut = 4.5 * 6.0;  // beyond 4.5 sigma at the widest spot

  parallel_for(
      n_spots,
      [&](std::int64_t si) {
        const Spot& s = grid.spots[si];
        const double range = s.depth_mm + s.shifter_mm;  // peak position incl. shifter
        const double sigma = bragg_sigma_mm(range);
        const auto& za = vx_a[static_cast<std::size_t>(s.beam)];
        const auto& zb = vx_b[static_cast<std::size_t>(s.beam)];
        const auto& zz = vx_z[static_cast<std::size_t>(s.beam)];
        auto& col = columns[static_cast<std::size_t>(si)];
        double peak = 0.0;
        for (std::int64_t id = 0; id < n_voxels; ++id) {
          const double la = za[id] - s.a_mm;
          if (la > lat_cut || la < -lat_cut) continue;
          const double lb = zb[id] - s.b_mm;
          if (lb > lat_cut || lb < -lat_cut) continue;
          const double z = zz[id];
          if (z < 0.0) continue;
          const double zw = z + s.shifter_mm;  // water-equivalent incl. shifter
          if (zw > range + 6.0 * sigma) continue;
          const double frac = std::clamp(zw / range, 0.0, 1.0);
          const double sig_lat = 3.0 + 3.0 * frac;
          const double r2 = la * la + lb * lb;
          if (r2 > lat_cut * lat_cut) continue;
          const double d = bragg_depth_dose(zw, range, sigma) *
                           std::exp(-r2 / (2.0 * sig_lat * sig_lat));
          if (d <= 0.0) continue;
          col.push_back({id, d});
          peak = std::max(peak, d);
        }
        const double cut = kInfluenceRelThreshold * peak;
        std::size_t w = 0;
        for (const Entry& en : col)
          if (en.value >= cut) col[w++] = en;
        col.resize(w);
      },
      e);

  // Assemble the transposed matrix (spot rows), then flip to voxel rows.
  CsrMatrix mt;
  mt.rows = n_spots;
  mt.cols = n_voxels;
  mt.row_offsets.assign(static_cast<std::size_t>(n_spots) + 1, 0);
  std::uint64_t nnz = 0;
  for (std::int64_t si = 0; si < n_spots; ++si) {
    nnz += columns[static_cast<std::size_t>(si)].size();
    mt.row_offsets[si + 1] = nnz;
  }
  mt.col_idx.resize(nnz);
  mt.values.resize(nnz);
  parallel_for(
      n_spots,
      [&](std::int64_t si) {
        std::uint64_t w = mt.row_offsets[si];
        for (const Entry& en : columns[static_cast<std::size_t>(si)]) {
          mt.col_idx[w] = static_cast<std::uint32_t>(en.voxel);
          mt.values[w] = en.value;
          ++w;
        }
      },
      e);
  return transpose(mt);
}

SpotVector default_start(const PlanProblem& p) {
  const auto u = unit_mu_dose(p);
  double num = 0.0, den = 0.0;
  for (const auto& s : p.structures) {
    if (s.kind != StructureKind::target) continue;
    const auto it = p.prescriptions.find(s.name);
    if (it == p.prescriptions.end()) continue;
    for (auto v : s.voxel_ids) {
      num += u[v] * it->second;
      den += u[v] * u[v];
    }
  }
  double alpha = den > 0.0 ? num / den : 0.5 * (p.mu_lo() + p.mu_hi());
  alpha = std::clamp(alpha, p.mu_lo(), p.mu_hi());
  return SpotVector(static_cast<std::size_t>(p.n_spots()), alpha);
}

PlanProblem generate_problem(const PhantomSpec& spec, const ClinicalGoalTable& goals) {
  spec.validate();
  const SpotGrid grid = place_spots(spec);

  PlanProblem p;
  p.matrix = build_influence(spec, grid);
  p.fractions = spec.fractions;
  p.grid_dims = spec.grid_dims;
  p.voxel_spacing_mm = spec.voxel_spacing_mm;

  const std::int64_t nx = spec.grid_dims[0], ny = spec.grid_dims[1], nz = spec.grid_dims[2];
  auto collect = [&](const std::array<double, 3>& c, const std::array<double, 3>& r) {
    std::vector<std::int64_t> ids;
    for (std::int64_t iz = 0; iz < nz; ++iz)
      for (std::int64_t iy = 0; iy < ny; ++iy)
        for (std::int64_t ix = 0; ix < nx; ++ix) {
          const Vec3 pc = voxel_center(spec, ix, iy, iz);
          if (inside_ellipsoid(pc, c, r, 0.0)) ids.push_back((iz * ny + iy) * nx + ix);
        }
    return ids;
  };

  for (const auto& t : spec.targets) {
    Structure s;
    s.name = t.name;
    s.kind = StructureKind::target;
    s.voxel_ids = collect(t.center_mm, t.radii_mm);
    if (s.voxel_ids.empty())
      throw std::runtime_error(t.name + ": shape contains no voxel centers");
    p.structures.push_back(std::move(s));
    p.prescriptions[t.name] = t.rx_gy;
  }
  for (const auto& o : spec.oars) {
    Structure s;
    s.name = o.name;
    s.kind = StructureKind::oar;
    s.voxel_ids = collect(o.center_mm, o.radii_mm);
    if (s.voxel_ids.empty())
      throw std::runtime_error(o.name + ": shape contains no voxel centers");
    p.structures.push_back(std::move(s));
  }

  double rx_max = 0.0;
  for (const auto& t : spec.targets) rx_max = std::max(rx_max, t.rx_gy);
  for (std::size_t ti = 0; ti < spec.targets.size(); ++ti) {
    const auto& t = spec.targets[ti];
    const auto si = static_cast<std::int64_t>(ti);
    p.objectives.push_back({si, ObjectiveKind::d_min, t.weight, t.rx_gy});
    p.objectives.push_back({si, ObjectiveKind::d_max, t.weight, 1.05 * rx_max});
  }
  for (std::size_t oi = 0; oi < spec.oars.size(); ++oi) {
    const auto& o = spec.oars[oi];
    const std::string key = o.goal.empty() ? o.name : o.goal;
    const ClinicalGoal* g = goals.find(key);
    if (g == nullptr)
      throw std::runtime_error(o.name + ": no clinical goal entry for '" + key + "'");
    const double limit = o.limit_gy >= 0.0 ? o.limit_gy : g->d_clinic;
    const auto si = static_cast<std::int64_t>(spec.targets.size() + oi);
    p.objectives.push_back({si, g->kind, o.weight, limit});
  }

  if (spec.dose_scale == "auto") {
    // Rescale the kernel so the uniform least-squares start sits at the
    // geometric middle of the MU box, mimicking a clinical Gy/MU calibration.
    const SpotVector x0 = default_start(p);
    const double alpha = x0.empty() ? p.mu_lo() : x0.front();
    const double alpha_mid = std::sqrt(p.mu_lo() * p.mu_hi());
    const double scale = alpha / alpha_mid;
    if (scale > 0.0 && std::isfinite(scale))
      for (auto& v : p.matrix.values) v *= scale;
  }

  p.validate();
  return p;
}

namespace {

std::array<double, 3> sample_offset(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

PhantomSpec sample_spec(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PhantomSpec s;
  s.seed = seed;
  const std::int64_t dim = 36 + static_cast<std::int64_t>(rng() % 9);
  s.grid_dims = {dim, dim, dim};
  s.voxel_spacing_mm = 3.0;
  s.fractions = 1;
  const Vec3 iso = isocenter(s);

  const int n_targets = 1 + static_cast<int>(rng() % 2);
  double rx0 = 54.0 + 16.0 * u01(rng);
  for (int t = 0; t < n_targets; ++t) {
    TargetSpec ts;
    ts.name = n_targets == 1 ? "CTV" : "CTV" + std::to_string(t + 1);
    ts.rx_gy = t == 0 ? rx0 : rx0 * (0.8 + 0.15 * u01(rng));
    const auto off = sample_offset(rng, -9.0, 9.0);
    ts.center_mm = {iso.x + off[0], iso.y + off[1], iso.z + off[2]};
    std::uniform_real_distribution<double> ur(9.0, 15.0);
    ts.radii_mm = {ur(rng), ur(rng), ur(rng)};
    s.targets.push_back(std::move(ts));
  }

  const char* pool[] = {"SpinalCord", "BrainStem",  "Parotid",  "Esophagus",
                        "Larynx",     "Cavity_Oral", "Cochlea",  "OpticNerve"};
  const int n_oars = 2 + static_cast<int>(rng() % 3);
  for (int o = 0; o < n_oars; ++o) {
    OarSpec os;
    os.name = pool[(seed / 3 + o) % 8];
    os.goal = os.name;
    // keep names unique if the pool wraps
    bool dup = false;
    for (const auto& prev : s.oars) dup = dup || prev.name == os.name;
    if (dup) os.name += "_" + std::to_string(o);
    const auto& t = s.targets[rng() % s.targets.size()];
    // Place against the target surface in a random direction.
    const double az = 2.0 * kPi * u01(rng), el = kPi * (u01(rng) - 0.5);
    const Vec3 dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
    std::uniform_real_distribution<double> ur(5.0, 9.0);
    os.radii_mm = {ur(rng), ur(rng), ur(rng)};
    const double gap = (0.5 + 0.6 * u01(rng));
    const double dist = t.radii_mm[0] * 0.8 + os.radii_mm[0] * gap;
    Vec3 c = Vec3{t.center_mm[0], t.center_mm[1], t.center_mm[2]} + dist * dir;
    const Vec3 e = grid_extent(s);
    c.x = std::clamp(c.x, os.radii_mm[0] + 1.0, e.x - os.radii_mm[0] - 1.0);
    c.y = std::clamp(c.y, os.radii_mm[1] + 1.0, e.y - os.radii_mm[1] - 1.0);
    c.z = std::clamp(c.z, os.radii_mm[2] + 1.0, e.z - os.radii_mm[2] - 1.0);
    os.center_mm = {c.x, c.y, c.z};
    s.oars.push_back(std::move(os));
  }

  const int n_beams = 1 + static_cast<int>(rng() % 3);
  for (int b = 0; b < n_beams; ++b)
    s.beams.push_back({360.0 * u01(rng)});
  s.validate();
  return s;
}

PhantomSpec sample_training_spec(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PhantomSpec s;
  s.seed = seed;
  s.grid_dims = {36, 36, 36};
  s.voxel_spacing_mm = 3.0;
  s.fractions = 1;
  const Vec3 iso = isocenter(s);

  TargetSpec ts;
  ts.name = "CTV";
  ts.rx_gy = 54.0 + 16.0 * u01(rng);
  ts.weight = 4.0;
  const auto off = sample_offset(rng, -5.0, 5.0);
  ts.center_mm = {iso.x + off[0], iso.y + off[1], iso.z + off[2]};
  std::uniform_real_distribution<double> ur(10.0, 13.0);
  ts.radii_mm = {ur(rng), ur(rng), ur(rng)};
  s.targets.push_back(ts);

  // Organs pressed against the target with limits far below the
  // prescription, so coverage and sparing genuinely compete.
  const char* pool[] = {"SpinalCord", "BrainStem", "Parotid", "Larynx"};
  const int n_oars = 2 + static_cast<int>(rng() % 2);
  for (int o = 0; o < n_oars; ++o) {
    OarSpec os;
    os.name = pool[o];
    os.goal = os.name;
    os.weight = 1.0 + 3.0 * u01(rng);
    os.limit_gy = ts.rx_gy * (0.3 + 0.3 * u01(rng));
    const double az = 2.0 * kPi * (o + u01(rng) * 0.8) / n_oars;
    const double el = kPi * 0.35 * (u01(rng) - 0.5);
    const Vec3 dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
    std::uniform_real_distribution<double> orr(6.0, 9.0);
    os.radii_mm = {orr(rng), orr(rng), orr(rng)};
    const double dist = 0.75 * ts.radii_mm[0] + 0.7 * os.radii_mm[0];
    Vec3 c = Vec3{ts.center_mm[0], ts.center_mm[1], ts.center_mm[2]} + dist * dir;
    const Vec3 e = grid_extent(s);
    c.x = std::clamp(c.x, os.radii_mm[0] + 1.0, e.x - os.radii_mm[0] - 1.0);
    c.y = std::clamp(c.y, os.radii_mm[1] + 1.0, e.y - os.radii_mm[1] - 1.0);
    c.z = std::clamp(c.z, os.radii_mm[2] + 1.0, e.z - os.radii_mm[2] - 1.0);
    os.center_mm = {c.x, c.y, c.z};
    s.oars.push_back(std::move(os));
  }

  s.beams.push_back({360.0 * u01(rng)});
  s.beams.push_back({s.beams[0].gantry_deg + 90.0 + 90.0 * u01(rng)});
  s.validate();
  return s;
}

}  // namespace spotopt
