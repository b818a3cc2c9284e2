#include "spotopt/plan_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spotopt {

double structure_penalty(const std::vector<double>& dose, const DoseInterval& iv) {
  if (dose.empty()) throw std::invalid_argument("structure_penalty: empty dose vector");
  iv.validate();
  const double acc = block_sum(dose.size(), [&](std::size_t i) {
    const double lo = std::max(0.0, iv.lo - dose[i]);
    const double hi = std::max(0.0, dose[i] - iv.hi);
    return lo * lo + hi * hi;
  });
  return acc / static_cast<double>(dose.size());
}

DoseInterval target_interval(double rx, double rx_max) {
  return DoseInterval{rx, 1.05 * rx_max};
}

namespace {

// Interpolated value at fractional descending rank f without a full sort:
// selects the two neighboring order statistics around the rank. f is
// clamped to [0, n-1].
double hottest_rank(const std::vector<double>& dose, double f) {
  const std::size_t n = dose.size();
  if (f <= 0.0) return *std::max_element(dose.begin(), dose.end());
  if (f >= static_cast<double>(n - 1)) return *std::min_element(dose.begin(), dose.end());
  const std::size_t i = static_cast<std::size_t>(f);
  const double frac = f - static_cast<double>(i);
  std::vector<double> tmp(dose);
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(i), tmp.end(),
                   std::greater<double>());
  const double a = tmp[i];
  const double b = *std::max_element(tmp.begin() + static_cast<std::ptrdiff_t>(i) + 1, tmp.end());
  return a + frac * (b - a);
}

}  // namespace

double dvh_d_percent(const std::vector<double>& dose, double p) {
  if (dose.empty()) throw std::invalid_argument("dvh_d_percent: empty dose vector");
  if (!(p > 0.0) || p > 100.0)
    throw std::invalid_argument("dvh_d_percent: p must lie in (0, 100]");
  const double f = p / 100.0 * static_cast<double>(dose.size()) - 1.0;
  return hottest_rank(dose, f);
}

double dvh_v_at(const std::vector<double>& dose, double d_gy) {
  if (dose.empty()) throw std::invalid_argument("dvh_v_at: empty dose vector");
  std::size_t count = 0;
  for (double v : dose) count += v >= d_gy ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(dose.size());
}

double dvh_mean(const std::vector<double>& dose) {
  if (dose.empty()) throw std::invalid_argument("dvh_mean: empty dose vector");
  return block_sum(dose.size(), [&](std::size_t i) { return dose[i]; }) /
         static_cast<double>(dose.size());
}

double dvh_d_cc(const std::vector<double>& dose, double cc, double voxel_cc) {
  if (dose.empty()) throw std::invalid_argument("dvh_d_cc: empty dose vector");
  if (!(cc > 0.0) || !(voxel_cc > 0.0))
    throw std::invalid_argument("dvh_d_cc: volumes must be positive");
  const double f = cc / voxel_cc - 1.0;
  return hottest_rank(dose, f);
}

PlanReport plan_score(const PlanProblem& p, const SpotVector& x, const ClinicalGoalTable& goals,
                      const DoseInterval& fallback, Exec e) {
  fallback.validate();
  const std::vector<double> full = dose(p, x, e);
  const double rx_max = p.rx_max();
  const double voxel_cc = p.voxel_spacing_mm > 0.0
                              ? std::pow(p.voxel_spacing_mm / 10.0, 3.0)
                              : 0.0;

  PlanReport report;
  for (const auto& s : p.structures) {
    if (s.kind == StructureKind::auxiliary) continue;
    if (s.voxel_ids.empty()) continue;
    std::vector<double> d(s.voxel_ids.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      d[i] = full[static_cast<std::size_t>(s.voxel_ids[i])];

    StructureScore sc;
    sc.name = s.name;
    sc.kind = s.kind;
    if (s.kind == StructureKind::target) {
      const auto it = p.prescriptions.find(s.name);
      const double rx = it != p.prescriptions.end() ? it->second : rx_max;
      sc.interval = target_interval(rx, rx_max);
      sc.d99 = dvh_d_percent(d, 99.0);
      sc.v99 = dvh_v_at(d, 0.99 * rx);
    } else {
      const ClinicalGoal* g = goals.find(s.name);
      if (g) {
        sc.interval = g->interval;
      } else {
        sc.interval = fallback;
        sc.unknown_goal = true;
      }
    }
    sc.penalty = structure_penalty(d, sc.interval);
    sc.score = -sc.penalty;
    sc.d_mean = dvh_mean(d);
    sc.d_min = *std::min_element(d.begin(), d.end());
    sc.d_max = *std::max_element(d.begin(), d.end());
    if (voxel_cc > 0.0) sc.d003cc = dvh_d_cc(d, 0.03, voxel_cc);
    report.structures.push_back(std::move(sc));
  }
  double total = 0.0;
  for (const auto& sc : report.structures) total += sc.score;
  report.total_score = total;
  return report;
}

std::string report_to_csv(const PlanReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "structure,kind,interval_lo,interval_hi,penalty,score,d_mean,d_min,d_max,"
         "d99,v99,d003cc,unknown_goal\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v)
      out << *v;
    out << ',';
  };
  for (const auto& s : r.structures) {
    out << s.name << ',' << (s.kind == StructureKind::target ? "target" : "oar") << ','
        << s.interval.lo << ',' << s.interval.hi << ',' << s.penalty << ',' << s.score << ','
        << s.d_mean << ',' << s.d_min << ',' << s.d_max << ',';
    opt(s.d99);
    opt(s.v99);
    opt(s.d003cc);
    out << (s.unknown_goal ? 1 : 0) << '\n';
  }
  out << "total,,,,," << r.total_score << ",,,,,,,\n";
  return out.str();
}

std::string report_to_text(const PlanReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  out << "Plan score " << r.total_score << "\n";
  for (const auto& s : r.structures) {
    out << "  " << s.name << " [" << s.interval.lo << ", " << s.interval.hi << "] Gy"
        << "  score " << s.score << "  mean " << s.d_mean << "  max " << s.d_max;
    if (s.d99) out << "  D99% " << *s.d99;
    if (s.v99) out << "  V99% " << 100.0 * *s.v99 << "%";
    if (s.d003cc) out << "  D0.03cc " << *s.d003cc;
    if (s.unknown_goal) out << "  (no goal entry, fallback interval)";
    out << "\n";
  }
  return out.str();
}

void save_report(const PlanReport& r, const std::string& csv_path,
                 const std::string& text_path) {
  if (!csv_path.empty()) {
    std::ofstream f(csv_path);
    if (!f) throw std::runtime_error("save_report: cannot open " + csv_path);
    f << report_to_csv(r);
  }
  if (!text_path.empty()) {
    std::ofstream f(text_path);
    if (!f) throw std::runtime_error("save_report: cannot open " + text_path);
    f << report_to_text(r);
  }
}

}  // namespace spotopt
