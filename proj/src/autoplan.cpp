#include "spotopt/autoplan.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "spotopt/phantom.hpp"

namespace spotopt {

namespace {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Prescription used for a target structure; targets without their own entry
// inherit the plan's maximum prescription.
double target_rx(const PlanProblem& p, const std::string& name) {
  const auto it = p.prescriptions.find(name);
  return it != p.prescriptions.end() ? it->second : p.rx_max();
}

}  // namespace

AdjustmentAction AdjustmentAction::identity(std::size_t n) {
  AdjustmentAction a;
  a.weight_factor.assign(n, 1.0);
  a.limit_factor.assign(n, 1.0);
  return a;
}

bool AdjustmentAction::is_identity() const {
  for (double f : weight_factor)
    if (f != 1.0) return false;
  for (double f : limit_factor)
    if (f != 1.0) return false;
  return true;
}

void AdjustmentAction::validate() const {
  if (weight_factor.size() != limit_factor.size())
    throw std::invalid_argument("adjustment action: mismatched factor lengths");
  for (const auto* v : {&weight_factor, &limit_factor})
    for (double f : *v)
      if (!std::isfinite(f) || f < kFactorLo || f > kFactorHi)
        throw std::invalid_argument("adjustment factor outside [0.5, 2.0]");
}

std::vector<ObjectiveComponent> init_objectives(const PlanProblem& p,
                                                const std::map<std::string, double>& d_predict,
                                                const ClinicalGoalTable& goals) {
  for (const auto& [name, d] : d_predict)
    if (!(d >= 0.0) || !std::isfinite(d))
      throw std::invalid_argument("negative predicted dose for " + name);

  const double rx_max = p.rx_max();
  std::vector<ObjectiveComponent> out;
  for (std::size_t si = 0; si < p.structures.size(); ++si) {
    const auto& s = p.structures[si];
    const auto idx = static_cast<std::int64_t>(si);
    if (s.kind == StructureKind::target) {
      const double rx = target_rx(p, s.name);
      if (!(rx > 0.0)) throw std::invalid_argument(s.name + ": target without a prescription");
      out.push_back({idx, ObjectiveKind::d_min, 1.0, rx});
      out.push_back({idx, ObjectiveKind::d_max, 1.0, 1.05 * rx_max});
    } else if (s.kind == StructureKind::oar) {
      const ClinicalGoal* g = goals.find(s.name);
      if (g == nullptr)
        throw std::invalid_argument(s.name + ": no clinical goal entry");
      double limit = g->d_clinic;
      const auto it = d_predict.find(s.name);
      if (it != d_predict.end()) limit = std::min(it->second, g->d_clinic);
      out.push_back({idx, g->kind, 1.0, limit});
    }
  }
  if (out.empty()) throw std::invalid_argument("problem has no scoreable structures");
  return out;
}

AdjustmentAction rule_based_adjust(const PlanProblem& p,
                                   const std::vector<ObjectiveComponent>& params,
                                   const PlanReport& report) {
  std::unordered_map<std::string, const StructureScore*> rows;
  for (const auto& s : report.structures) rows[s.name] = &s;

  auto a = AdjustmentAction::identity(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& o = params[k];
    const auto& s = p.structures[static_cast<std::size_t>(o.structure_index)];
    const auto it = rows.find(s.name);
    if (it == rows.end()) continue;
    const StructureScore& row = *it->second;
    if (!(row.penalty > 0.0)) continue;

    const auto raise_weight = [&] {
      // At or past the cap the factor is exactly one, so repeated
      // application reaches a true fixed point instead of dithering by ulps.
      if (o.weight >= kRuleWeightCap) return;
      a.weight_factor[k] =
          std::clamp(std::min(1.5, kRuleWeightCap / o.weight), kFactorLo, kFactorHi);
    };
    if (s.kind == StructureKind::oar) {
      raise_weight();
      if (o.dose_limit > kRuleLimitFloorGy) a.limit_factor[k] = 0.9;
      continue;
    }
    // Target: move only the objective on the violated side. The lower
    // limit climbs toward the scored ceiling but never tightens downward.
    const bool underdosed = row.d_min < row.interval.lo;
    const bool overdosed = row.d_max > row.interval.hi;
    if (o.kind == ObjectiveKind::d_min && underdosed) {
      raise_weight();
      if (o.dose_limit > 0.0)
        a.limit_factor[k] =
            std::clamp(std::min(1.1, row.interval.hi / o.dose_limit), kFactorLo, kFactorHi);
    } else if (o.kind == ObjectiveKind::d_max && overdosed) {
      raise_weight();
    }
  }
  a.validate();
  return a;
}

std::vector<ObjectiveComponent> apply_action(const PlanProblem& p,
                                             const std::vector<ObjectiveComponent>& params,
                                             const AdjustmentAction& a) {
  a.validate();
  if (a.weight_factor.size() != params.size())
    throw std::invalid_argument("adjustment action does not cover the objective list");
  auto out = params;
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].weight *= a.weight_factor[k];
    out[k].dose_limit *= a.limit_factor[k];
    const auto& s = p.structures[static_cast<std::size_t>(out[k].structure_index)];
    if (s.kind == StructureKind::target && out[k].kind == ObjectiveKind::d_min)
      out[k].dose_limit = std::max(out[k].dose_limit, target_rx(p, s.name));
  }
  return out;
}

AdjustPolicy identity_policy() {
  return [](const PlanProblem&, const std::vector<ObjectiveComponent>& params,
            const PlanReport&) { return AdjustmentAction::identity(params.size()); };
}

AdjustPolicy rule_policy() {
  return [](const PlanProblem& p, const std::vector<ObjectiveComponent>& params,
            const PlanReport& r) { return rule_based_adjust(p, params, r); };
}

void EpisodeConfig::validate() const {
  if (adjustments < 0) throw std::invalid_argument("episode: adjustments must be >= 0");
  if (max_iters < 1) throw std::invalid_argument("episode: max_iters must be >= 1");
  if (optimizer == InnerOptimizer::l2o && net == nullptr)
    throw std::invalid_argument("episode: learned inner loop needs a network");
  if (!(coverage_guard >= 0.0)) throw std::invalid_argument("episode: bad coverage guard");
}

EpisodeRecord run_episode(const PlanProblem& p, const AdjustPolicy& policy,
                          const ClinicalGoalTable& goals, const EpisodeConfig& cfg, Exec e) {
  cfg.validate();
  if (p.objectives.empty())
    throw std::invalid_argument("run_episode: problem has no initialized objectives");

  PlanProblem work = p;
  std::vector<ObjectiveComponent> params = p.objectives;
  SpotVector x = default_start(work);
  EpisodeRecord rec;
  std::vector<SpotVector> iterates;

  for (std::int64_t r = 0; r <= cfg.adjustments; ++r) {
    work.objectives = params;
    ObjectiveEvaluator ev(work);
    RoundRecord rr;
    rr.objectives = params;
    const SpotVector x_prev = x;

    RunTrace tr;
    if (cfg.optimizer == InnerOptimizer::lbfgsb) {
      LbfgsbOptions o;
      o.max_iters = cfg.max_iters;
      tr = lbfgsb_minimize_problem(ev, work, x, o);
    } else {
      L2ORunOptions o;
      o.max_iters = cfg.max_iters;
      o.mode = cfg.mode;
      tr = l2o_minimize(ev, work, *cfg.net, x, o, e);
    }
    rr.status = tr.status;
    rr.final_loss = tr.final_loss();
    rr.iterations = tr.points.back().iter;
    rr.seconds = tr.points.back().seconds;
    if (tr.status == RunStatus::non_finite || !all_finite(x)) {
      rr.failed = true;
      x = x_prev;
    }

    rr.report = plan_score(work, x, goals, DoseInterval{0.0, 50.0}, e);
    rr.reward =
        r == 0 ? 0.0 : rr.report.total_score - rec.rounds.back().report.total_score;
    rec.rounds.push_back(std::move(rr));
    iterates.push_back(x);

    if (r < cfg.adjustments) {
      AdjustmentAction a = policy(work, params, rec.rounds.back().report);
      a.validate();
      params = apply_action(work, params, a);
    }
  }

  // Coverage of a round: the worst target V99 across its report.
  const auto coverage = [](const RoundRecord& rr) {
    double c = 1.0;
    for (const auto& s : rr.report.structures)
      if (s.v99) c = std::min(c, *s.v99);
    return c;
  };
  double best_cov = 0.0;
  for (const auto& rr : rec.rounds) best_cov = std::max(best_cov, coverage(rr));
  std::size_t best = 0;
  bool have = false;
  for (std::size_t r = 0; r < rec.rounds.size(); ++r) {
    if (coverage(rec.rounds[r]) < best_cov - cfg.coverage_guard) continue;
    if (!have || rec.rounds[r].report.total_score > rec.rounds[best].report.total_score) {
      best = r;
      have = true;
    }
  }
  rec.best_round = best;
  rec.best_x = iterates[best];
  rec.final_x = iterates.back();
  return rec;
}

// ---- Optimizer comparison harness ------------------------------------

double effectiveness(double loss_ref, double loss_l2o) {
  return (loss_ref - loss_l2o) / loss_ref;
}

double efficiency(double t_ref, double t_l2o) { return (t_ref - t_l2o) / t_ref; }

namespace {

void run_reference(const ObjectiveEvaluator& ev, const PlanProblem& p, const BenchOptions& opt,
                   BenchResult& r) {
  SpotVector x = default_start(p);
  LbfgsbOptions o;
  o.max_iters = opt.ref_iters;
  o.pg_tol = 0.0;  // consume the full iteration budget
  r.ref = lbfgsb_minimize_problem(ev, p, x, o);
  r.ref_iterations = r.ref.points.back().iter;
  r.t_ref = r.ref.points.back().seconds;
  r.loss_ref = r.ref.best_loss();
}

}  // namespace

BenchResult bench_effectiveness(const PlanProblem& p, const L2OParams<float>& net,
                                const std::string& name, const BenchOptions& opt, Exec e) {
  ObjectiveEvaluator ev(p);
  BenchResult r;
  r.name = name;
  run_reference(ev, p, opt, r);

  SpotVector x = default_start(p);
  L2ORunOptions o;
  o.max_iters = 1000000000;
  o.max_seconds = r.t_ref;
  o.mode = opt.mode;
  r.l2o = l2o_minimize(ev, p, net, x, o, e);
  r.l2o_iterations = r.l2o.points.back().iter;
  r.t_l2o = r.l2o.points.back().seconds;
  r.loss_l2o = r.l2o.best_loss();
  r.metric = effectiveness(r.loss_ref, r.loss_l2o);
  return r;
}

BenchResult bench_efficiency(const PlanProblem& p, const L2OParams<float>& net,
                             const std::string& name, const BenchOptions& opt, Exec e) {
  ObjectiveEvaluator ev(p);
  BenchResult r;
  r.name = name;
  run_reference(ev, p, opt, r);

  SpotVector x = default_start(p);
  L2ORunOptions o;
  o.max_iters = 1000000000;
  o.max_seconds = opt.time_cap_factor * r.t_ref;
  o.target_loss = r.loss_ref;
  o.mode = opt.mode;
  r.l2o = l2o_minimize(ev, p, net, x, o, e);
  r.l2o_iterations = r.l2o.points.back().iter;
  r.loss_l2o = r.l2o.best_loss();
  const double tl = r.l2o.time_to_loss(r.loss_ref);
  r.reached = tl >= 0.0;
  r.t_l2o = r.reached ? tl : r.l2o.points.back().seconds;
  r.metric = r.reached ? efficiency(r.t_ref, r.t_l2o)
                       : std::numeric_limits<double>::quiet_NaN();
  return r;
}

double effectiveness_from_traces(const RunTrace& ref, const RunTrace& l2o) {
  return effectiveness(ref.best_loss(), l2o.best_loss());
}

double efficiency_from_traces(const RunTrace& ref, const RunTrace& l2o) {
  const double t_ref = ref.points.back().seconds;
  const double tl = l2o.time_to_loss(ref.best_loss());
  return tl >= 0.0 ? efficiency(t_ref, tl) : std::numeric_limits<double>::quiet_NaN();
}

std::string bench_to_csv(const std::vector<BenchResult>& rows, bool efficiency_metric) {
  std::ostringstream out;
  out << "case,iterations,seconds,loss_min,"
      << (efficiency_metric ? "efficiency" : "effectiveness") << "\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.l2o_iterations << ',';
    out << std::setprecision(17) << r.t_l2o << ',' << r.loss_l2o << ',';
    if (efficiency_metric && !r.reached) {
      out << "failed\n";
      continue;
    }
    out << std::fixed << std::setprecision(2) << 100.0 * r.metric << "%\n";
    out.unsetf(std::ios::fixed);
  }
  return out.str();
}

}  // namespace spotopt
