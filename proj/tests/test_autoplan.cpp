#include "spotopt/autoplan.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "spotopt/phantom.hpp"
#include "spotopt/ppo.hpp"
#include "test_support.hpp"

using namespace spotopt;

namespace {

// Two disjoint structures fed by disjoint spots: spot 0 -> target voxels at
// 3 Gy/MU, spot 1 -> cord voxels at 0.8 Gy/MU. The natural solutions sit
// well inside the deliverable MU box.
PlanProblem split_problem() {
  PlanProblem p;
  CooBuilder coo(4, 2);
  coo.add(0, 0, 3.0);
  coo.add(1, 0, 3.0);
  coo.add(2, 1, 0.8);
  coo.add(3, 1, 0.8);
  p.matrix = coo.build();
  Structure t;
  t.name = "CTV";
  t.kind = StructureKind::target;
  t.voxel_ids = {0, 1};
  Structure o;
  o.name = "SpinalCord";
  o.kind = StructureKind::oar;
  o.voxel_ids = {2, 3};
  p.structures = {t, o};
  p.prescriptions["CTV"] = 60.0;
  p.objectives = {{0, ObjectiveKind::d_min, 1.0, 60.0},
                  {0, ObjectiveKind::d_max, 1.0, 63.0},
                  {1, ObjectiveKind::d_max, 1.0, 45.0}};
  p.validate();
  return p;
}

PlanReport score_at(const PlanProblem& p, const SpotVector& x) {
  return plan_score(p, x, ClinicalGoalTable::builtin());
}

// random_problem scales its limits off the dose at one MU, which sits below
// the deliverable MU box; rescaling the limits moves the interesting region
// inside it so box-constrained runs make real progress.
PlanProblem boxed_random_problem(std::mt19937_64& rng, std::int64_t n_voxels,
                                 std::int64_t n_spots, double density,
                                 std::int64_t k_components) {
  auto p = testsup::random_problem(rng, n_voxels, n_spots, density, k_components);
  for (auto& o : p.objectives) o.dose_limit *= 60.0;
  for (auto& [name, rx] : p.prescriptions) rx *= 60.0;
  return p;
}

}  // namespace

TEST_CASE("objective initialization from goals and predictions") {
  auto p = split_problem();
  const auto goals = ClinicalGoalTable::builtin();

  std::map<std::string, double> pred{{"SpinalCord", 25.0}};
  auto obj = init_objectives(p, pred, goals);
  REQUIRE(obj.size() == 3);  // target pair + one organ
  CHECK(obj[0].kind == ObjectiveKind::d_min);
  CHECK(obj[0].dose_limit == 60.0);
  CHECK(obj[1].kind == ObjectiveKind::d_max);
  CHECK(obj[1].dose_limit == doctest::Approx(63.0));
  CHECK(obj[2].kind == ObjectiveKind::d_max);  // cord tolerance kind
  CHECK(obj[2].dose_limit == 25.0);            // prediction below the clinical limit
  for (const auto& o : obj) CHECK(o.weight == 1.0);

  // Prediction above the clinical limit is capped by it.
  auto q = p;
  q.structures[1].name = "Parotid";
  auto obj2 = init_objectives(q, {{"Parotid", 60.0}}, goals);
  CHECK(obj2[2].kind == ObjectiveKind::d_mean);
  CHECK(obj2[2].dose_limit == 30.0);

  // Equal values agree, a missing prediction uses the clinical limit.
  CHECK(init_objectives(p, {{"SpinalCord", 45.0}}, goals)[2].dose_limit == 45.0);
  CHECK(init_objectives(p, {}, goals)[2].dose_limit == 45.0);

  CHECK_THROWS(init_objectives(p, {{"SpinalCord", -1.0}}, goals));
  auto r = p;
  r.structures[1].name = "NotAnOrgan";
  CHECK_THROWS(init_objectives(r, {}, goals));
}

TEST_CASE("initialized organ limits never exceed the clinical limit") {
  std::mt19937_64 rng(7);
  const auto goals = ClinicalGoalTable::builtin();
  std::uniform_real_distribution<double> upred(0.0, 90.0);
  for (int rep = 0; rep < 30; ++rep) {
    auto p = split_problem();
    std::map<std::string, double> pred;
    if (rep % 3 != 0) pred["SpinalCord"] = upred(rng);
    const auto obj = init_objectives(p, pred, goals);
    const ClinicalGoal* g = goals.find("SpinalCord");
    CHECK(obj[2].dose_limit <= g->d_clinic);
    if (!pred.empty()) CHECK(obj[2].dose_limit <= pred["SpinalCord"] + 1e-15);
  }
}

TEST_CASE("adjustment action bounds") {
  auto a = AdjustmentAction::identity(3);
  CHECK(a.is_identity());
  a.validate();
  a.weight_factor[1] = 2.00001;
  CHECK_THROWS(a.validate());
  a.weight_factor[1] = 0.4999;
  CHECK_THROWS(a.validate());
  a.weight_factor[1] = 1.5;
  a.validate();
  CHECK(!a.is_identity());

  auto p = split_problem();
  AdjustmentAction bad = AdjustmentAction::identity(2);  // wrong length
  CHECK_THROWS(apply_action(p, p.objectives, bad));
}

TEST_CASE("rule adjustment is identity on a satisfied plan and local on one violation") {
  auto p = split_problem();
  // x = {20, 10}: target uniform 60 (inside [60, 63]), cord 8 (inside [0, 10]).
  const auto clean = score_at(p, {20.0, 10.0});
  CHECK(rule_based_adjust(p, p.objectives, clean).is_identity());

  // x = {20, 30}: cord at 24 violates its [0, 10] interval, target untouched.
  const auto hot = score_at(p, {20.0, 30.0});
  const auto a = rule_based_adjust(p, p.objectives, hot);
  CHECK(a.weight_factor[0] == 1.0);
  CHECK(a.limit_factor[0] == 1.0);
  CHECK(a.weight_factor[1] == 1.0);
  CHECK(a.limit_factor[1] == 1.0);
  CHECK(a.weight_factor[2] == 1.5);
  CHECK(a.limit_factor[2] == 0.9);
}

TEST_CASE("rule adjustment raises an underdosed target") {
  auto p = split_problem();
  // x = {15, 10}: target at 45 Gy, well under the 60 Gy prescription.
  const auto rep = score_at(p, {15.0, 10.0});
  const auto a = rule_based_adjust(p, p.objectives, rep);
  CHECK(a.weight_factor[0] == 1.5);  // lower-dose objective pushes harder
  CHECK(a.limit_factor[0] == doctest::Approx(1.05));  // capped by the 63 Gy ceiling
  CHECK(a.weight_factor[1] == 1.0);  // upper edge not violated
  CHECK(a.limit_factor[1] == 1.0);

  // The applied limit never drops below the prescription, whatever the
  // factors say.
  AdjustmentAction down = AdjustmentAction::identity(3);
  down.limit_factor[0] = 0.5;
  const auto adjusted = apply_action(p, p.objectives, down);
  CHECK(adjusted[0].dose_limit == 60.0);
}

TEST_CASE("repeated rule application converges to the caps") {
  auto p = split_problem();
  const auto hot = score_at(p, {20.0, 30.0});  // cord violated, report held fixed
  auto params = p.objectives;
  for (int i = 0; i < 200; ++i) params = apply_action(p, params, rule_based_adjust(p, params, hot));
  CHECK(params[2].weight == doctest::Approx(kRuleWeightCap).epsilon(1e-12));
  CHECK(params[2].dose_limit <= kRuleLimitFloorGy);
  CHECK(params[2].dose_limit > 0.0);
  // One more application is the identity.
  CHECK(rule_based_adjust(p, params, hot).is_identity());
}

TEST_CASE("episode structure and telescoping rewards") {
  auto p = split_problem();
  EpisodeConfig cfg;
  cfg.max_iters = 40;

  SUBCASE("no adjustments means one round") {
    cfg.adjustments = 0;
    const auto rec = run_episode(p, rule_policy(), ClinicalGoalTable::builtin(), cfg);
    CHECK(rec.rounds.size() == 1);
    CHECK(rec.best_round == 0);
    CHECK(rec.rounds[0].reward == 0.0);
  }

  SUBCASE("rounds count and reward telescoping") {
    cfg.adjustments = 4;
    const auto rec = run_episode(p, rule_policy(), ClinicalGoalTable::builtin(), cfg);
    REQUIRE(rec.rounds.size() == 5);
    double sum = 0.0;
    for (const auto& r : rec.rounds) sum += r.reward;
    const double delta =
        rec.rounds.back().report.total_score - rec.rounds.front().report.total_score;
    CHECK(sum == doctest::Approx(delta).epsilon(1e-12));
    CHECK(rec.best_round < rec.rounds.size());
    CHECK(rec.best_x.size() == 2);
  }

  SUBCASE("identity policy is a parameter fixed point") {
    cfg.adjustments = 3;
    const auto rec = run_episode(p, identity_policy(), ClinicalGoalTable::builtin(), cfg);
    for (const auto& r : rec.rounds) {
      REQUIRE(r.objectives.size() == rec.rounds[0].objectives.size());
      for (std::size_t k = 0; k < r.objectives.size(); ++k) {
        CHECK(r.objectives[k].weight == rec.rounds[0].objectives[k].weight);
        CHECK(r.objectives[k].dose_limit == rec.rounds[0].objectives[k].dose_limit);
      }
    }
    // Warm-started continuation never climbs (monotone inner optimizer).
    for (std::size_t r = 1; r < rec.rounds.size(); ++r)
      CHECK(rec.rounds[r].final_loss <= rec.rounds[r - 1].final_loss + 1e-12);
    // Once converged the iterate stops moving, so the score delta is zero.
    CHECK(rec.rounds.back().reward == 0.0);
  }
}

TEST_CASE("failed inner rounds keep the previous iterate") {
  auto p = split_problem();
  // A learned inner loop with a wrecked head blows up immediately.
  L2OConfig nc;
  nc.k_slots = 6;
  nc.hidden = 16;
  nc.layers = 1;
  nc.q_heads = 2;
  nc.kv_heads = 1;
  nc.head_dim = 8;
  nc.intermediate = 16;
  L2OParams<float> net;
  net.init(nc, 5);
  for (auto& v : net.w_head) v = std::numeric_limits<float>::quiet_NaN();

  EpisodeConfig cfg;
  cfg.optimizer = InnerOptimizer::l2o;
  cfg.net = &net;
  cfg.max_iters = 5;
  cfg.adjustments = 2;
  const auto rec = run_episode(p, identity_policy(), ClinicalGoalTable::builtin(), cfg);
  REQUIRE(rec.rounds.size() == 3);
  const auto start = default_start(p);
  for (const auto& r : rec.rounds) {
    CHECK(r.failed);
    CHECK(r.reward == 0.0);
    // Every round reverted, so every report equals the start's score.
    CHECK(r.report.total_score == rec.rounds[0].report.total_score);
  }
  CHECK(rec.final_x == start);
}

TEST_CASE("rule episodes on phantoms never lose to round zero") {
  const auto goals = ClinicalGoalTable::builtin();
  for (std::uint64_t seed : {11u, 23u, 37u}) {
    auto p = generate_problem(sample_training_spec(seed), goals);
    EpisodeConfig cfg;
    cfg.max_iters = 60;
    cfg.adjustments = 4;
    const auto rec = run_episode(p, rule_policy(), goals, cfg);
    REQUIRE(rec.rounds.size() == 5);
    CHECK(rec.best_score() >= rec.rounds[0].report.total_score);
    double sum = 0.0;
    for (const auto& r : rec.rounds) sum += r.reward;
    CHECK(std::abs(sum - (rec.rounds.back().report.total_score -
                          rec.rounds[0].report.total_score)) < 1e-9);
  }
}

TEST_CASE("comparison metrics reproduce the published arithmetic") {
  // Two-decimal percentages from the recorded fixture summaries.
  auto pct = [](double f) { return std::round(10000.0 * f) / 100.0; };
  CHECK(pct(effectiveness(22.58, 16.35)) == 27.59);
  CHECK(pct(efficiency(4719.17, 1576.58)) == 66.59);
  CHECK(effectiveness(22.58, 22.58) == 0.0);
  CHECK(efficiency(100.0, 100.0) == 0.0);
  // Losses and times can come out worse; the metric stays unclamped.
  CHECK(pct(effectiveness(100.0, 100.76)) == -0.76);
  CHECK(pct(efficiency(100.0, 116.25)) == -16.25);
}

TEST_CASE("benchmark runs are pure functions of their traces") {
  std::mt19937_64 rng(71);
  auto p = boxed_random_problem(rng, 60, 16, 0.4, 4);

  L2OConfig nc;
  nc.k_slots = 6;
  nc.hidden = 16;
  nc.layers = 1;
  nc.q_heads = 2;
  nc.kv_heads = 1;
  nc.head_dim = 8;
  nc.intermediate = 16;
  L2OParams<float> net;
  net.init(nc, 9);
  std::normal_distribution<float> nh(0.0f, 0.02f);
  std::mt19937_64 hrng(3);
  for (auto& v : net.w_head) v = nh(hrng);

  BenchOptions opt;
  opt.ref_iters = 25;
  const auto eff = bench_effectiveness(p, net, "case0", opt);
  CHECK(eff.t_ref > 0.0);
  CHECK(eff.loss_ref > 0.0);
  CHECK(std::isfinite(eff.loss_l2o));
  CHECK(eff.metric == effectiveness(eff.loss_ref, eff.loss_l2o));
  CHECK(eff.metric == effectiveness_from_traces(eff.ref, eff.l2o));

  // Round-tripping the traces through CSV reproduces the number exactly.
  save_trace_csv(eff.ref, "bench_ref.csv");
  save_trace_csv(eff.l2o, "bench_l2o.csv");
  const auto ref2 = load_trace_csv("bench_ref.csv");
  const auto l2o2 = load_trace_csv("bench_l2o.csv");
  CHECK(effectiveness_from_traces(ref2, l2o2) == eff.metric);

  // A step proposer that never descends cannot reach the reference loss;
  // the efficiency case reports failure instead of a number.
  L2OParams<float> frozen;
  frozen.init(nc, 9);  // zero head: steps are exactly zero
  const auto ineff = bench_efficiency(p, frozen, "case1", opt);
  CHECK(!ineff.reached);
  CHECK(std::isnan(ineff.metric));
  const auto csv = bench_to_csv({ineff}, true);
  CHECK(csv.find("failed") != std::string::npos);
  const auto csv2 = bench_to_csv({eff}, false);
  CHECK(csv2.find("case0") != std::string::npos);
  CHECK(csv2.find('%') != std::string::npos);
}

// ---- policy learner ----------------------------------------------------

TEST_CASE("factor squashing lands in the allowed box with identity at zero") {
  CHECK(factor_from_raw(0.0) == 1.0);
  CHECK(factor_from_raw(50.0) == doctest::Approx(2.0));
  CHECK(factor_from_raw(-50.0) == doctest::Approx(0.5));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 3.0);
  double prev = factor_from_raw(-6.0);
  for (double a = -5.5; a <= 6.0; a += 0.5) {
    const double f = factor_from_raw(a);
    CHECK(f > prev);  // strictly monotone
    prev = f;
  }
  for (int i = 0; i < 1000; ++i) {
    const double f = factor_from_raw(n01(rng));
    CHECK(f >= 0.5);
    CHECK(f <= 2.0);
  }
}

TEST_CASE("policy features are fixed width and zero padded") {
  auto p = split_problem();
  const auto rep = score_at(p, {20.0, 30.0});
  const auto f = policy_features(p, p.objectives, rep);
  REQUIRE(static_cast<std::int64_t>(f.size()) == kPolicyStateDim);
  CHECK(f[0] == std::log1p(1.0));       // first objective weight
  CHECK(f[1] == 60.0 / 100.0);          // first objective limit
  for (std::size_t i = 3 * kPolicyFeatureCols; i < f.size(); ++i) CHECK(f[i] == 0.0);

  std::vector<ObjectiveComponent> too_many(kPolicySlots + 1, p.objectives[0]);
  CHECK_THROWS(policy_features(p, too_many, rep));
}

TEST_CASE("untrained policy mean is the identity action") {
  auto p = split_problem();
  const auto net = PpoPolicy::init(32, -0.5, 42);
  const auto rep = score_at(p, {20.0, 30.0});
  std::vector<double> mu;
  policy_forward(net, policy_features(p, p.objectives, rep), mu);
  for (double m : mu) CHECK(m == 0.0);  // zero head

  // Deterministic adapter therefore reproduces the identity episode.
  EpisodeConfig cfg;
  cfg.max_iters = 30;
  cfg.adjustments = 2;
  const auto a = run_episode(p, policy_adapter(net, true), ClinicalGoalTable::builtin(), cfg);
  const auto b = run_episode(p, identity_policy(), ClinicalGoalTable::builtin(), cfg);
  REQUIRE(a.rounds.size() == b.rounds.size());
  for (std::size_t r = 0; r < a.rounds.size(); ++r)
    CHECK(a.rounds[r].report.total_score == b.rounds[r].report.total_score);
}

TEST_CASE("advantage recursion hand cases") {
  std::vector<PpoStep> ep(1);
  ep[0].reward = 2.0;
  ep[0].value = 0.5;
  compute_advantages(ep, 0.99, 0.95);
  CHECK(ep[0].advantage == doctest::Approx(1.5));  // r - V, terminal after
  CHECK(ep[0].ret == doctest::Approx(2.0));

  std::vector<PpoStep> e2(2);
  e2[0].reward = 1.0;
  e2[0].value = 0.2;
  e2[1].reward = -1.0;
  e2[1].value = 0.1;
  const double g = 0.9, l = 0.5;
  compute_advantages(e2, g, l);
  const double d1 = -1.0 - 0.1;
  const double d0 = 1.0 + g * 0.1 - 0.2;
  CHECK(e2[1].advantage == doctest::Approx(d1));
  CHECK(e2[0].advantage == doctest::Approx(d0 + g * l * d1));
  CHECK(e2[0].ret == doctest::Approx(e2[0].advantage + 0.2));
}

namespace {

// Independent forward pass for the finite-difference oracle: same
// architecture, coded with plain loops against the tensor list.
double oracle_loss(const PpoPolicy& net, const std::vector<PpoStep>& steps, double clip) {
  const auto mlp = [&](const Mat<double>& w, const std::vector<double>& b,
                       const std::vector<double>& in) {
    std::vector<double> out(b);
    for (std::int64_t i = 0; i < w.rows; ++i)
      for (std::int64_t j = 0; j < w.cols; ++j)
        out[static_cast<std::size_t>(j)] += in[static_cast<std::size_t>(i)] * w.at(i, j);
    for (auto& v : out) v = std::tanh(v);
    return out;
  };
  double loss = 0.0;
  for (const auto& st : steps) {
    const auto h1 = mlp(net.p_w1, net.p_b1, st.state);
    const auto h2 = mlp(net.p_w2, net.p_b2, h1);
    double logp = 0.0;
    for (std::size_t j = 0; j < st.raw.size(); ++j) {
      double mu = net.p_bmu[j];
      for (std::int64_t i = 0; i < net.p_wmu.rows; ++i)
        mu += h2[static_cast<std::size_t>(i)] * net.p_wmu.at(i, static_cast<std::int64_t>(j));
      const double sd = std::exp(net.log_std[j]);
      const double z = (st.raw[j] - mu) / sd;
      logp += -0.5 * z * z - net.log_std[j] - 0.9189385332046727;
    }
    const double ratio = std::exp(logp - st.logp);
    const double ru = ratio * st.advantage;
    const double rc = std::clamp(ratio, 1.0 - clip, 1.0 + clip) * st.advantage;
    loss += -std::min(ru, rc);

    const auto g1 = mlp(net.v_w1, net.v_b1, st.state);
    const auto g2 = mlp(net.v_w2, net.v_b2, g1);
    double v = net.v_b3[0];
    for (std::size_t i = 0; i < g2.size(); ++i) v += net.v_w3[i] * g2[i];
    loss += 0.5 * (v - st.ret) * (v - st.ret);
  }
  return loss / static_cast<double>(steps.size());
}

std::vector<PpoStep> synthetic_batch(const PpoPolicy& net, std::uint64_t seed, int n,
                                     std::size_t n_act, double ratio_jitter) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<PpoStep> steps(static_cast<std::size_t>(n));
  for (auto& st : steps) {
    st.state.assign(static_cast<std::size_t>(kPolicyStateDim), 0.0);
    for (auto& s : st.state) s = 0.3 * n01(rng);
    std::vector<double> mu;
    policy_forward(net, st.state, mu);
    st.raw.resize(n_act);
    st.logp = 0.0;
    for (std::size_t j = 0; j < n_act; ++j) {
      const double sd = std::exp(net.log_std[j]);
      st.raw[j] = mu[j] + sd * n01(rng);
      const double z = (st.raw[j] - mu[j]) / sd;
      st.logp += -0.5 * z * z - net.log_std[j] - 0.9189385332046727;
    }
    st.logp += ratio_jitter * n01(rng);  // detune to make ratios nontrivial
    st.advantage = n01(rng);
    st.ret = n01(rng);
  }
  return steps;
}

}  // namespace

TEST_CASE("surrogate gradient signs match finite differences") {
  auto net = PpoPolicy::init(8, -0.4, 31);
  // Give the mean head signal so policy gradients reach the trunk.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01(0.0, 0.05);
  for (auto& v : net.p_wmu.a) v = n01(rng);

  PolicyConfig cfg;
  cfg.hidden = 8;
  cfg.clip_ratio = 0.2;
  cfg.lr = 1e-7;  // one tiny Adam step: sign(delta) == -sign(gradient)
  const auto steps = synthetic_batch(net, 77, 6, 10, 0.05);

  auto before = net;
  PpoUpdater upd;
  upd.update(net, steps, cfg);

  auto bt = before.tensors();
  auto at = net.tensors();
  std::mt19937_64 pick(9);
  int checked = 0;
  for (int probe = 0; probe < 400 && checked < 60; ++probe) {
    const std::size_t ti = pick() % bt.size();
    auto& pv = *bt[ti].second;
    if (pv.empty()) continue;
    const std::size_t j = pick() % pv.size();
    const double h = 1e-6;
    const double keep = pv[j];
    pv[j] = keep + h;
    const double up = oracle_loss(before, steps, cfg.clip_ratio);
    pv[j] = keep - h;
    const double dn = oracle_loss(before, steps, cfg.clip_ratio);
    pv[j] = keep;
    const double fd = (up - dn) / (2.0 * h);
    if (std::abs(fd) < 1e-5) continue;  // too flat to carry a reliable sign
    const double delta = (*at[ti].second)[j] - keep;
    if (delta == 0.0) continue;  // probe straddles a clip kink
    CHECK(delta * fd < 0.0);
    ++checked;
  }
  CHECK(checked >= 40);
}

TEST_CASE("zero clip ratio freezes the policy while the critic learns") {
  auto net = PpoPolicy::init(8, -0.4, 13);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n01(0.0, 0.05);
  for (auto& v : net.p_wmu.a) v = n01(rng);

  PolicyConfig cfg;
  cfg.hidden = 8;
  cfg.clip_ratio = 0.0;
  cfg.lr = 1e-2;
  // On-policy batch: stored log densities use the current network, so every
  // ratio starts at exactly one.
  const auto steps = synthetic_batch(net, 21, 8, 10, 0.0);

  const auto before = net;
  PpoUpdater upd;
  for (int i = 0; i < 3; ++i) upd.update(net, steps, cfg);

  auto bt = before.tensors();
  auto at = net.tensors();
  for (std::size_t i = 0; i < bt.size(); ++i) {
    const bool policy_tensor = bt[i].first[0] == 'p' || bt[i].first == "log_std";
    if (policy_tensor)
      CHECK(*at[i].second == *bt[i].second);
  }
  CHECK(net.v_w3 != before.v_w3);  // value head moved
}

TEST_CASE("policy file round trip") {
  auto net = PpoPolicy::init(16, -0.3, 99);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01(0.0, 0.1);
  for (auto& [name, v] : net.tensors())
    for (auto& x : *v) x += n01(rng);
  save_policy(net, "policy_roundtrip.bin");
  const auto back = load_policy("policy_roundtrip.bin");
  auto a = net.tensors();
  auto b = back.tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
  CHECK(back.hidden == 16);
}

TEST_CASE("policy training runs deterministically and validates its config") {
  std::mt19937_64 rng(55);
  std::vector<PlanProblem> probs;
  for (int i = 0; i < 3; ++i) probs.push_back(boxed_random_problem(rng, 50, 12, 0.4, 4));
  const auto goals = ClinicalGoalTable::builtin();

  PolicyConfig cfg;
  cfg.hidden = 16;
  cfg.batch_episodes = 2;
  cfg.iterations = 2;
  cfg.epochs_per_batch = 2;
  cfg.seed = 3;
  cfg.episode.max_iters = 15;
  cfg.episode.adjustments = 2;

  const auto r1 = ppo_train(probs, goals, cfg);
  const auto r2 = ppo_train(probs, goals, cfg);
  REQUIRE(r1.log.size() == 2);
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(std::isfinite(r1.log[i].mean_reward));
    CHECK(r1.log[i].mean_reward == r2.log[i].mean_reward);
    CHECK(r1.log[i].policy_loss == r2.log[i].policy_loss);
  }
  auto t1 = r1.policy.tensors();
  auto t2 = r2.policy.tensors();
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(*t1[i].second == *t2[i].second);

  auto bad = cfg;
  bad.episode.adjustments = 0;  // no action to learn from
  CHECK_THROWS(ppo_train(probs, goals, bad));
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS(ppo_train(probs, goals, bad));
  CHECK_THROWS(ppo_train({}, goals, cfg));
}

TEST_CASE("trained policy matches or beats the identity on held-out problems") {
  std::mt19937_64 rng(55);
  std::vector<PlanProblem> train, held;
  for (int i = 0; i < 4; ++i) train.push_back(boxed_random_problem(rng, 50, 12, 0.4, 4));
  for (int i = 0; i < 2; ++i) held.push_back(boxed_random_problem(rng, 50, 12, 0.4, 4));
  const auto goals = ClinicalGoalTable::builtin();

  PolicyConfig cfg;
  cfg.hidden = 16;
  cfg.batch_episodes = 4;
  cfg.iterations = 8;
  cfg.seed = 3;
  cfg.episode.max_iters = 20;
  cfg.episode.adjustments = 3;
  const auto res = ppo_train(train, goals, cfg);

  double id_sum = 0.0, tr_sum = 0.0;
  for (const auto& p : held) {
    id_sum += run_episode(p, identity_policy(), goals, cfg.episode).best_score();
    tr_sum += run_episode(p, policy_adapter(res.policy, true), goals, cfg.episode).best_score();
  }
  CHECK(tr_sum >= id_sum);
}
