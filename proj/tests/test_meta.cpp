#include "spotopt/meta.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "spotopt/phantom.hpp"
#include "test_support.hpp"

using namespace spotopt;

namespace {

PlanProblem toy_two_spot() {
  PlanProblem p;
  CooBuilder coo(3, 2);
  coo.add(0, 0, 1.0);
  coo.add(0, 1, 0.25);
  coo.add(1, 0, 0.5);
  coo.add(1, 1, 1.0);
  coo.add(2, 0, 0.2);
  coo.add(2, 1, 0.3);
  p.matrix = coo.build();
  Structure t;
  t.name = "T";
  t.kind = StructureKind::target;
  t.voxel_ids = {0, 1};
  Structure o;
  o.name = "O";
  o.kind = StructureKind::oar;
  o.voxel_ids = {2};
  p.structures = {t, o};
  ObjectiveComponent c0;
  c0.structure_index = 0;
  c0.kind = ObjectiveKind::d_min;
  c0.weight = 1.0;
  c0.dose_limit = 6.0;
  ObjectiveComponent c1;
  c1.structure_index = 1;
  c1.kind = ObjectiveKind::d_max;
  c1.weight = 0.5;
  c1.dose_limit = 0.4;
  p.objectives = {c0, c1};
  p.prescriptions["T"] = 6.0;
  p.validate();
  return p;
}

L2OConfig tiny_net() {
  L2OConfig cfg;
  cfg.k_slots = 6;
  cfg.hidden = 16;
  cfg.layers = 2;
  cfg.q_heads = 4;
  cfg.kv_heads = 2;
  cfg.head_dim = 4;
  cfg.intermediate = 24;
  return cfg;
}

}  // namespace

TEST_CASE("schedule arithmetic exact cases") {
  CHECK(weight_schedule(20, 10) == 1.0);
  CHECK(weight_schedule(1, 10) == 0.05);
  CHECK(weight_schedule(40, 20) == 0.5);
  CHECK_THROWS(weight_schedule(0, 10));
  CHECK_THROWS(weight_schedule(5, 0));
  CHECK_THROWS(weight_schedule(-3, 4));
}

TEST_CASE("schedule bounds and monotonicity on a grid") {
  for (std::int64_t e = 1; e <= 100; ++e) {
    double prev = 0.0;
    for (std::int64_t s = 1; s <= 100; ++s) {
      const double w = weight_schedule(s, e);
      CHECK(w > 0.0);
      CHECK(w <= 1.0);
      CHECK(w >= prev);  // nondecreasing in the step for fixed epoch
      prev = w;
      if (e > 1) CHECK(w <= weight_schedule(s, e - 1));  // nonincreasing in the epoch
    }
  }
}

TEST_CASE("window loss hand cases and recomputation") {
  // Epoch 1 makes every weight saturate at 1.
  CHECK(meta_loss({7.5}, 5, 1) == 7.5);
  std::vector<double> flat(6, 3.25);
  CHECK(meta_loss(flat, 9, 1) == doctest::Approx(6 * 3.25).epsilon(1e-15));
  CHECK_THROWS(meta_loss({}, 1, 1));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> losses(1 + rng() % 30);
    for (auto& v : losses) v = u(rng);
    const std::int64_t first = 1 + static_cast<std::int64_t>(rng() % 90);
    const std::int64_t epoch = 1 + static_cast<std::int64_t>(rng() % 40);
    double want = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
      const double num = static_cast<double>(first + static_cast<std::int64_t>(i));
      const double den = 20.0 * (static_cast<double>(epoch) / 10.0) *
                         (static_cast<double>(epoch) / 10.0);
      want += std::min(1.0, num / den) * losses[i];
    }
    CHECK(testsup::rel_err(meta_loss(losses, first, epoch), want) < 1e-14);
  }
}

TEST_CASE("cosine learning rate endpoints") {
  CHECK(cosine_lr(4e-4, 0, 100) == 4e-4);
  CHECK(std::abs(cosine_lr(4e-4, 100, 100)) < 1e-19);
  CHECK(cosine_lr(4e-4, 50, 100) == doctest::Approx(2e-4).epsilon(1e-12));
  for (std::int64_t s = 1; s <= 100; ++s)
    CHECK(cosine_lr(1.0, s, 100) < cosine_lr(1.0, s - 1, 100));
}

TEST_CASE("config validation") {
  MetaConfig cfg;
  cfg.net = tiny_net();
  CHECK_NOTHROW(cfg.validate());
  MetaConfig bad = cfg;
  bad.window = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.lr0 = 0.0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.inner_steps_per_epoch = cfg.window - 1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.batch = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("unrolled window gradient matches parameter finite differences") {
  const auto p = toy_two_spot();
  ObjectiveEvaluator ev(p);
  const L2OConfig cfg = tiny_net();

  L2OParams<double> params;
  params.init(cfg, 17);
  // A small random head makes every parameter matter; zero would leave the
  // encoder without gradient signal.
  std::mt19937_64 hr(5);
  std::normal_distribution<double> nd(0.0, 0.01);
  for (auto& v : params.w_head) v = nd(hr);

  const std::vector<double> x0{2.0, 1.5};
  auto fresh_state = [&] {
    RolloutState<double> st;
    st.x = x0;
    st.moments = MomentState(2);
    st.epoch = 3;
    return st;
  };
  auto loss_of = [&](const L2OParams<double>& q) {
    auto st = fresh_state();
    WindowCache<double> wc;
    return rollout_window(ev, p, q, st, 2, wc, nullptr, AttentionMode::reference,
                          Exec::serial);
  };

  auto st = fresh_state();
  WindowCache<double> wc;
  const double base = rollout_window(ev, p, params, st, 2, wc, nullptr,
                                     AttentionMode::reference, Exec::serial);
  CHECK(std::isfinite(base));
  CHECK(wc.record.losses.size() == 2);
  CHECK(testsup::rel_err(wc.record.value,
                         meta_loss(wc.record.losses, 1, 3)) < 1e-14);

  L2OParams<double> grad;
  grad.zero_like(cfg);
  window_backward(ev, params, wc, grad, nullptr, Exec::serial);

  auto pt = params.tensors();
  auto gt = grad.tensors();
  const double h = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < pt.size(); ++k) {
    auto& vec = *pt[k].second;
    const auto& gv = *gt[k].second;
    const std::size_t stride = std::max<std::size_t>(1, vec.size() / 7);
    for (std::size_t i = 0; i < vec.size(); i += stride) {
      const double keep = vec[i];
      vec[i] = keep + h;
      const double up = loss_of(params);
      vec[i] = keep - h;
      const double dn = loss_of(params);
      vec[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      worst = std::max(worst, testsup::rel_err(fd, gv[i]));
      ++checked;
    }
  }
  CHECK(checked > 100);
  CHECK(worst < 1e-5);
}

TEST_CASE("zero head still sends gradient to the head weights") {
  const auto p = toy_two_spot();
  ObjectiveEvaluator ev(p);
  L2OParams<float> params;
  params.init(tiny_net(), 3);
  for (auto& v : params.w_head) v = 0.0f;

  RolloutState<float> st;
  st.x = {2.0, 1.5};
  st.moments = MomentState(2);
  st.epoch = 1;
  WindowCache<float> wc;
  rollout_window(ev, p, params, st, 4, wc);
  L2OParams<float> grad;
  grad.zero_like(params.cfg);
  window_backward(ev, params, wc, grad);
  double head_norm = 0.0, rest_norm = 0.0;
  for (float v : grad.w_head) head_norm += static_cast<double>(v) * v;
  for (float v : grad.w_in.a) rest_norm += static_cast<double>(v) * v;
  CHECK(head_norm > 0.0);
  // With a zero head the iterate never moves, so parameters that only act
  // through the steps see no gradient.
  CHECK(rest_norm == 0.0);
}

TEST_CASE("gradients are confined to the current window") {
  std::mt19937_64 rng(9);
  const auto p = testsup::random_problem(rng, 24, 9, 0.4, 4);
  ObjectiveEvaluator ev(p);
  L2OConfig cfg = tiny_net();
  L2OParams<float> params;
  params.init(cfg, 21);
  std::normal_distribution<float> nd(0.0f, 0.05f);
  std::mt19937_64 hr(2);
  for (auto& v : params.w_head) v = nd(hr);

  RolloutState<float> st;
  st.x = testsup::random_x(rng, p.n_spots(), 0.5, 1.5);
  st.moments = MomentState(p.n_spots());
  st.epoch = 2;
  WindowCache<float> w1, w2;
  rollout_window(ev, p, params, st, 5, w1);
  // Snapshot the carried state, then roll the second window.
  RolloutState<float> carried = st;
  rollout_window(ev, p, params, st, 5, w2);

  L2OParams<float> ga;
  ga.zero_like(cfg);
  window_backward(ev, params, w2, ga);

  // Re-rolling the second window from a state holding only the carried
  // values (history discarded) must give the same gradient bit for bit.
  WindowCache<float> w2b;
  rollout_window(ev, p, params, carried, 5, w2b);
  L2OParams<float> gb;
  gb.zero_like(cfg);
  window_backward(ev, params, w2b, gb);

  auto ta = ga.tensors();
  auto tb = gb.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k) {
    const auto& va = *ta[k].second;
    const auto& vb = *tb[k].second;
    REQUIRE(va.size() == vb.size());
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
  }
}

TEST_CASE("outer optimizer decoupled decay and adaptive step") {
  L2OConfig cfg = tiny_net();
  L2OParams<float> params;
  params.init(cfg, 1);
  L2OParams<float> grad;
  grad.zero_like(cfg);
  AdamW opt;
  opt.weight_decay = 0.1;
  const float before = params.w_in.a[0];
  opt.step(params, grad, 0.5);
  // Zero gradient leaves only the decay term.
  CHECK(params.w_in.a[0] == doctest::Approx(before * (1.0 - 0.5 * 0.1)).epsilon(1e-6));

  // A constant gradient gives a first step of -lr (adaptive ratio 1).
  L2OParams<float> p2;
  p2.init(cfg, 1);
  L2OParams<float> g2;
  g2.zero_like(cfg);
  for (auto& [name, vec] : g2.tensors())
    for (auto& v : *vec) v = 0.25f;
  AdamW o2;
  o2.weight_decay = 0.0;
  const float b2 = p2.w_rec.a[3];
  o2.step(p2, g2, 1e-2);
  CHECK(p2.w_rec.a[3] == doctest::Approx(b2 - 1e-2).epsilon(1e-4));
}

TEST_CASE("training run is reproducible and logs every outer step") {
  std::mt19937_64 rng(40);
  std::vector<PlanProblem> probs;
  for (int i = 0; i < 4; ++i) probs.push_back(testsup::random_problem(rng, 24, 8, 0.4, 4));

  MetaConfig cfg;
  cfg.net = tiny_net();
  cfg.window = 4;
  cfg.inner_steps_per_epoch = 8;
  cfg.n_epochs = 2;
  cfg.batch = 2;
  cfg.lr0 = 1e-3;
  cfg.seed = 11;

  const auto dir = std::filesystem::temp_directory_path() / "spotopt_meta_test";
  std::filesystem::remove_all(dir);
  TrainResult a = train_l2o(cfg, probs, dir.string());
  TrainResult b = train_l2o(cfg, probs);

  // epochs x batches x windows
  CHECK(a.outer_steps == 2 * 2 * 2);
  REQUIRE(a.log.size() == static_cast<std::size_t>(a.outer_steps));
  REQUIRE(b.log.size() == a.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].meta_loss == b.log[i].meta_loss);
    CHECK(a.log[i].lr == b.log[i].lr);
    CHECK(std::isfinite(a.log[i].meta_loss));
  }
  auto pa = a.params.tensors();
  auto pb = b.params.tensors();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    const auto& va = *pa[k].second;
    const auto& vb = *pb[k].second;
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vb[i]);
  }

  CHECK(std::filesystem::exists(dir / "checkpoint.bin"));
  CHECK(std::filesystem::exists(dir / "training_log.csv"));
  L2OParams<float> loaded = load_checkpoint((dir / "checkpoint.bin").string());
  auto pl = loaded.tensors();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    const auto& va = *pa[k].second;
    const auto& vl = *pl[k].second;
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(va[i] == vl[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("exploding learning rate hits the non-finite guard") {
  std::mt19937_64 rng(77);
  std::vector<PlanProblem> probs{testsup::random_problem(rng, 24, 8, 0.4, 4)};
  MetaConfig cfg;
  cfg.net = tiny_net();
  cfg.window = 2;
  cfg.inner_steps_per_epoch = 20;
  cfg.n_epochs = 2;
  cfg.batch = 1;
  cfg.lr0 = 1e12;  // drives the float forward pass to overflow
  cfg.seed = 1;
  CHECK_THROWS_AS(train_l2o(cfg, probs), std::runtime_error);
}

TEST_CASE("200 outer updates beat the untouched start on a fixed family") {
  std::mt19937_64 rng(60);
  std::vector<PlanProblem> probs;
  for (int i = 0; i < 8; ++i) probs.push_back(testsup::random_problem(rng, 30, 12, 0.4, 5));

  MetaConfig cfg;
  cfg.net = tiny_net();
  cfg.window = 5;
  cfg.inner_steps_per_epoch = 20;
  cfg.n_epochs = 50;  // 50 epochs x 1 batch x 4 windows = 200 outer steps
  cfg.batch = 8;
  cfg.lr0 = 3e-3;
  cfg.seed = 123;

  TrainResult r = train_l2o(cfg, probs);
  CHECK(r.outer_steps == 200);
  CHECK(r.nonfinite_windows == 0);

  double trained = 0.0, start = 0.0;
  for (const auto& p : probs) {
    ObjectiveEvaluator ev(p);
    auto x = default_start(p);
    L2ORunOptions opt;
    opt.max_iters = 20;
    RunTrace t = l2o_minimize(ev, p, r.params, x, opt);
    trained += t.final_loss();
    start += t.points.front().loss;
  }
  CHECK(trained / 8.0 < start / 8.0);
}
