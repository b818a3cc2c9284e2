// spotopt: phantom generation, optimization, training, plan evaluation,
// planning episodes, and benchmark protocols over planprob/1 containers.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spotopt/autoplan.hpp"
#include "spotopt/lbfgsb.hpp"
#include "spotopt/meta.hpp"
#include "spotopt/phantom.hpp"
#include "spotopt/plan_eval.hpp"
#include "spotopt/ppo.hpp"
#include "spotopt/problem_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spotopt;

namespace {

std::uint64_t env_seed() {
  if (const char* s = std::getenv("AUTOPLAN_SEED")) return std::strtoull(s, nullptr, 10);
  return 0;
}

const char* status_name(RunStatus s) {
  switch (s) {
    case RunStatus::converged: return "converged";
    case RunStatus::line_search_failed: return "line_search_failed";
    case RunStatus::non_finite: return "non_finite";
    default: return "ok";
  }
}

// Subdirectories holding a problem.json, sorted by name.
std::vector<fs::path> list_problem_dirs(const std::string& root) {
  std::vector<fs::path> out;
  if (fs::exists(fs::path(root) / "problem.json")) {
    out.emplace_back(root);
    return out;
  }
  for (const auto& ent : fs::directory_iterator(root))
    if (ent.is_directory() && fs::exists(ent.path() / "problem.json"))
      out.push_back(ent.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error(root + ": no problem containers found");
  return out;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  return json::parse(in);
}

AttentionMode mode_from_name(const std::string& m) {
  if (m == "reference") return AttentionMode::reference;
  if (m == "tiled") return AttentionMode::tiled;
  throw std::runtime_error("unknown attention mode: " + m);
}

L2OConfig net_config_from_json(const json& j) {
  L2OConfig c;
  c.k_slots = j.value("k_slots", c.k_slots);
  c.hidden = j.value("hidden", c.hidden);
  c.layers = j.value("layers", c.layers);
  c.q_heads = j.value("q_heads", c.q_heads);
  c.kv_heads = j.value("kv_heads", c.kv_heads);
  c.head_dim = j.value("head_dim", c.head_dim);
  c.intermediate = j.value("intermediate", c.intermediate);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.max_spots = j.value("max_spots", c.max_spots);
  return c;
}

MetaConfig meta_config_from_json(const json& j) {
  MetaConfig c;
  if (j.contains("net")) c.net = net_config_from_json(j.at("net"));
  c.window = j.value("window", c.window);
  c.n_epochs = j.value("n_epochs", c.n_epochs);
  c.inner_steps_per_epoch = j.value("inner_steps_per_epoch", c.inner_steps_per_epoch);
  c.batch = j.value("batch", c.batch);
  c.lr0 = j.value("lr0", c.lr0);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", env_seed());
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.mode = mode_from_name(j.value("mode", std::string("tiled")));
  return c;
}

PolicyConfig policy_config_from_json(const json& j) {
  PolicyConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.clip_ratio = j.value("clip_ratio", c.clip_ratio);
  c.discount = j.value("discount", c.discount);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.epochs_per_batch = j.value("epochs_per_batch", c.epochs_per_batch);
  c.batch_episodes = j.value("batch_episodes", c.batch_episodes);
  c.iterations = j.value("iterations", c.iterations);
  c.lr = j.value("lr", c.lr);
  c.init_log_std = j.value("init_log_std", c.init_log_std);
  c.seed = j.value("seed", env_seed());
  if (j.contains("episode")) {
    const json& e = j.at("episode");
    c.episode.max_iters = e.value("max_iters", c.episode.max_iters);
    c.episode.adjustments = e.value("adjustments", c.episode.adjustments);
    c.episode.coverage_guard = e.value("coverage_guard", c.episode.coverage_guard);
  }
  return c;
}

void write_episode_csv(const EpisodeRecord& rec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << "round,loss,iterations,seconds,score,reward,failed\n";
  char buf[256];
  for (std::size_t r = 0; r < rec.rounds.size(); ++r) {
    const auto& rr = rec.rounds[r];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%lld,%.6f,%.17g,%.17g,%d\n", r, rr.final_loss,
                  static_cast<long long>(rr.iterations), rr.seconds, rr.report.total_score,
                  rr.reward, rr.failed ? 1 : 0);
    out << buf;
  }
}

int cmd_phantom_generate(const std::string& spec_path, std::uint64_t seed,
                         const std::string& out_dir) {
  PhantomSpec spec = load_phantom_spec(spec_path);
  spec.seed = seed;
  const auto p = generate_problem(spec);
  save_problem(p, out_dir);
  std::printf("phantom: %lld voxels, %lld spots, %zu structures -> %s\n",
              static_cast<long long>(p.n_voxels()), static_cast<long long>(p.n_spots()),
              p.structures.size(), out_dir.c_str());
  return 0;
}

int cmd_optimize_lbfgsb(const std::string& problem_dir, std::int64_t max_iters,
                        double max_seconds, const std::string& trace_path,
                        const std::string& mu_out) {
  const auto p = load_problem(problem_dir);
  ObjectiveEvaluator ev(p);
  SpotVector x = default_start(p);
  LbfgsbOptions opt;
  opt.max_iters = max_iters;
  opt.max_seconds = max_seconds;
  const auto tr = lbfgsb_minimize_problem(ev, p, x, opt);
  if (!trace_path.empty()) save_trace_csv(tr, trace_path);
  if (!mu_out.empty()) save_f64(x, mu_out);
  std::printf("lbfgsb: %s, final loss %.6g, best %.6g, %.3f s\n", status_name(tr.status),
              tr.final_loss(), tr.best_loss(), tr.points.back().seconds);
  return 0;
}

int cmd_optimize_l2o(const std::string& problem_dir, const std::string& ckpt,
                     std::int64_t max_iters, double max_seconds, const std::string& trace_path,
                     const std::string& mu_out, const std::string& mode) {
  const auto p = load_problem(problem_dir);
  const auto net = load_checkpoint(ckpt);
  ObjectiveEvaluator ev(p);
  SpotVector x = default_start(p);
  L2ORunOptions opt;
  opt.max_iters = max_iters;
  opt.max_seconds = max_seconds;
  opt.mode = mode_from_name(mode);
  const auto tr = l2o_minimize(ev, p, net, x, opt);
  if (!trace_path.empty()) save_trace_csv(tr, trace_path);
  if (!mu_out.empty()) save_f64(x, mu_out);
  std::printf("l2o: %s, final loss %.6g, best %.6g, %.3f s\n", status_name(tr.status),
              tr.final_loss(), tr.best_loss(), tr.points.back().seconds);
  return 0;
}

int cmd_train_l2o(const std::string& problems_dir, const std::string& config_path,
                  const std::string& out_dir) {
  const auto cfg = meta_config_from_json(load_json_file(config_path));
  std::vector<PlanProblem> problems;
  for (const auto& d : list_problem_dirs(problems_dir)) problems.push_back(load_problem(d.string()));
  std::printf("training on %zu problems\n", problems.size());
  const auto res = train_l2o(cfg, problems, out_dir);
  std::printf("done: %lld outer steps, final meta loss %.6g\n",
              static_cast<long long>(res.outer_steps),
              res.log.empty() ? 0.0 : res.log.back().meta_loss);
  return 0;
}

int cmd_evaluate(const std::string& problem_dir, const std::string& mu_path,
                 const std::string& goals_path, const std::string& report_path) {
  const auto p = load_problem(problem_dir);
  const auto x = load_f64(mu_path);
  const auto goals = goals_path.empty() ? ClinicalGoalTable::builtin() : load_goals(goals_path);
  const auto rep = plan_score(p, x, goals);
  save_report(rep, report_path + ".csv", report_path + ".txt");
  std::printf("total score %.6f (%zu structures) -> %s.{csv,txt}\n", rep.total_score,
              rep.structures.size(), report_path.c_str());
  return 0;
}

int cmd_autoplan_run(const std::string& problem_dir, const std::string& policy_arg,
                     const std::string& out_dir, std::int64_t adjustments,
                     std::int64_t max_iters, const std::string& predict_path,
                     const std::string& l2o_ckpt, bool reinit, bool stochastic) {
  auto p = load_problem(problem_dir);
  const auto goals = ClinicalGoalTable::builtin();

  if (p.objectives.empty() || reinit) {
    std::map<std::string, double> pred;
    if (!predict_path.empty())
      for (const auto& [name, v] : load_json_file(predict_path).items())
        pred[name] = v.get<double>();
    p.objectives = init_objectives(p, pred, goals);
  }

  EpisodeConfig cfg;
  cfg.adjustments = adjustments;
  cfg.max_iters = max_iters;
  L2OParams<float> net;
  if (!l2o_ckpt.empty()) {
    net = load_checkpoint(l2o_ckpt);
    cfg.optimizer = InnerOptimizer::l2o;
    cfg.net = &net;
  }

  AdjustPolicy policy;
  std::unique_ptr<PpoPolicy> learned;
  if (policy_arg == "rule") {
    policy = rule_policy();
  } else {
    learned = std::make_unique<PpoPolicy>(load_policy(policy_arg));
    policy = policy_adapter(*learned, !stochastic, env_seed());
  }

  const auto rec = run_episode(p, policy, goals, cfg);
  fs::create_directories(out_dir);
  write_episode_csv(rec, out_dir + "/episode.csv");
  save_f64(rec.best_x, out_dir + "/best_mu.f64");
  save_f64(rec.final_x, out_dir + "/final_mu.f64");
  save_report(rec.rounds[rec.best_round].report, out_dir + "/best_report.csv",
              out_dir + "/best_report.txt");
  std::printf("episode: %zu rounds, best round %zu, score %.6f (round 0: %.6f)\n",
              rec.rounds.size(), rec.best_round, rec.best_score(),
              rec.rounds.front().report.total_score);
  return 0;
}

int cmd_bench(bool efficiency_mode, const std::string& problems_dir, const std::string& ckpt,
              const std::string& out_csv, std::int64_t ref_iters, double time_cap) {
  const auto net = load_checkpoint(ckpt);
  BenchOptions opt;
  opt.ref_iters = ref_iters;
  opt.time_cap_factor = time_cap;
  std::vector<BenchResult> rows;
  for (const auto& d : list_problem_dirs(problems_dir)) {
    const auto p = load_problem(d.string());
    const auto name = d.filename().string();
    rows.push_back(efficiency_mode ? bench_efficiency(p, net, name, opt)
                                   : bench_effectiveness(p, net, name, opt));
    const auto& r = rows.back();
    std::printf("%s: ref %.6g in %.3f s, learned %.6g, metric %.2f%%%s\n", name.c_str(),
                r.loss_ref, r.t_ref, r.loss_l2o, 100.0 * r.metric,
                efficiency_mode && !r.reached ? " (failed)" : "");
  }
  const auto csv = bench_to_csv(rows, efficiency_mode);
  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error(out_csv + ": cannot write");
  out << csv;
  return 0;
}

int cmd_ppo_train(const std::string& problems_dir, const std::string& config_path,
                  const std::string& out_ckpt, const std::string& log_csv) {
  const auto cfg = policy_config_from_json(load_json_file(config_path));
  std::vector<PlanProblem> problems;
  for (const auto& d : list_problem_dirs(problems_dir)) problems.push_back(load_problem(d.string()));
  std::printf("training policy on %zu problems\n", problems.size());
  const auto res = ppo_train(problems, ClinicalGoalTable::builtin(), cfg);
  save_policy(res.policy, out_ckpt);
  if (!log_csv.empty()) {
    std::ofstream out(log_csv);
    out << "iteration,mean_reward,mean_best_score,policy_loss,value_loss\n";
    char buf[256];
    for (const auto& r : res.log) {
      std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n",
                    static_cast<long long>(r.iteration), r.mean_reward, r.mean_best_score,
                    r.policy_loss, r.value_loss);
      out << buf;
    }
  }
  std::printf("saved policy -> %s (final mean best score %.6f)\n", out_ckpt.c_str(),
              res.log.empty() ? 0.0 : res.log.back().mean_best_score);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverse planning toolkit: learned and classical spot-weight optimization"};
  app.require_subcommand(1);

  // phantom generate
  auto* phantom = app.add_subcommand("phantom", "Synthetic problem generation");
  auto* pgen = phantom->add_subcommand("generate", "Generate a problem from a spec file");
  std::string pg_spec, pg_out;
  std::uint64_t pg_seed = 0;
  pgen->add_option("--spec", pg_spec, "Phantom spec (JSON)")->required();
  pgen->add_option("--seed", pg_seed, "Generation seed")->required();
  pgen->add_option("--out", pg_out, "Output container directory")->required();

  // optimize lbfgsb | l2o
  auto* optimize = app.add_subcommand("optimize", "Run one optimizer on one problem");
  auto* olb = optimize->add_subcommand("lbfgsb", "Projected quasi-Newton baseline");
  std::string olb_problem, olb_trace, olb_mu;
  std::int64_t olb_iters = 100;
  double olb_seconds = std::numeric_limits<double>::infinity();
  olb->add_option("--problem", olb_problem, "Problem container")->required();
  olb->add_option("--max-iters", olb_iters, "Iteration cap")->required();
  olb->add_option("--max-seconds", olb_seconds, "Wall-clock cap");
  olb->add_option("--trace", olb_trace, "Trace CSV path");
  olb->add_option("--mu-out", olb_mu, "Final MU vector (raw f64)");

  auto* ol2 = optimize->add_subcommand("l2o", "Learned step-proposal optimizer");
  std::string ol2_problem, ol2_ckpt, ol2_trace, ol2_mu, ol2_mode = "tiled";
  std::int64_t ol2_iters = 100;
  double ol2_seconds = std::numeric_limits<double>::infinity();
  ol2->add_option("--problem", ol2_problem, "Problem container")->required();
  ol2->add_option("--checkpoint", ol2_ckpt, "Network checkpoint")->required();
  ol2->add_option("--max-iters", ol2_iters, "Iteration cap")->required();
  ol2->add_option("--max-seconds", ol2_seconds, "Wall-clock cap");
  ol2->add_option("--trace", ol2_trace, "Trace CSV path");
  ol2->add_option("--mu-out", ol2_mu, "Final MU vector (raw f64)");
  ol2->add_option("--attention", ol2_mode, "Attention mode: tiled|reference");

  // train l2o
  auto* train = app.add_subcommand("train", "Meta-train the step-proposal network");
  auto* tl2 = train->add_subcommand("l2o", "Unrolled window training");
  std::string tl2_problems, tl2_config, tl2_out;
  tl2->add_option("--problems", tl2_problems, "Directory of problem containers")->required();
  tl2->add_option("--config", tl2_config, "Training config (JSON)")->required();
  tl2->add_option("--out", tl2_out, "Checkpoint output directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score a plan against clinical goals");
  std::string ev_problem, ev_mu, ev_goals, ev_report;
  eval->add_option("--problem", ev_problem, "Problem container")->required();
  eval->add_option("--mu", ev_mu, "MU vector (raw f64)")->required();
  eval->add_option("--goals", ev_goals, "Goals table JSON (default: built-in)");
  eval->add_option("--report", ev_report, "Report path stem (.csv/.txt appended)")->required();

  // autoplan run
  auto* autoplan = app.add_subcommand("autoplan", "Planning episodes");
  auto* arun = autoplan->add_subcommand("run", "Run one adjustment episode");
  std::string ar_problem, ar_policy, ar_out, ar_predict, ar_l2o;
  std::int64_t ar_adj = 4, ar_iters = 200;
  bool ar_reinit = false, ar_stochastic = false;
  arun->add_option("--problem", ar_problem, "Problem container")->required();
  arun->add_option("--policy", ar_policy, "rule | policy checkpoint path")->required();
  arun->add_option("--out", ar_out, "Output directory")->required();
  arun->add_option("--adjustments", ar_adj, "Adjustment count");
  arun->add_option("--max-iters", ar_iters, "Inner iterations per round");
  arun->add_option("--predict", ar_predict, "Predicted per-structure dose (JSON map)");
  arun->add_option("--l2o-ckpt", ar_l2o, "Use the learned inner optimizer");
  arun->add_flag("--reinit", ar_reinit, "Rebuild objectives from goals and predictions");
  arun->add_flag("--stochastic", ar_stochastic, "Sample policy actions instead of the mean");

  // bench effectiveness | efficiency
  auto* bench = app.add_subcommand("bench", "Optimizer comparison protocols");
  std::string be_problems, be_ckpt, be_out;
  std::int64_t be_ref_iters = 100;
  double be_cap = 3.0;
  auto* beff = bench->add_subcommand("effectiveness", "Equal-time loss comparison");
  auto* bffc = bench->add_subcommand("efficiency", "Equal-loss time comparison");
  for (auto* b : {beff, bffc}) {
    b->add_option("--problems", be_problems, "Directory of problem containers")->required();
    b->add_option("--ckpt", be_ckpt, "Network checkpoint")->required();
    b->add_option("--out", be_out, "Output CSV")->required();
    b->add_option("--ref-iters", be_ref_iters, "Reference iteration budget");
    b->add_option("--time-cap", be_cap, "Efficiency time cap, multiples of T_ref");
  }

  // ppo train
  auto* ppo = app.add_subcommand("ppo", "Adjustment policy learning");
  auto* ptr = ppo->add_subcommand("train", "Train the adjustment policy");
  std::string pt_problems, pt_config, pt_out, pt_log;
  ptr->add_option("--problems", pt_problems, "Directory of problem containers")->required();
  ptr->add_option("--config", pt_config, "Policy config (JSON)")->required();
  ptr->add_option("--out", pt_out, "Policy checkpoint path")->required();
  ptr->add_option("--log", pt_log, "Training log CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pgen->parsed()) return cmd_phantom_generate(pg_spec, pg_seed, pg_out);
    if (olb->parsed()) return cmd_optimize_lbfgsb(olb_problem, olb_iters, olb_seconds, olb_trace, olb_mu);
    if (ol2->parsed())
      return cmd_optimize_l2o(ol2_problem, ol2_ckpt, ol2_iters, ol2_seconds, ol2_trace, ol2_mu,
                              ol2_mode);
    if (tl2->parsed()) return cmd_train_l2o(tl2_problems, tl2_config, tl2_out);
    if (eval->parsed()) return cmd_evaluate(ev_problem, ev_mu, ev_goals, ev_report);
    if (arun->parsed())
      return cmd_autoplan_run(ar_problem, ar_policy, ar_out, ar_adj, ar_iters, ar_predict,
                              ar_l2o, ar_reinit, ar_stochastic);
    if (beff->parsed()) return cmd_bench(false, be_problems, be_ckpt, be_out, be_ref_iters, be_cap);
    if (bffc->parsed()) return cmd_bench(true, be_problems, be_ckpt, be_out, be_ref_iters, be_cap);
    if (ptr->parsed()) return cmd_ppo_train(pt_problems, pt_config, pt_out, pt_log);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  std::fprintf(stderr, "error: missing subcommand\n");
  return 1;
}
