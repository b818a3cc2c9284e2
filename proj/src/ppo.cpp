#include "spotopt/ppo.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace spotopt {

using nlohmann::json;

namespace {

constexpr double kLn2 = std::numbers::ln2;
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * log(2*pi)
constexpr const char* kPolicyVersion = "ppo/1";

}  // namespace

double factor_from_raw(double a) { return std::exp(kLn2 * std::tanh(a)); }

std::vector<double> policy_features(const PlanProblem& p,
                                    const std::vector<ObjectiveComponent>& params,
                                    const PlanReport& report) {
  if (static_cast<std::int64_t>(params.size()) > kPolicySlots)
    throw std::invalid_argument("more objectives than policy slots");
  std::unordered_map<std::string, const StructureScore*> rows;
  for (const auto& s : report.structures) rows[s.name] = &s;

  std::vector<double> f(static_cast<std::size_t>(kPolicyStateDim), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& o = params[k];
    double* fk = f.data() + k * kPolicyFeatureCols;
    fk[0] = std::log1p(o.weight);
    fk[1] = o.dose_limit / 100.0;
    const auto& name = p.structures[static_cast<std::size_t>(o.structure_index)].name;
    const auto it = rows.find(name);
    if (it == rows.end()) continue;
    fk[2] = std::log1p(it->second->penalty);
    fk[3] = it->second->d_mean / 100.0;
    fk[4] = it->second->d_max / 100.0;
  }
  return f;
}

// ---- Network ---------------------------------------------------------

PpoPolicy PpoPolicy::init(std::int64_t hidden, double init_log_std, std::uint64_t seed) {
  if (hidden < 1) throw std::invalid_argument("policy hidden size must be >= 1");
  PpoPolicy n;
  n.hidden = hidden;
  std::mt19937_64 rng(seed ^ 0x6a09e667f3bcc909ull);
  const auto fill = [&](Mat<double>& w, std::int64_t in, std::int64_t out) {
    w = Mat<double>(in, out);
    const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-lim, lim);
    for (auto& v : w.a) v = u(rng);
  };
  fill(n.p_w1, kPolicyStateDim, hidden);
  fill(n.p_w2, hidden, hidden);
  n.p_wmu = Mat<double>(hidden, kPolicyActionDim);  // zero: mean starts at identity
  fill(n.v_w1, kPolicyStateDim, hidden);
  fill(n.v_w2, hidden, hidden);
  n.p_b1.assign(static_cast<std::size_t>(hidden), 0.0);
  n.p_b2.assign(static_cast<std::size_t>(hidden), 0.0);
  n.p_bmu.assign(static_cast<std::size_t>(kPolicyActionDim), 0.0);
  n.log_std.assign(static_cast<std::size_t>(kPolicyActionDim), init_log_std);
  n.v_b1.assign(static_cast<std::size_t>(hidden), 0.0);
  n.v_b2.assign(static_cast<std::size_t>(hidden), 0.0);
  n.v_w3.assign(static_cast<std::size_t>(hidden), 0.0);
  {
    const double lim = std::sqrt(6.0 / static_cast<double>(hidden + 1));
    std::uniform_real_distribution<double> u(-lim, lim);
    for (auto& v : n.v_w3) v = u(rng);
  }
  n.v_b3.assign(1, 0.0);
  return n;
}

std::vector<std::pair<std::string, std::vector<double>*>> PpoPolicy::tensors() {
  return {{"p_w1", &p_w1.a},   {"p_b1", &p_b1},   {"p_w2", &p_w2.a}, {"p_b2", &p_b2},
          {"p_wmu", &p_wmu.a}, {"p_bmu", &p_bmu}, {"log_std", &log_std},
          {"v_w1", &v_w1.a},   {"v_b1", &v_b1},   {"v_w2", &v_w2.a}, {"v_b2", &v_b2},
          {"v_w3", &v_w3},     {"v_b3", &v_b3}};
}

std::vector<std::pair<std::string, const std::vector<double>*>> PpoPolicy::tensors() const {
  return {{"p_w1", &p_w1.a},   {"p_b1", &p_b1},   {"p_w2", &p_w2.a}, {"p_b2", &p_b2},
          {"p_wmu", &p_wmu.a}, {"p_bmu", &p_bmu}, {"log_std", &log_std},
          {"v_w1", &v_w1.a},   {"v_b1", &v_b1},   {"v_w2", &v_w2.a}, {"v_b2", &v_b2},
          {"v_w3", &v_w3},     {"v_b3", &v_b3}};
}

std::size_t PpoPolicy::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : tensors()) n += v->size();
  return n;
}

namespace {

// out = tanh(w^T in + b), w laid out [in, out].
void affine_tanh(const Mat<double>& w, const std::vector<double>& b,
                 const std::vector<double>& in, std::vector<double>& out) {
  out.assign(b.size(), 0.0);
  for (std::int64_t j = 0; j < w.cols; ++j) out[static_cast<std::size_t>(j)] = b[j];
  for (std::int64_t i = 0; i < w.rows; ++i) {
    const double xi = in[static_cast<std::size_t>(i)];
    const double* wr = w.row(i);
    for (std::int64_t j = 0; j < w.cols; ++j) out[static_cast<std::size_t>(j)] += xi * wr[j];
  }
  for (auto& v : out) v = std::tanh(v);
}

// Adjoint of affine_tanh. dout holds the post-activation adjoint; din is
// accumulated when nonnull.
void affine_tanh_backward(const Mat<double>& w, const std::vector<double>& in,
                          const std::vector<double>& out, const std::vector<double>& dout,
                          std::vector<double>& dw, std::vector<double>& db,
                          std::vector<double>* din) {
  std::vector<double> da(out.size());
  for (std::size_t j = 0; j < out.size(); ++j) da[j] = dout[j] * (1.0 - out[j] * out[j]);
  for (std::size_t j = 0; j < out.size(); ++j) db[j] += da[j];
  for (std::int64_t i = 0; i < w.rows; ++i) {
    const double xi = in[static_cast<std::size_t>(i)];
    double* dwr = dw.data() + i * w.cols;
    for (std::int64_t j = 0; j < w.cols; ++j) dwr[j] += xi * da[static_cast<std::size_t>(j)];
  }
  if (din) {
    for (std::int64_t i = 0; i < w.rows; ++i) {
      const double* wr = w.row(i);
      double acc = 0.0;
      for (std::int64_t j = 0; j < w.cols; ++j) acc += wr[j] * da[static_cast<std::size_t>(j)];
      (*din)[static_cast<std::size_t>(i)] += acc;
    }
  }
}

struct PolicyCache {
  std::vector<double> h1, h2, mu;
};

void policy_forward_cached(const PpoPolicy& n, const std::vector<double>& s, PolicyCache& c) {
  affine_tanh(n.p_w1, n.p_b1, s, c.h1);
  affine_tanh(n.p_w2, n.p_b2, c.h1, c.h2);
  c.mu.assign(n.p_bmu.begin(), n.p_bmu.end());
  for (std::int64_t i = 0; i < n.p_wmu.rows; ++i) {
    const double hi = c.h2[static_cast<std::size_t>(i)];
    const double* wr = n.p_wmu.row(i);
    for (std::int64_t j = 0; j < n.p_wmu.cols; ++j) c.mu[static_cast<std::size_t>(j)] += hi * wr[j];
  }
}

struct ValueCache {
  std::vector<double> g1, g2;
  double v = 0.0;
};

void value_forward_cached(const PpoPolicy& n, const std::vector<double>& s, ValueCache& c) {
  affine_tanh(n.v_w1, n.v_b1, s, c.g1);
  affine_tanh(n.v_w2, n.v_b2, c.g1, c.g2);
  double v = n.v_b3[0];
  for (std::size_t i = 0; i < c.g2.size(); ++i) v += n.v_w3[i] * c.g2[i];
  c.v = v;
}

}  // namespace

void policy_forward(const PpoPolicy& net, const std::vector<double>& state,
                    std::vector<double>& mu) {
  if (static_cast<std::int64_t>(state.size()) != kPolicyStateDim)
    throw std::invalid_argument("policy state has the wrong width");
  PolicyCache c;
  policy_forward_cached(net, state, c);
  mu = std::move(c.mu);
}

double value_forward(const PpoPolicy& net, const std::vector<double>& state) {
  if (static_cast<std::int64_t>(state.size()) != kPolicyStateDim)
    throw std::invalid_argument("policy state has the wrong width");
  ValueCache c;
  value_forward_cached(net, state, c);
  return c.v;
}

void PolicyConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("policy: hidden must be >= 1");
  if (!(clip_ratio >= 0.0)) throw std::invalid_argument("policy: clip ratio must be >= 0");
  if (!(discount > 0.0) || discount > 1.0)
    throw std::invalid_argument("policy: discount must lie in (0, 1]");
  if (!(gae_lambda >= 0.0) || gae_lambda > 1.0)
    throw std::invalid_argument("policy: gae lambda must lie in [0, 1]");
  if (epochs_per_batch < 1) throw std::invalid_argument("policy: epochs must be >= 1");
  if (batch_episodes < 1) throw std::invalid_argument("policy: batch must be >= 1");
  if (iterations < 1) throw std::invalid_argument("policy: iterations must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("policy: lr must be > 0");
  if (episode.adjustments < 1)
    throw std::invalid_argument("policy: training episodes need at least one adjustment");
  episode.validate();
}

void compute_advantages(std::vector<PpoStep>& episode, double discount, double lambda) {
  double gae = 0.0, next_v = 0.0;
  for (std::size_t i = episode.size(); i-- > 0;) {
    PpoStep& st = episode[i];
    const double delta = st.reward + discount * next_v - st.value;
    gae = delta + discount * lambda * gae;
    st.advantage = gae;
    st.ret = st.advantage + st.value;
    next_v = st.value;
  }
}

PpoUpdateStats PpoUpdater::update(PpoPolicy& net, const std::vector<PpoStep>& steps,
                                  const PolicyConfig& cfg) {
  PpoUpdateStats stats;
  if (steps.empty()) return stats;
  auto params = net.tensors();
  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    grads[i].assign(params[i].second->size(), 0.0);
  // Named views into the gradient store, ordered as tensors().
  auto& g_pw1 = grads[0];
  auto& g_pb1 = grads[1];
  auto& g_pw2 = grads[2];
  auto& g_pb2 = grads[3];
  auto& g_pwmu = grads[4];
  auto& g_pbmu = grads[5];
  auto& g_ls = grads[6];
  auto& g_vw1 = grads[7];
  auto& g_vb1 = grads[8];
  auto& g_vw2 = grads[9];
  auto& g_vb2 = grads[10];
  auto& g_vw3 = grads[11];
  auto& g_vb3 = grads[12];

  const double inv_n = 1.0 / static_cast<double>(steps.size());
  const double eps = cfg.clip_ratio;

  for (const PpoStep& st : steps) {
    PolicyCache pc;
    policy_forward_cached(net, st.state, pc);
    const std::size_t n_act = st.raw.size();

    double logp = 0.0;
    std::vector<double> z(n_act);
    for (std::size_t j = 0; j < n_act; ++j) {
      const double sd = std::exp(net.log_std[j]);
      z[j] = (st.raw[j] - pc.mu[j]) / sd;
      logp += -0.5 * z[j] * z[j] - net.log_std[j] - kHalfLog2Pi;
    }
    const double ratio = std::exp(logp - st.logp);
    const double a = st.advantage;
    const double ru = ratio * a;
    const double rc = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * a;
    stats.policy_loss += -std::min(ru, rc) * inv_n;
    stats.mean_ratio += ratio * inv_n;
    if (ratio < 1.0 - eps || ratio > 1.0 + eps) stats.clip_fraction += inv_n;

    // Ties route to the clipped branch, whose saturated regions carry no
    // gradient; inside the trust region both branches agree exactly.
    double dsurr_dlogp;
    if (ru < rc) {
      dsurr_dlogp = ru;
    } else {
      const bool inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
      dsurr_dlogp = inside ? ru : 0.0;
    }
    const double dlogp = -dsurr_dlogp * inv_n;

    if (dlogp != 0.0) {
      std::vector<double> dmu(static_cast<std::size_t>(kPolicyActionDim), 0.0);
      for (std::size_t j = 0; j < n_act; ++j) {
        const double sd = std::exp(net.log_std[j]);
        dmu[j] = dlogp * z[j] / sd;
        g_ls[j] += dlogp * (z[j] * z[j] - 1.0);
      }
      // Mean head, then the trunk.
      std::vector<double> dh2(pc.h2.size(), 0.0);
      for (std::int64_t i = 0; i < net.p_wmu.rows; ++i) {
        const double hi = pc.h2[static_cast<std::size_t>(i)];
        double* dwr = g_pwmu.data() + i * net.p_wmu.cols;
        const double* wr = net.p_wmu.row(i);
        double acc = 0.0;
        for (std::int64_t j = 0; j < net.p_wmu.cols; ++j) {
          dwr[j] += hi * dmu[static_cast<std::size_t>(j)];
          acc += wr[j] * dmu[static_cast<std::size_t>(j)];
        }
        dh2[static_cast<std::size_t>(i)] += acc;
      }
      for (std::size_t j = 0; j < dmu.size(); ++j) g_pbmu[j] += dmu[j];
      std::vector<double> dh1(pc.h1.size(), 0.0);
      affine_tanh_backward(net.p_w2, pc.h1, pc.h2, dh2, g_pw2, g_pb2, &dh1);
      affine_tanh_backward(net.p_w1, st.state, pc.h1, dh1, g_pw1, g_pb1, nullptr);
    }

    ValueCache vc;
    value_forward_cached(net, st.state, vc);
    const double verr = vc.v - st.ret;
    stats.value_loss += 0.5 * verr * verr * inv_n;
    const double dv = verr * inv_n;
    std::vector<double> dg2(vc.g2.size());
    for (std::size_t i = 0; i < vc.g2.size(); ++i) {
      g_vw3[i] += dv * vc.g2[i];
      dg2[i] = dv * net.v_w3[i];
    }
    g_vb3[0] += dv;
    std::vector<double> dg1(vc.g1.size(), 0.0);
    affine_tanh_backward(net.v_w2, vc.g1, vc.g2, dg2, g_vw2, g_vb2, &dg1);
    affine_tanh_backward(net.v_w1, st.state, vc.g1, dg1, g_vw1, g_vb1, nullptr);
  }

  // Adam step over every tensor with a shared timestep.
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].second->size(), 0.0);
      v_[i].assign(params[i].second->size(), 0.0);
    }
  }
  ++t_;
  const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i][j];
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g;
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g * g;
      p[j] -= cfg.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + aeps);
    }
  }
  return stats;
}

AdjustPolicy policy_adapter(const PpoPolicy& net, bool deterministic, std::uint64_t seed) {
  auto net_copy = std::make_shared<PpoPolicy>(net);
  auto rng = std::make_shared<std::mt19937_64>(seed ^ 0xbb67ae8584caa73bull);
  return [net_copy, rng, deterministic](const PlanProblem& p,
                                        const std::vector<ObjectiveComponent>& params,
                                        const PlanReport& report) {
    const auto state = policy_features(p, params, report);
    std::vector<double> mu;
    policy_forward(*net_copy, state, mu);
    AdjustmentAction a;
    a.weight_factor.resize(params.size());
    a.limit_factor.resize(params.size());
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t k = 0; k < params.size(); ++k) {
      double rw = mu[2 * k], rl = mu[2 * k + 1];
      if (!deterministic) {
        rw += std::exp(net_copy->log_std[2 * k]) * n01(*rng);
        rl += std::exp(net_copy->log_std[2 * k + 1]) * n01(*rng);
      }
      a.weight_factor[k] = factor_from_raw(rw);
      a.limit_factor[k] = factor_from_raw(rl);
    }
    return a;
  };
}

PpoTrainResult ppo_train(const std::vector<PlanProblem>& problems,
                         const ClinicalGoalTable& goals, const PolicyConfig& cfg, Exec e) {
  cfg.validate();
  if (problems.empty()) throw std::invalid_argument("ppo_train: no problems");

  PpoTrainResult out;
  out.policy = PpoPolicy::init(cfg.hidden, cfg.init_log_std, cfg.seed);
  PpoPolicy& net = out.policy;
  PpoUpdater updater;
  std::mt19937_64 rng(cfg.seed ^ 0xda3e39cb94b95bdbull);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::size_t next_problem = 0;

  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    std::vector<PpoStep> batch;
    double reward_sum = 0.0, best_sum = 0.0;
    std::int64_t n_rewards = 0;

    for (int b = 0; b < cfg.batch_episodes; ++b) {
      const PlanProblem& p = problems[next_problem++ % problems.size()];
      std::vector<PpoStep> ep;
      AdjustPolicy collector = [&](const PlanProblem& wp,
                                   const std::vector<ObjectiveComponent>& params,
                                   const PlanReport& report) {
        PpoStep st;
        st.state = policy_features(wp, params, report);
        PolicyCache pc;
        policy_forward_cached(net, st.state, pc);
        ValueCache vc;
        value_forward_cached(net, st.state, vc);
        st.value = vc.v;
        const std::size_t n_act = 2 * params.size();
        st.raw.resize(n_act);
        st.logp = 0.0;
        for (std::size_t j = 0; j < n_act; ++j) {
          const double sd = std::exp(net.log_std[j]);
          st.raw[j] = pc.mu[j] + sd * n01(rng);
          const double zj = (st.raw[j] - pc.mu[j]) / sd;
          st.logp += -0.5 * zj * zj - net.log_std[j] - kHalfLog2Pi;
        }
        AdjustmentAction a;
        a.weight_factor.resize(params.size());
        a.limit_factor.resize(params.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
          a.weight_factor[k] = factor_from_raw(st.raw[2 * k]);
          a.limit_factor[k] = factor_from_raw(st.raw[2 * k + 1]);
        }
        ep.push_back(std::move(st));
        return a;
      };
      const EpisodeRecord rec = run_episode(p, collector, goals, cfg.episode, e);
      for (std::size_t t = 0; t < ep.size(); ++t) {
        ep[t].reward = rec.rounds[t + 1].reward;
        reward_sum += ep[t].reward;
        ++n_rewards;
      }
      best_sum += rec.best_score();
      compute_advantages(ep, cfg.discount, cfg.gae_lambda);
      for (auto& st : ep) batch.push_back(std::move(st));
    }

    const double mean_reward =
        n_rewards > 0 ? reward_sum / static_cast<double>(n_rewards) : 0.0;
    if (!std::isfinite(mean_reward))
      throw std::runtime_error("policy training diverged: non-finite reward at iteration " +
                               std::to_string(it));

    // Batch-normalized advantages.
    double am = 0.0;
    for (const auto& st : batch) am += st.advantage;
    am /= static_cast<double>(batch.size());
    double av = 0.0;
    for (const auto& st : batch) av += (st.advantage - am) * (st.advantage - am);
    const double asd = std::sqrt(av / static_cast<double>(batch.size())) + 1e-8;
    for (auto& st : batch) st.advantage = (st.advantage - am) / asd;

    PpoUpdateStats stats;
    for (int ep_i = 0; ep_i < cfg.epochs_per_batch; ++ep_i)
      stats = updater.update(net, batch, cfg);

    out.log.push_back({it, mean_reward, best_sum / static_cast<double>(cfg.batch_episodes),
                       stats.policy_loss, stats.value_loss});
  }
  return out;
}

void save_policy(const PpoPolicy& net, const std::string& path) {
  json header;
  header["version"] = kPolicyVersion;
  header["dtype"] = "f64";
  header["hidden"] = net.hidden;
  json manifest = json::array();
  std::uint64_t offset = 0;
  const auto ts = net.tensors();
  for (const auto& [name, v] : ts) {
    manifest.push_back({{"name", name}, {"count", v->size()}, {"offset", offset}});
    offset += v->size();
  }
  header["tensors"] = manifest;
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write policy: " + path);
  const std::uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [name, v] : ts)
    out.write(reinterpret_cast<const char*>(v->data()),
              static_cast<std::streamsize>(v->size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write: " + path);
}

PpoPolicy load_policy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read policy: " + path);
  std::uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  if (!in || head_len > (1u << 20)) throw std::runtime_error("corrupt policy header");
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw std::runtime_error("corrupt policy header");
  const json header = json::parse(head);
  if (header.at("version").get<std::string>() != kPolicyVersion)
    throw std::runtime_error("unsupported policy version");

  PpoPolicy net = PpoPolicy::init(header.at("hidden").get<std::int64_t>(), 0.0, 0);
  auto ts = net.tensors();
  const auto& manifest = header.at("tensors");
  if (manifest.size() != ts.size()) throw std::runtime_error("policy tensor list mismatch");
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (manifest[i].at("name").get<std::string>() != ts[i].first)
      throw std::runtime_error("policy tensor order mismatch");
    if (manifest[i].at("count").get<std::uint64_t>() != ts[i].second->size())
      throw std::runtime_error("policy tensor size mismatch");
    in.read(reinterpret_cast<char*>(ts[i].second->data()),
            static_cast<std::streamsize>(ts[i].second->size() * sizeof(double)));
  }
  if (!in) throw std::runtime_error("truncated policy file");
  return net;
}

}  // namespace spotopt
