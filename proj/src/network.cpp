#include "spotopt/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

#include "nlohmann/json.hpp"

namespace spotopt {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint files store little-endian floats");

void L2OConfig::validate() const {
  if (k_slots < 1 || hidden < 1 || layers < 1 || intermediate < 1 || max_spots < 1)
    throw std::invalid_argument("network config: dimensions must be positive");
  if (q_heads < 1 || kv_heads < 1 || head_dim < 1)
    throw std::invalid_argument("network config: head counts must be positive");
  if (q_heads % kv_heads != 0)
    throw std::invalid_argument("network config: q_heads must be a multiple of kv_heads");
  if (hidden != q_heads * head_dim)
    throw std::invalid_argument("network config: hidden must equal q_heads * head_dim");
  if (!(rope_base > 0) || !(norm_eps > 0))
    throw std::invalid_argument("network config: rope_base and norm_eps must be positive");
}

// ---------------------------------------------------------------------------
// scalar helpers

// Branch-light exponential. The float variant is a polynomial with exact
// range reduction so attention inner loops vectorize; the double variant
// defers to libm and is the reference semantics for tight-tolerance tests.
static inline double fast_exp(double x) { return std::exp(x); }

static inline float fast_exp(float x) {
  x = x < -87.0f ? -87.0f : (x > 88.0f ? 88.0f : x);
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  float r = std::fmaf(n, -0.693359375f, x);
  r = std::fmaf(n, 2.12194440e-4f, r);
  float p = 1.9875691500e-4f;
  p = std::fmaf(p, r, 1.3981999507e-3f);
  p = std::fmaf(p, r, 8.3334519073e-3f);
  p = std::fmaf(p, r, 4.1665795894e-2f);
  p = std::fmaf(p, r, 1.6666665459e-1f);
  p = std::fmaf(p, r, 5.0000001201e-1f);
  const float er = std::fmaf(r * r, p, r) + 1.0f;
  const std::uint32_t bits = static_cast<std::uint32_t>(127 + static_cast<int>(n)) << 23;
  return er * std::bit_cast<float>(bits);
}

template <class T>
static inline T sigmoid(T x) {
  return T(1) / (T(1) + fast_exp(-x));
}

// ---------------------------------------------------------------------------
// parameters

template <class T>
static void resize_params(L2OParams<T>& p, const L2OConfig& c) {
  c.validate();
  p.cfg = c;
  p.w_in = Mat<T>(c.feature_dim(), c.hidden);
  p.w_rec = Mat<T>(c.hidden, c.hidden);
  p.layers.assign(static_cast<std::size_t>(c.layers), {});
  for (auto& l : p.layers) {
    l.w_q = Mat<T>(c.hidden, c.hidden);
    l.w_k = Mat<T>(c.hidden, c.kv_dim());
    l.w_v = Mat<T>(c.hidden, c.kv_dim());
    l.w_o = Mat<T>(c.hidden, c.hidden);
    l.w_gate = Mat<T>(c.hidden, c.intermediate);
    l.w_up = Mat<T>(c.hidden, c.intermediate);
    l.w_down = Mat<T>(c.intermediate, c.hidden);
    l.ln1.assign(static_cast<std::size_t>(c.hidden), T(0));
    l.ln2.assign(static_cast<std::size_t>(c.hidden), T(0));
  }
  p.final_norm.assign(static_cast<std::size_t>(c.hidden), T(0));
  p.w_head.assign(static_cast<std::size_t>(c.hidden), T(0));
  p.step_scale.assign(1, T(0));
}

template <class T>
void L2OParams<T>::zero_like(const L2OConfig& c) {
  resize_params(*this, c);
}

template <class T>
void L2OParams<T>::init(const L2OConfig& c, std::uint64_t seed) {
  resize_params(*this, c);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](std::vector<T>& v, double std) {
    std::normal_distribution<double> dist(0.0, std);
    for (auto& x : v) x = static_cast<T>(dist(rng));
  };
  const double base_std = 0.02;
  // Residual-feeding projections are damped with depth to keep the stream
  // near unit scale at initialization.
  const double out_std = base_std / std::sqrt(2.0 * static_cast<double>(c.layers));
  fill(w_in.a, base_std);
  fill(w_rec.a, base_std);
  for (auto& l : layers) {
    fill(l.w_q.a, base_std);
    fill(l.w_k.a, base_std);
    fill(l.w_v.a, base_std);
    fill(l.w_o.a, out_std);
    fill(l.w_gate.a, base_std);
    fill(l.w_up.a, base_std);
    fill(l.w_down.a, out_std);
    l.ln1.assign(l.ln1.size(), T(1));
    l.ln2.assign(l.ln2.size(), T(1));
  }
  final_norm.assign(final_norm.size(), T(1));
  // Zero head plus a small step scale: the untrained network proposes
  // near-zero updates instead of scrambling the iterate.
  w_head.assign(w_head.size(), T(0));
  step_scale.assign(1, T(0.01));
}

template <class T>
std::vector<std::pair<std::string, std::vector<T>*>> L2OParams<T>::tensors() {
  std::vector<std::pair<std::string, std::vector<T>*>> out;
  out.emplace_back("w_in", &w_in.a);
  out.emplace_back("w_rec", &w_rec.a);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "w_q", &layers[i].w_q.a);
    out.emplace_back(p + "w_k", &layers[i].w_k.a);
    out.emplace_back(p + "w_v", &layers[i].w_v.a);
    out.emplace_back(p + "w_o", &layers[i].w_o.a);
    out.emplace_back(p + "w_gate", &layers[i].w_gate.a);
    out.emplace_back(p + "w_up", &layers[i].w_up.a);
    out.emplace_back(p + "w_down", &layers[i].w_down.a);
    out.emplace_back(p + "ln1", &layers[i].ln1);
    out.emplace_back(p + "ln2", &layers[i].ln2);
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("w_head", &w_head);
  out.emplace_back("step_scale", &step_scale);
  return out;
}

template <class T>
std::vector<std::pair<std::string, const std::vector<T>*>> L2OParams<T>::tensors() const {
  auto mut = const_cast<L2OParams<T>*>(this)->tensors();
  std::vector<std::pair<std::string, const std::vector<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, v] : mut) out.emplace_back(name, v);
  return out;
}

template <class T>
std::size_t L2OParams<T>::param_count() const {
  std::size_t n = 0;
  for (auto& [name, v] : tensors()) n += v->size();
  return n;
}

// ---------------------------------------------------------------------------
// rotary positions

template <class T>
RopeTable<T> make_rope_table(const L2OConfig& cfg, std::int64_t n, std::int64_t pos0) {
  RopeTable<T> t;
  t.n = n;
  t.half = cfg.head_dim / 2;
  t.cs.resize(static_cast<std::size_t>(n * t.half));
  t.sn.resize(static_cast<std::size_t>(n * t.half));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < t.half; ++j) {
      const double freq =
          std::pow(cfg.rope_base, -2.0 * static_cast<double>(j) / static_cast<double>(cfg.head_dim));
      const double ang = static_cast<double>(pos0 + i) * freq;
      t.cs[static_cast<std::size_t>(i * t.half + j)] = static_cast<T>(std::cos(ang));
      t.sn[static_cast<std::size_t>(i * t.half + j)] = static_cast<T>(std::sin(ang));
    }
  }
  return t;
}

// Rotates adjacent pairs within each head; sign -1 applies the inverse
// rotation (used to pull gradients back through the rotation).
template <class T>
static void rope_with_table(Mat<T>& x, std::int64_t heads, std::int64_t head_dim,
                            const RopeTable<T>& table, T sign, Exec e) {
  const std::int64_t half = head_dim / 2;
  parallel_for(
      x.rows,
      [&](std::int64_t i) {
        const T* cs = table.cs.data() + i * half;
        const T* sn = table.sn.data() + i * half;
        T* row = x.row(i);
        for (std::int64_t h = 0; h < heads; ++h) {
          T* v = row + h * head_dim;
          for (std::int64_t j = 0; j < half; ++j) {
            const T c = cs[j], s = sign * sn[j];
            const T a = v[2 * j], b = v[2 * j + 1];
            v[2 * j] = a * c - b * s;
            v[2 * j + 1] = a * s + b * c;
          }
        }
      },
      e);
}

template <class T>
void apply_rope(Mat<T>& x, std::int64_t heads, std::int64_t head_dim, double base,
                std::int64_t pos0) {
  L2OConfig tmp;
  tmp.head_dim = head_dim;
  tmp.rope_base = base;
  const auto table = make_rope_table<T>(tmp, x.rows, pos0);
  rope_with_table(x, heads, head_dim, table, T(1), default_exec());
}

// ---------------------------------------------------------------------------
// rmsnorm

template <class T>
void rmsnorm(const Mat<T>& x, const std::vector<T>& gain, double eps, Mat<T>& y,
             std::vector<T>* rstd, Exec e) {
  const std::int64_t n = x.rows, h = x.cols;
  if (rstd) rstd->resize(static_cast<std::size_t>(n));
  parallel_for(
      n,
      [&](std::int64_t i) {
        const T* xi = x.row(i);
        T ms = 0;
        for (std::int64_t j = 0; j < h; ++j) ms += xi[j] * xi[j];
        const T r = T(1) / std::sqrt(ms / static_cast<T>(h) + static_cast<T>(eps));
        if (rstd) (*rstd)[static_cast<std::size_t>(i)] = r;
        T* yi = y.row(i);
        for (std::int64_t j = 0; j < h; ++j) yi[j] = xi[j] * r * gain[static_cast<std::size_t>(j)];
      },
      e);
}

// dx = r g dy - (r^3 / h) (sum_j dy_j g_j x_j) x ; dgain += sum_rows dy x r.
// The gain reduction runs serially in row order so results do not depend on
// the thread count.
template <class T>
static void rmsnorm_backward(const Mat<T>& x, const std::vector<T>& gain,
                             const std::vector<T>& rstd, const Mat<T>& dy, Mat<T>& dx,
                             std::vector<T>& dgain, Exec e) {
  const std::int64_t n = x.rows, h = x.cols;
  parallel_for(
      n,
      [&](std::int64_t i) {
        const T* xi = x.row(i);
        const T* dyi = dy.row(i);
        const T r = rstd[static_cast<std::size_t>(i)];
        T c = 0;
        for (std::int64_t j = 0; j < h; ++j) c += dyi[j] * gain[static_cast<std::size_t>(j)] * xi[j];
        const T k = r * r * r * c / static_cast<T>(h);
        T* dxi = dx.row(i);
        for (std::int64_t j = 0; j < h; ++j)
          dxi[j] = r * gain[static_cast<std::size_t>(j)] * dyi[j] - k * xi[j];
      },
      e);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xi = x.row(i);
    const T* dyi = dy.row(i);
    const T r = rstd[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < h; ++j) dgain[static_cast<std::size_t>(j)] += dyi[j] * xi[j] * r;
  }
}

// y = x * rstd * gain recomputed from cached statistics.
template <class T>
static Mat<T> recompute_norm(const Mat<T>& x, const std::vector<T>& gain,
                             const std::vector<T>& rstd, Exec e) {
  Mat<T> y(x.rows, x.cols);
  parallel_for(
      x.rows,
      [&](std::int64_t i) {
        const T r = rstd[static_cast<std::size_t>(i)];
        const T* xi = x.row(i);
        T* yi = y.row(i);
        for (std::int64_t j = 0; j < x.cols; ++j) yi[j] = xi[j] * r * gain[static_cast<std::size_t>(j)];
      },
      e);
  return y;
}

// ---------------------------------------------------------------------------
// attention

template <class T>
static void copy_head(const Mat<T>& src, std::int64_t head, std::int64_t d, Mat<T>& dst) {
  for (std::int64_t i = 0; i < src.rows; ++i)
    std::memcpy(dst.row(i), src.row(i) + head * d, static_cast<std::size_t>(d) * sizeof(T));
}

template <class T>
void attention_gqa(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, std::int64_t q_heads,
                   std::int64_t kv_heads, std::int64_t head_dim, Mat<T>& out, AttentionMode mode,
                   Mat<T>* row_max, Mat<T>* row_denom, Exec e) {
  const std::int64_t n = q.rows, d = head_dim;
  const std::int64_t group = q_heads / kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  std::vector<Mat<T>> qh(static_cast<std::size_t>(q_heads));
  std::vector<Mat<T>> kh(static_cast<std::size_t>(kv_heads)), vh(static_cast<std::size_t>(kv_heads));
  for (std::int64_t h = 0; h < q_heads; ++h) {
    qh[static_cast<std::size_t>(h)] = Mat<T>(n, d);
    copy_head(q, h, d, qh[static_cast<std::size_t>(h)]);
  }
  for (std::int64_t g = 0; g < kv_heads; ++g) {
    kh[static_cast<std::size_t>(g)] = Mat<T>(n, d);
    vh[static_cast<std::size_t>(g)] = Mat<T>(n, d);
    copy_head(k, g, d, kh[static_cast<std::size_t>(g)]);
    copy_head(v, g, d, vh[static_cast<std::size_t>(g)]);
  }

  if (mode == AttentionMode::reference) {
    // Full score matrix per head with a two-pass softmax.
    parallel_for(
        q_heads,
        [&](std::int64_t h) {
          const std::int64_t g = h / group;
          const Mat<T>& Q = qh[static_cast<std::size_t>(h)];
          const Mat<T>& K = kh[static_cast<std::size_t>(g)];
          const Mat<T>& V = vh[static_cast<std::size_t>(g)];
          Mat<T> s(n, n);
          gemm_nt(Q, K, s, false, Exec::serial);
          for (std::int64_t i = 0; i < n; ++i) {
            T* si = s.row(i);
            T m = si[0] * scale;
            for (std::int64_t j = 0; j < n; ++j) {
              si[j] *= scale;
              if (si[j] > m) m = si[j];
            }
            T l = 0;
            for (std::int64_t j = 0; j < n; ++j) {
              si[j] = fast_exp(si[j] - m);
              l += si[j];
            }
            const T inv = T(1) / l;
            for (std::int64_t j = 0; j < n; ++j) si[j] *= inv;
            if (row_max) row_max->at(h, i) = m;
            if (row_denom) row_denom->at(h, i) = l;
          }
          Mat<T> o(n, d);
          gemm_nn(s, V, o, false, Exec::serial);
          for (std::int64_t i = 0; i < n; ++i)
            std::memcpy(out.row(i) + h * d, o.row(i), static_cast<std::size_t>(d) * sizeof(T));
        },
        e);
    return;
  }

  // Streaming softmax over key tiles: O(tile) scratch instead of O(n^2).
  // Keys are transposed per tile so score accumulation runs unit stride.
  constexpr std::int64_t kQBlock = 64, kKBlock = 256;
  const std::int64_t nqb = (n + kQBlock - 1) / kQBlock;
  std::vector<Mat<T>> kt(static_cast<std::size_t>(kv_heads));
  for (std::int64_t g = 0; g < kv_heads; ++g) {
    kt[static_cast<std::size_t>(g)] = Mat<T>(d, n);
    const Mat<T>& K = kh[static_cast<std::size_t>(g)];
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < d; ++c) kt[static_cast<std::size_t>(g)].at(c, j) = K.at(j, c);
  }
  parallel_for(
      q_heads * nqb,
      [&](std::int64_t work) {
        const std::int64_t h = work / nqb;
        const std::int64_t qb = work % nqb;
        const std::int64_t g = h / group;
        const Mat<T>& Q = qh[static_cast<std::size_t>(h)];
        const Mat<T>& KT = kt[static_cast<std::size_t>(g)];
        const Mat<T>& V = vh[static_cast<std::size_t>(g)];
        const std::int64_t i0 = qb * kQBlock;
        const std::int64_t i1 = std::min(n, i0 + kQBlock);
        const std::int64_t nb = i1 - i0;
        std::vector<T> m(static_cast<std::size_t>(nb), T(0));
        std::vector<T> l(static_cast<std::size_t>(nb), T(0));
        std::vector<T> acc(static_cast<std::size_t>(nb * d), T(0));
        std::vector<T> s(static_cast<std::size_t>(kKBlock), T(0));
        bool first = true;
        for (std::int64_t j0 = 0; j0 < n; j0 += kKBlock) {
          const std::int64_t j1 = std::min(n, j0 + kKBlock);
          const std::int64_t jb = j1 - j0;
          for (std::int64_t i = i0; i < i1; ++i) {
            const T* qp = Q.row(i);
            T* sp = s.data();
            for (std::int64_t j = 0; j < jb; ++j) sp[j] = 0;
            for (std::int64_t c = 0; c < d; ++c) {
              const T qc = qp[c];
              const T* krow = KT.row(c) + j0;
              for (std::int64_t j = 0; j < jb; ++j) sp[j] += qc * krow[j];
            }
            T tile_max = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < jb; ++j) {
              sp[j] *= scale;
              if (sp[j] > tile_max) tile_max = sp[j];
            }
            const std::size_t li = static_cast<std::size_t>(i - i0);
            T* ai = acc.data() + (i - i0) * d;
            T m_new = first ? tile_max : (tile_max > m[li] ? tile_max : m[li]);
            if (!first && m_new != m[li]) {
              const T f = fast_exp(m[li] - m_new);
              l[li] *= f;
              for (std::int64_t c = 0; c < d; ++c) ai[c] *= f;
            }
            m[li] = m_new;
            for (std::int64_t j = 0; j < jb; ++j) sp[j] = fast_exp(sp[j] - m_new);
            T lsum = 0;
            for (std::int64_t j = 0; j < jb; ++j) lsum += sp[j];
            l[li] += lsum;
            for (std::int64_t j = 0; j < jb; ++j) {
              const T w = sp[j];
              const T* vp = V.row(j0 + j);
              for (std::int64_t c = 0; c < d; ++c) ai[c] += w * vp[c];
            }
          }
          first = false;
        }
        for (std::int64_t i = i0; i < i1; ++i) {
          const std::size_t li = static_cast<std::size_t>(i - i0);
          const T inv = T(1) / l[li];
          T* dst = out.row(i) + h * d;
          const T* ai = acc.data() + (i - i0) * d;
          for (std::int64_t c = 0; c < d; ++c) dst[c] = ai[c] * inv;
          if (row_max) row_max->at(h, i) = m[li];
          if (row_denom) row_denom->at(h, i) = l[li];
        }
      },
      e);
}

// Reverse pass for one attention call. Scores are rebuilt from the cached
// q/k and the stored softmax statistics. dk/dv partials are kept per query
// head and folded in ascending head order, which keeps the result identical
// across thread counts.
template <class T>
static void attention_backward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                               std::int64_t q_heads, std::int64_t kv_heads, std::int64_t head_dim,
                               const Mat<T>& row_max, const Mat<T>& row_denom, const Mat<T>& d_out,
                               Mat<T>& dq, Mat<T>& dk, Mat<T>& dv, Exec e) {
  const std::int64_t n = q.rows, d = head_dim;
  const std::int64_t group = q_heads / kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  std::vector<Mat<T>> dk_part(static_cast<std::size_t>(q_heads));
  std::vector<Mat<T>> dv_part(static_cast<std::size_t>(q_heads));
  parallel_for(
      q_heads,
      [&](std::int64_t h) {
        const std::int64_t g = h / group;
        Mat<T> Q(n, d), K(n, d), V(n, d), dO(n, d);
        copy_head(q, h, d, Q);
        copy_head(k, g, d, K);
        copy_head(v, g, d, V);
        copy_head(d_out, h, d, dO);

        Mat<T> p(n, n);
        gemm_nt(Q, K, p, false, Exec::serial);
        for (std::int64_t i = 0; i < n; ++i) {
          T* pi = p.row(i);
          const T m = row_max.at(h, i);
          const T inv = T(1) / row_denom.at(h, i);
          for (std::int64_t j = 0; j < n; ++j) pi[j] = fast_exp(pi[j] * scale - m) * inv;
        }

        Mat<T>& dvp = dv_part[static_cast<std::size_t>(h)];
        dvp = Mat<T>(n, d);
        gemm_tn(p, dO, dvp, false, Exec::serial);

        Mat<T> dp(n, n);
        gemm_nt(dO, V, dp, false, Exec::serial);
        for (std::int64_t i = 0; i < n; ++i) {
          T* pi = p.row(i);
          T* dpi = dp.row(i);
          T rd = 0;
          for (std::int64_t j = 0; j < n; ++j) rd += dpi[j] * pi[j];
          for (std::int64_t j = 0; j < n; ++j) pi[j] = pi[j] * (dpi[j] - rd) * scale;
        }
        // p now holds d(scores).
        Mat<T> dqh(n, d);
        gemm_nn(p, K, dqh, false, Exec::serial);
        for (std::int64_t i = 0; i < n; ++i)
          std::memcpy(dq.row(i) + h * d, dqh.row(i), static_cast<std::size_t>(d) * sizeof(T));
        Mat<T>& dkp = dk_part[static_cast<std::size_t>(h)];
        dkp = Mat<T>(n, d);
        gemm_tn(p, Q, dkp, false, Exec::serial);
      },
      e);

  dk.zero();
  dv.zero();
  for (std::int64_t h = 0; h < q_heads; ++h) {
    const std::int64_t g = h / group;
    const Mat<T>& dkp = dk_part[static_cast<std::size_t>(h)];
    const Mat<T>& dvp = dv_part[static_cast<std::size_t>(h)];
    for (std::int64_t i = 0; i < n; ++i) {
      T* dki = dk.row(i) + g * d;
      T* dvi = dv.row(i) + g * d;
      const T* a = dkp.row(i);
      const T* b = dvp.row(i);
      for (std::int64_t c = 0; c < d; ++c) {
        dki[c] += a[c];
        dvi[c] += b[c];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// full forward / backward

template <class T>
void l2o_forward(const L2OParams<T>& params, const Mat<T>& features,
                 const std::type_identity_t<Mat<T>>* h_prev, Mat<T>& h_out, std::vector<T>& steps,
                 std::type_identity_t<L2OCache<T>>* cache, AttentionMode mode,
                 const std::type_identity_t<RopeTable<T>>* rope, Exec e) {
  const L2OConfig& c = params.cfg;
  const std::int64_t n = features.rows;
  if (features.cols != c.feature_dim())
    throw std::invalid_argument("l2o_forward: feature width mismatch");
  if (n > c.max_spots) throw std::invalid_argument("l2o_forward: too many rows");
  if (h_prev && (h_prev->rows != n || h_prev->cols != c.hidden))
    throw std::invalid_argument("l2o_forward: recurrent state shape mismatch");

  RopeTable<T> local_rope;
  if (!rope || rope->n < n) {
    local_rope = make_rope_table<T>(c, n);
    rope = &local_rope;
  }

  Mat<T> x(n, c.hidden);
  gemm_nn(features, params.w_in, x, false, e);
  if (h_prev) gemm_nn(*h_prev, params.w_rec, x, true, e);

  if (cache) {
    cache->features = features;
    if (h_prev) {
      cache->h_prev = *h_prev;
    } else {
      cache->h_prev = Mat<T>(n, c.hidden);
      cache->h_prev.zero();
    }
    cache->layers.assign(static_cast<std::size_t>(c.layers), {});
  }

  Mat<T> a(n, c.hidden);
  Mat<T> qm(n, c.hidden), km(n, c.kv_dim()), vm(n, c.kv_dim());
  Mat<T> concat(n, c.hidden);
  Mat<T> gate(n, c.intermediate), up(n, c.intermediate), ff(n, c.intermediate);
  std::vector<T> rstd;

  for (std::int64_t li = 0; li < c.layers; ++li) {
    const LayerParams<T>& L = params.layers[static_cast<std::size_t>(li)];
    LayerCache<T>* lc = cache ? &cache->layers[static_cast<std::size_t>(li)] : nullptr;
    if (lc) lc->x_in = x;

    rmsnorm(x, L.ln1, c.norm_eps, a, &rstd, e);
    if (lc) lc->rstd1 = rstd;
    gemm_nn(a, L.w_q, qm, false, e);
    gemm_nn(a, L.w_k, km, false, e);
    gemm_nn(a, L.w_v, vm, false, e);
    rope_with_table(qm, c.q_heads, c.head_dim, *rope, T(1), e);
    rope_with_table(km, c.kv_heads, c.head_dim, *rope, T(1), e);
    if (lc) {
      lc->q = qm;
      lc->k = km;
      lc->v = vm;
      lc->row_max = Mat<T>(c.q_heads, n);
      lc->row_denom = Mat<T>(c.q_heads, n);
    }
    attention_gqa(qm, km, vm, c.q_heads, c.kv_heads, c.head_dim, concat, mode,
                  lc ? &lc->row_max : nullptr, lc ? &lc->row_denom : nullptr, e);
    if (lc) lc->attn_concat = concat;
    gemm_nn(concat, L.w_o, x, true, e);
    if (lc) lc->x_mid = x;

    rmsnorm(x, L.ln2, c.norm_eps, a, &rstd, e);
    if (lc) lc->rstd2 = rstd;
    gemm_nn(a, L.w_gate, gate, false, e);
    gemm_nn(a, L.w_up, up, false, e);
    if (lc) {
      lc->gate_pre = gate;
      lc->up_pre = up;
    }
    parallel_for(
        n,
        [&](std::int64_t i) {
          const T* gi = gate.row(i);
          const T* ui = up.row(i);
          T* fi = ff.row(i);
          for (std::int64_t j = 0; j < c.intermediate; ++j) fi[j] = gi[j] * sigmoid(gi[j]) * ui[j];
        },
        e);
    gemm_nn(ff, L.w_down, x, true, e);
  }

  if (cache) cache->x_final = x;
  h_out = Mat<T>(n, c.hidden);
  rmsnorm(x, params.final_norm, c.norm_eps, h_out, &rstd, e);
  if (cache) {
    cache->rstd_final = rstd;
    cache->h_out = h_out;
  }
  steps.assign(static_cast<std::size_t>(n), T(0));
  const T ss = params.step_scale[0];
  parallel_for(
      n,
      [&](std::int64_t i) {
        const T* hi = h_out.row(i);
        T dot = 0;
        for (std::int64_t j = 0; j < c.hidden; ++j) dot += hi[j] * params.w_head[static_cast<std::size_t>(j)];
        steps[static_cast<std::size_t>(i)] = ss * dot;
      },
      e);
}

template <class T>
void l2o_backward(const L2OParams<T>& params, const L2OCache<T>& cache,
                  const std::vector<T>& d_steps, const std::type_identity_t<Mat<T>>* d_h_out,
                  L2OParams<T>& grad, Mat<T>& d_features, std::type_identity_t<Mat<T>>* d_h_prev,
                  const std::type_identity_t<RopeTable<T>>* rope, Exec e) {
  const L2OConfig& c = params.cfg;
  const std::int64_t n = cache.features.rows;
  RopeTable<T> local_rope;
  if (!rope || rope->n < n) {
    local_rope = make_rope_table<T>(c, n);
    rope = &local_rope;
  }

  // Head: steps_i = step_scale * <h_i, w_head>.
  const T ss = params.step_scale[0];
  Mat<T> dh(n, c.hidden);
  T dss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* hi = cache.h_out.row(i);
    T dot = 0;
    for (std::int64_t j = 0; j < c.hidden; ++j) dot += hi[j] * params.w_head[static_cast<std::size_t>(j)];
    dss += d_steps[static_cast<std::size_t>(i)] * dot;
  }
  grad.step_scale[0] += dss;
  parallel_for(
      n,
      [&](std::int64_t i) {
        const T g = d_steps[static_cast<std::size_t>(i)] * ss;
        const T* ho = d_h_out ? d_h_out->row(i) : nullptr;
        T* di = dh.row(i);
        for (std::int64_t j = 0; j < c.hidden; ++j)
          di[j] = g * params.w_head[static_cast<std::size_t>(j)] + (ho ? ho[j] : T(0));
      },
      e);
  for (std::int64_t i = 0; i < n; ++i) {
    const T g = d_steps[static_cast<std::size_t>(i)] * ss;
    const T* hi = cache.h_out.row(i);
    for (std::int64_t j = 0; j < c.hidden; ++j) grad.w_head[static_cast<std::size_t>(j)] += g * hi[j];
  }

  Mat<T> dx(n, c.hidden);
  rmsnorm_backward(cache.x_final, params.final_norm, cache.rstd_final, dh, dx, grad.final_norm, e);

  Mat<T> da(n, c.hidden);
  Mat<T> dqm(n, c.hidden), dkm(n, c.kv_dim()), dvm(n, c.kv_dim());
  Mat<T> dconcat(n, c.hidden);
  Mat<T> dgate(n, c.intermediate), dup(n, c.intermediate), dff(n, c.intermediate), ff(n, c.intermediate);
  Mat<T> dnorm(n, c.hidden);

  for (std::int64_t li = c.layers - 1; li >= 0; --li) {
    const LayerParams<T>& L = params.layers[static_cast<std::size_t>(li)];
    LayerParams<T>& G = grad.layers[static_cast<std::size_t>(li)];
    const LayerCache<T>& lc = cache.layers[static_cast<std::size_t>(li)];

    // Feed-forward block backward. dx holds the gradient at the block output.
    parallel_for(
        n,
        [&](std::int64_t i) {
          const T* gi = lc.gate_pre.row(i);
          const T* ui = lc.up_pre.row(i);
          T* fi = ff.row(i);
          for (std::int64_t j = 0; j < c.intermediate; ++j) fi[j] = gi[j] * sigmoid(gi[j]) * ui[j];
        },
        e);
    gemm_tn(ff, dx, G.w_down, true, e);
    gemm_nt(dx, L.w_down, dff, false, e);
    parallel_for(
        n,
        [&](std::int64_t i) {
          const T* gi = lc.gate_pre.row(i);
          const T* ui = lc.up_pre.row(i);
          const T* dfi = dff.row(i);
          T* dgi = dgate.row(i);
          T* dui = dup.row(i);
          for (std::int64_t j = 0; j < c.intermediate; ++j) {
            const T sg = sigmoid(gi[j]);
            const T silu = gi[j] * sg;
            dui[j] = dfi[j] * silu;
            dgi[j] = dfi[j] * ui[j] * sg * (T(1) + gi[j] * (T(1) - sg));
          }
        },
        e);
    {
      const Mat<T> a2 = recompute_norm(lc.x_mid, L.ln2, lc.rstd2, e);
      gemm_tn(a2, dgate, G.w_gate, true, e);
      gemm_tn(a2, dup, G.w_up, true, e);
    }
    gemm_nt(dgate, L.w_gate, da, false, e);
    gemm_nt(dup, L.w_up, da, true, e);
    rmsnorm_backward(lc.x_mid, L.ln2, lc.rstd2, da, dnorm, G.ln2, e);
    parallel_for(
        n,
        [&](std::int64_t i) {
          T* dxi = dx.row(i);
          const T* dni = dnorm.row(i);
          for (std::int64_t j = 0; j < c.hidden; ++j) dxi[j] += dni[j];
        },
        e);

    // Attention block backward. dx now holds the gradient at x_mid.
    gemm_nt(dx, L.w_o, dconcat, false, e);
    gemm_tn(lc.attn_concat, dx, G.w_o, true, e);
    attention_backward(lc.q, lc.k, lc.v, c.q_heads, c.kv_heads, c.head_dim, lc.row_max,
                       lc.row_denom, dconcat, dqm, dkm, dvm, e);
    rope_with_table(dqm, c.q_heads, c.head_dim, *rope, T(-1), e);
    rope_with_table(dkm, c.kv_heads, c.head_dim, *rope, T(-1), e);
    {
      const Mat<T> a1 = recompute_norm(lc.x_in, L.ln1, lc.rstd1, e);
      gemm_tn(a1, dqm, G.w_q, true, e);
      gemm_tn(a1, dkm, G.w_k, true, e);
      gemm_tn(a1, dvm, G.w_v, true, e);
    }
    gemm_nt(dqm, L.w_q, da, false, e);
    gemm_nt(dkm, L.w_k, da, true, e);
    gemm_nt(dvm, L.w_v, da, true, e);
    rmsnorm_backward(lc.x_in, L.ln1, lc.rstd1, da, dnorm, G.ln1, e);
    parallel_for(
        n,
        [&](std::int64_t i) {
          T* dxi = dx.row(i);
          const T* dni = dnorm.row(i);
          for (std::int64_t j = 0; j < c.hidden; ++j) dxi[j] += dni[j];
        },
        e);
  }

  d_features = Mat<T>(n, c.feature_dim());
  gemm_nt(dx, params.w_in, d_features, false, e);
  gemm_tn(cache.features, dx, grad.w_in, true, e);
  gemm_tn(cache.h_prev, dx, grad.w_rec, true, e);
  if (d_h_prev) {
    *d_h_prev = Mat<T>(n, c.hidden);
    gemm_nt(dx, params.w_rec, *d_h_prev, false, e);
  }
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const L2OParams<float>& params, const std::string& path) {
  const L2OConfig& c = params.cfg;
  json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = "f32";
  header["config"] = {{"k_slots", c.k_slots},       {"hidden", c.hidden},
                      {"layers", c.layers},         {"q_heads", c.q_heads},
                      {"kv_heads", c.kv_heads},     {"head_dim", c.head_dim},
                      {"intermediate", c.intermediate}, {"rope_base", c.rope_base},
                      {"norm_eps", c.norm_eps},     {"max_spots", c.max_spots}};
  json manifest = json::array();
  std::uint64_t offset = 0;
  const auto tensors = params.tensors();
  for (const auto& [name, v] : tensors) {
    manifest.push_back({{"name", name}, {"count", v->size()}, {"offset", offset}});
    offset += v->size();
  }
  header["tensors"] = manifest;
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  const std::uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [name, v] : tensors)
    out.write(reinterpret_cast<const char*>(v->data()),
              static_cast<std::streamsize>(v->size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write: " + path);
}

L2OParams<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  if (!in || head_len > (1u << 20)) throw std::runtime_error("corrupt checkpoint header");
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw std::runtime_error("corrupt checkpoint header");
  const json header = json::parse(head);
  if (header.at("version").get<std::string>() != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version");
  if (header.at("dtype").get<std::string>() != "f32")
    throw std::runtime_error("unsupported checkpoint dtype");
  const json& jc = header.at("config");
  L2OConfig c;
  c.k_slots = jc.at("k_slots").get<std::int64_t>();
  c.hidden = jc.at("hidden").get<std::int64_t>();
  c.layers = jc.at("layers").get<std::int64_t>();
  c.q_heads = jc.at("q_heads").get<std::int64_t>();
  c.kv_heads = jc.at("kv_heads").get<std::int64_t>();
  c.head_dim = jc.at("head_dim").get<std::int64_t>();
  c.intermediate = jc.at("intermediate").get<std::int64_t>();
  c.rope_base = jc.at("rope_base").get<double>();
  c.norm_eps = jc.at("norm_eps").get<double>();
  c.max_spots = jc.at("max_spots").get<std::int64_t>();

  L2OParams<float> params;
  params.zero_like(c);
  auto tensors = params.tensors();
  for (const json& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::uint64_t count = entry.at("count").get<std::uint64_t>();
    bool found = false;
    for (auto& [tname, v] : tensors) {
      if (tname != name) continue;
      if (v->size() != count) throw std::runtime_error("checkpoint tensor size mismatch: " + name);
      in.seekg(static_cast<std::streamoff>(sizeof(std::uint64_t) + head_len +
                                           entry.at("offset").get<std::uint64_t>() * sizeof(float)));
      in.read(reinterpret_cast<char*>(v->data()),
              static_cast<std::streamsize>(count * sizeof(float)));
      found = true;
      break;
    }
    if (!found) throw std::runtime_error("unexpected checkpoint tensor: " + name);
  }
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return params;
}

// ---------------------------------------------------------------------------
// explicit instantiations

template struct L2OParams<float>;
template struct L2OParams<double>;
template RopeTable<float> make_rope_table<float>(const L2OConfig&, std::int64_t, std::int64_t);
template RopeTable<double> make_rope_table<double>(const L2OConfig&, std::int64_t, std::int64_t);
template void apply_rope<float>(Mat<float>&, std::int64_t, std::int64_t, double, std::int64_t);
template void apply_rope<double>(Mat<double>&, std::int64_t, std::int64_t, double, std::int64_t);
template void rmsnorm<float>(const Mat<float>&, const std::vector<float>&, double, Mat<float>&,
                             std::vector<float>*, Exec);
template void rmsnorm<double>(const Mat<double>&, const std::vector<double>&, double, Mat<double>&,
                              std::vector<double>*, Exec);
template void attention_gqa<float>(const Mat<float>&, const Mat<float>&, const Mat<float>&,
                                   std::int64_t, std::int64_t, std::int64_t, Mat<float>&,
                                   AttentionMode, Mat<float>*, Mat<float>*, Exec);
template void attention_gqa<double>(const Mat<double>&, const Mat<double>&, const Mat<double>&,
                                    std::int64_t, std::int64_t, std::int64_t, Mat<double>&,
                                    AttentionMode, Mat<double>*, Mat<double>*, Exec);
template void l2o_forward<float>(const L2OParams<float>&, const Mat<float>&, const Mat<float>*,
                                 Mat<float>&, std::vector<float>&, L2OCache<float>*, AttentionMode,
                                 const RopeTable<float>*, Exec);
template void l2o_forward<double>(const L2OParams<double>&, const Mat<double>&, const Mat<double>*,
                                  Mat<double>&, std::vector<double>&, L2OCache<double>*,
                                  AttentionMode, const RopeTable<double>*, Exec);
template void l2o_backward<float>(const L2OParams<float>&, const L2OCache<float>&,
                                  const std::vector<float>&, const Mat<float>*, L2OParams<float>&,
                                  Mat<float>&, Mat<float>*, const RopeTable<float>*, Exec);
template void l2o_backward<double>(const L2OParams<double>&, const L2OCache<double>&,
                                   const std::vector<double>&, const Mat<double>*,
                                   L2OParams<double>&, Mat<double>&, Mat<double>*,
                                   const RopeTable<double>*, Exec);

}  // namespace spotopt
