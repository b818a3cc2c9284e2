// Transformer step-proposal network.
//
// Each spot is one sequence row. Per-spot features (normalized gradient
// signals) are embedded, mixed by pre-norm attention/SwiGLU blocks with
// grouped-query attention and rotary positions, and projected to a scalar
// update step per spot. The last hidden state feeds back into the next
// optimizer iteration through a recurrent input projection.
//
// The module is templated on the scalar type: float for the training hot
// path, double for tight-tolerance checks. There are no bias terms, so an
// all-zero input with a zero recurrent state produces exactly zero steps.
// Backward is hand-written reverse mode over a forward activation cache.

#pragma once

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "spotopt/tensor.hpp"

namespace spotopt {

struct L2OConfig {
  std::int64_t k_slots = 58;  // per-objective feature slots (zero padded)
  std::int64_t hidden = 256;
  std::int64_t layers = 6;
  std::int64_t q_heads = 8;
  std::int64_t kv_heads = 4;
  std::int64_t head_dim = 32;
  std::int64_t intermediate = 512;
  double rope_base = 500000.0;
  double norm_eps = 1e-12;
  std::int64_t max_spots = 25000;

  std::int64_t feature_dim() const { return k_slots + 2; }
  std::int64_t kv_dim() const { return kv_heads * head_dim; }
  void validate() const;
};

template <class T>
struct LayerParams {
  Mat<T> w_q, w_k, w_v, w_o;      // attention projections
  Mat<T> w_gate, w_up, w_down;    // SwiGLU feed-forward
  std::vector<T> ln1, ln2;        // RMSNorm gains
};

template <class T>
struct L2OParams {
  L2OConfig cfg;
  Mat<T> w_in;   // [feature_dim, hidden]
  Mat<T> w_rec;  // [hidden, hidden], recurrent state injection
  std::vector<LayerParams<T>> layers;
  std::vector<T> final_norm;  // [hidden]
  std::vector<T> w_head;      // [hidden], zero initialized
  std::vector<T> step_scale;  // single learnable scalar

  void init(const L2OConfig& c, std::uint64_t seed);
  void zero_like(const L2OConfig& c);  // zero tensors with the given shapes
  std::size_t param_count() const;

  // All tensors in a fixed order, for optimizers and serialization.
  std::vector<std::pair<std::string, std::vector<T>*>> tensors();
  std::vector<std::pair<std::string, const std::vector<T>*>> tensors() const;

  template <class U>
  L2OParams<U> cast() const {
    L2OParams<U> out;
    out.zero_like(cfg);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i)
      for (std::size_t j = 0; j < src[i].second->size(); ++j)
        (*dst[i].second)[j] = static_cast<U>((*src[i].second)[j]);
    return out;
  }
};

enum class AttentionMode { reference, tiled };

// Precomputed rotary tables for rows 0..n-1 (angles evaluated in double).
template <class T>
struct RopeTable {
  std::int64_t n = 0, half = 0;
  std::vector<T> cs, sn;  // [n, head_dim/2] each
};

template <class T>
RopeTable<T> make_rope_table(const L2OConfig& cfg, std::int64_t n, std::int64_t pos0 = 0);

// In-place rotation of per-head pairs; row i uses position pos0 + i.
template <class T>
void apply_rope(Mat<T>& x, std::int64_t heads, std::int64_t head_dim, double base,
                std::int64_t pos0);

// Row-wise x / sqrt(mean(x^2) + eps) * gain. rstd (optional) receives the
// per-row reciprocal norms for reuse in backward.
template <class T>
void rmsnorm(const Mat<T>& x, const std::vector<T>& gain, double eps, Mat<T>& y,
             std::vector<T>* rstd = nullptr, Exec e = default_exec());

// Grouped-query attention over all rows (no mask). q: [n, q_heads*d],
// k/v: [n, kv_heads*d]. Softmax row stats (max and denominator, [q_heads, n])
// are emitted when requested so backward can rebuild the weights.
template <class T>
void attention_gqa(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, std::int64_t q_heads,
                   std::int64_t kv_heads, std::int64_t head_dim, Mat<T>& out, AttentionMode mode,
                   Mat<T>* row_max = nullptr, Mat<T>* row_denom = nullptr,
                   Exec e = default_exec());

template <class T>
struct LayerCache {
  Mat<T> x_in;             // residual stream entering the block
  std::vector<T> rstd1, rstd2;
  Mat<T> q, k, v;          // post-rotation projections
  Mat<T> row_max, row_denom;
  Mat<T> attn_concat;      // head outputs before the output projection
  Mat<T> x_mid;            // residual stream entering the feed-forward
  Mat<T> gate_pre, up_pre; // feed-forward pre-activations
};

template <class T>
struct L2OCache {
  Mat<T> features;
  Mat<T> h_prev;           // zeros when the step had no predecessor
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;
  std::vector<T> rstd_final;
  Mat<T> h_out;
};

// Forward pass. features: [n, feature_dim]; h_prev may be null (treated as
// zeros). Emits the recurrent hidden state [n, hidden] and one step per row.
// Passing a cache enables l2o_backward; inference can skip it.
template <class T>
void l2o_forward(const L2OParams<T>& params, const Mat<T>& features,
                 const std::type_identity_t<Mat<T>>* h_prev, Mat<T>& h_out, std::vector<T>& steps,
                 std::type_identity_t<L2OCache<T>>* cache = nullptr,
                 AttentionMode mode = AttentionMode::tiled,
                 const std::type_identity_t<RopeTable<T>>* rope = nullptr,
                 Exec e = default_exec());

// Reverse mode for one forward call. d_steps and d_h_out (optional) seed the
// pass; parameter gradients accumulate into grad (same shapes as params);
// d_features and optionally d_h_prev receive input gradients (overwritten).
template <class T>
void l2o_backward(const L2OParams<T>& params, const L2OCache<T>& cache,
                  const std::vector<T>& d_steps, const std::type_identity_t<Mat<T>>* d_h_out,
                  L2OParams<T>& grad, Mat<T>& d_features,
                  std::type_identity_t<Mat<T>>* d_h_prev = nullptr,
                  const std::type_identity_t<RopeTable<T>>* rope = nullptr,
                  Exec e = default_exec());

// Checkpoint container: 8-byte little-endian header length, JSON header
// (version, config, tensor manifest), then float32 tensor data.
inline constexpr const char* kCheckpointVersion = "l2onet/1";
void save_checkpoint(const L2OParams<float>& params, const std::string& path);
L2OParams<float> load_checkpoint(const std::string& path);

}  // namespace spotopt
