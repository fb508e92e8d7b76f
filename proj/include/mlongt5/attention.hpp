#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "mlongt5/common.hpp"
#include "mlongt5/tensor.hpp"

namespace mlongt5 {

/// the standard TGlobal values; the model never learns them.
/// the LongT5 TGlobal values; the model never learns them.
struct AttentionConfig {
  int local_radius = 127;
  int block_size = 16;
  int n_heads = 1;
  int head_dim = 1;
  int relpos_buckets = 32;
  int relpos_max_distance = 128;
  /// Test hook: when false, global keys are masked out (logit -inf).
  bool globals_enabled = true;

  bool operator==(const AttentionConfig&) const = default;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Allowed (query, key) pairs of TGlobal attention over n tokens.
struct AttentionMask {
  std::size_t n = 0;
  std::size_t radius = 0;
  std::size_t global_slots = 0;
  bool globals_enabled = true;

  bool token_allowed(std::size_t i, std::size_t j) const {
    return (i > j ? i - j : j - i) <= radius;
  }
  bool global_allowed(std::size_t /*i*/, std::size_t /*b*/) const { return globals_enabled; }

  std::uint64_t token_pair_count() const {
    std::uint64_t count = n;
    for (std::size_t d = 1; d <= radius && d < n; ++d) count += 2 * (n - d);
    return count;
  }
  std::uint64_t global_pair_count() const { return globals_enabled ? n * global_slots : 0; }
};

/// Token-to-token band |i - j| <= r. No global slots.
inline AttentionMask local_attention_mask(std::size_t n, std::size_t radius) {
  if (n == 0) throw Error("local_attention_mask: empty sequence");
  return AttentionMask{n, radius, 0, false};
}

inline AttentionMask tglobal_mask(std::size_t n, const AttentionConfig& cfg) {
  if (n == 0) throw Error("tglobal_mask: empty sequence");
  return AttentionMask{n, static_cast<std::size_t>(cfg.local_radius),
                       ceil_div(n, static_cast<std::size_t>(cfg.block_size)), cfg.globals_enabled};
}

/// Transient global tokens: row b is the sum of embedding rows in block b.
template <class T>
Matrix<T> tglobal_tokens(const Matrix<T>& embeddings, std::size_t block_size) {
  if (embeddings.rows() == 0 || embeddings.cols() == 0) throw Error("tglobal_tokens: empty input");
  if (block_size == 0) throw Error("tglobal_tokens: block size must be positive");
  const std::size_t g = ceil_div(embeddings.rows(), block_size);
  Matrix<T> out(g, embeddings.cols());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    auto dst = out.row(i / block_size);
    auto src = embeddings.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  return out;
}

/// Adjoint of tglobal_tokens: every row receives its block's gradient.
template <class T>
void tglobal_tokens_backward(const Matrix<T>& d_globals, std::size_t block_size, Matrix<T>& d_embeddings) {
  for (std::size_t i = 0; i < d_embeddings.rows(); ++i) {
    auto src = d_globals.row(i / block_size);
    auto dst = d_embeddings.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
}

/// T5-style relative position bucket. `relative_distance` is
/// query_position - key_position, so positive values look backwards.
/// Half of the buckets (per direction) hold exact small distances; the rest
/// are log-spaced so that max_distance lands on the last bucket.
inline int relpos_bucket(long relative_distance, bool bidirectional, int num_buckets, int max_distance) {
  int buckets = num_buckets;
  int ret = 0;
  long n = relative_distance;
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) ret += buckets;
    n = n < 0 ? -n : n;
  } else {
    n = std::max(n, 0L);
  }
  const int max_exact = buckets / 2;
  if (n < max_exact) return ret + static_cast<int>(n);
  const double scaled = std::log(static_cast<double>(n) / max_exact) /
                        std::log(static_cast<double>(max_distance) / max_exact) * (buckets - max_exact - 1);
  // The nudge keeps exact bucket boundaries (n = max_exact * ratio^k) from
  // rounding down.
  const int large = max_exact + static_cast<int>(std::floor(scaled + 1e-9));
  return ret + std::min(large, buckets - 1);
}

/// Which token keys a query may see.
enum class KeyPattern { local, causal, full };

/// Additive position bias looked up from a (buckets x heads) table.
template <class T>
struct PositionBias {
  MatrixRef<const T> table;  // data == nullptr disables the bias
  bool bidirectional = true;
  int num_buckets = 32;
  int max_distance = 128;

  bool active() const { return table.data != nullptr; }
};

template <class T>
struct AttentionGeometry {
  KeyPattern pattern = KeyPattern::full;
  std::size_t radius = 0;
  std::size_t block_size = 1;
  bool globals = false;
  PositionBias<T> token_bias;
  PositionBias<T> global_bias;  // bucketed by block distance
};

struct AttentionStats {
  std::uint64_t token_scores = 0;
  std::uint64_t global_scores = 0;
  std::uint64_t total() const { return token_scores + global_scores; }
};

/// Softmax probabilities kept for the backward pass, one row per
/// (head, query) in head-major order.
template <class T>
struct AttentionTape {
  std::vector<std::size_t> offset;
  std::vector<T> probs;
};

template <class T>
struct AttentionGrads {
  Matrix<T> dq, dk, dv, dgk, dgv;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> key_range(KeyPattern p, std::size_t i, std::size_t m, std::size_t r) {
  switch (p) {
    case KeyPattern::local:
      return {i > r ? i - r : 0, std::min(m, i + r + 1)};
    case KeyPattern::causal:
      return {0, std::min(m, i + 1)};
    case KeyPattern::full:
      break;
  }
  return {0, m};
}

// Bucket lookup for every offset i - j in [-(m-1), n-1].
template <class T>
std::vector<int> offset_buckets(const PositionBias<T>& b, std::size_t n, std::size_t m) {
  std::vector<int> out;
  if (!b.active()) return out;
  const long lo = -static_cast<long>(m) + 1;
  const long hi = static_cast<long>(n) - 1;
  out.reserve(static_cast<std::size_t>(hi - lo + 1));
  for (long d = lo; d <= hi; ++d) out.push_back(relpos_bucket(d, b.bidirectional, b.num_buckets, b.max_distance));
  return out;
}

}  // namespace detail

/// Multi-head sparse attention. q is n x (H*hd); k, v are m x (H*hd);
/// optional global keys/values are g x (H*hd). Each query attends to its
/// token key range plus, when enabled, every global key.
template <class T>
Matrix<T> attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>* gk,
                            const Matrix<T>* gv, const AttentionGeometry<T>& geo, std::size_t n_heads,
                            AttentionTape<T>* tape = nullptr, AttentionStats* stats = nullptr) {
  const std::size_t n = q.rows();
  const std::size_t m = k.rows();
  const std::size_t hd = q.cols() / n_heads;
  const std::size_t g = (geo.globals && gk) ? gk->rows() : 0;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto tok_buckets = detail::offset_buckets(geo.token_bias, n, m);
  const auto glob_buckets = detail::offset_buckets(geo.global_bias, ceil_div(n, geo.block_size), g);
  const long tok_origin = static_cast<long>(m) - 1;
  const long glob_origin = static_cast<long>(g) - 1;

  Matrix<T> ctx(n, q.cols());
  if (tape) {
    tape->offset.assign(n_heads * n + 1, 0);
    tape->probs.clear();
  }
  std::vector<T> logits;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [lo, hi] = detail::key_range(geo.pattern, i, m, geo.radius);
      logits.assign(hi - lo + g, T(0));
      const T* qi = q.data() + i * q.cols() + c0;
      for (std::size_t j = lo; j < hi; ++j) {
        const T* kj = k.data() + j * k.cols() + c0;
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= scale;
        if (geo.token_bias.active()) {
          const int bucket = tok_buckets[static_cast<std::size_t>(static_cast<long>(i) - static_cast<long>(j) + tok_origin)];
          s += geo.token_bias.table(static_cast<std::size_t>(bucket), h);
        }
        logits[j - lo] = s;
      }
      const std::size_t qblock = i / geo.block_size;
      for (std::size_t b = 0; b < g; ++b) {
        const T* kb = gk->data() + b * gk->cols() + c0;
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kb[c];
        s *= scale;
        if (geo.global_bias.active()) {
          const int bucket = glob_buckets[static_cast<std::size_t>(static_cast<long>(qblock) - static_cast<long>(b) + glob_origin)];
          s += geo.global_bias.table(static_cast<std::size_t>(bucket), h);
        }
        logits[hi - lo + b] = s;
      }
      if (stats) {
        stats->token_scores += hi - lo;
        stats->global_scores += g;
      }
      T mx = -std::numeric_limits<T>::infinity();
      for (T s : logits) mx = std::max(mx, s);
      T sum = 0;
      for (T& s : logits) {
        s = std::exp(s - mx);
        sum += s;
      }
      const T inv = T(1) / sum;
      T* out = ctx.data() + i * ctx.cols() + c0;
      for (std::size_t j = lo; j < hi; ++j) {
        const T p = logits[j - lo] *= inv;
        const T* vj = v.data() + j * v.cols() + c0;
        for (std::size_t c = 0; c < hd; ++c) out[c] += p * vj[c];
      }
      for (std::size_t b = 0; b < g; ++b) {
        const T p = logits[hi - lo + b] *= inv;
        const T* vb = gv->data() + b * gv->cols() + c0;
        for (std::size_t c = 0; c < hd; ++c) out[c] += p * vb[c];
      }
      if (tape) {
        tape->probs.insert(tape->probs.end(), logits.begin(), logits.end());
        tape->offset[h * n + i + 1] = tape->probs.size();
      }
    }
  }
  return ctx;
}

/// Backward of attention_forward given d(ctx). Bias-table gradients are
/// accumulated into the supplied (buckets x heads) refs when non-null.
template <class T>
AttentionGrads<T> attention_backward(const Matrix<T>& dctx, const Matrix<T>& q, const Matrix<T>& k,
                                     const Matrix<T>& v, const Matrix<T>* gk, const Matrix<T>* gv,
                                     const AttentionGeometry<T>& geo, std::size_t n_heads,
                                     const AttentionTape<T>& tape, MatrixRef<T> d_token_bias,
                                     MatrixRef<T> d_global_bias) {
  const std::size_t n = q.rows();
  const std::size_t m = k.rows();
  const std::size_t hd = q.cols() / n_heads;
  const std::size_t g = (geo.globals && gk) ? gk->rows() : 0;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto tok_buckets = detail::offset_buckets(geo.token_bias, n, m);
  const auto glob_buckets = detail::offset_buckets(geo.global_bias, ceil_div(n, geo.block_size), g);
  const long tok_origin = static_cast<long>(m) - 1;
  const long glob_origin = static_cast<long>(g) - 1;

  AttentionGrads<T> gr{Matrix<T>(n, q.cols()), Matrix<T>(m, k.cols()), Matrix<T>(m, v.cols()),
                       Matrix<T>(g, q.cols()), Matrix<T>(g, q.cols())};
  std::vector<T> dp;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [lo, hi] = detail::key_range(geo.pattern, i, m, geo.radius);
      const T* p = tape.probs.data() + tape.offset[h * n + i];
      const std::size_t width = hi - lo + g;
      const T* dci = dctx.data() + i * dctx.cols() + c0;
      dp.assign(width, T(0));
      T dot = 0;
      for (std::size_t j = lo; j < hi; ++j) {
        const T* vj = v.data() + j * v.cols() + c0;
        T* dvj = gr.dv.data() + j * v.cols() + c0;
        const T pj = p[j - lo];
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) {
          s += dci[c] * vj[c];
          dvj[c] += pj * dci[c];
        }
        dp[j - lo] = s;
        dot += pj * s;
      }
      for (std::size_t b = 0; b < g; ++b) {
        const T* vb = gv->data() + b * gv->cols() + c0;
        T* dvb = gr.dgv.data() + b * gv->cols() + c0;
        const T pb = p[hi - lo + b];
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) {
          s += dci[c] * vb[c];
          dvb[c] += pb * dci[c];
        }
        dp[hi - lo + b] = s;
        dot += pb * s;
      }
      const T* qi = q.data() + i * q.cols() + c0;
      T* dqi = gr.dq.data() + i * q.cols() + c0;
      for (std::size_t j = lo; j < hi; ++j) {
        const T ds = p[j - lo] * (dp[j - lo] - dot);
        if (geo.token_bias.active() && d_token_bias.data) {
          const int bucket = tok_buckets[static_cast<std::size_t>(static_cast<long>(i) - static_cast<long>(j) + tok_origin)];
          d_token_bias(static_cast<std::size_t>(bucket), h) += ds;
        }
        const T dss = ds * scale;
        const T* kj = k.data() + j * k.cols() + c0;
        T* dkj = gr.dk.data() + j * k.cols() + c0;
        for (std::size_t c = 0; c < hd; ++c) {
          dqi[c] += dss * kj[c];
          dkj[c] += dss * qi[c];
        }
      }
      const std::size_t qblock = i / geo.block_size;
      for (std::size_t b = 0; b < g; ++b) {
        const T ds = p[hi - lo + b] * (dp[hi - lo + b] - dot);
        if (geo.global_bias.active() && d_global_bias.data) {
          const int bucket = glob_buckets[static_cast<std::size_t>(static_cast<long>(qblock) - static_cast<long>(b) + glob_origin)];
          d_global_bias(static_cast<std::size_t>(bucket), h) += ds;
        }
        const T dss = ds * scale;
        const T* kb = gk->data() + b * gk->cols() + c0;
        T* dkb = gr.dgk.data() + b * gk->cols() + c0;
        for (std::size_t c = 0; c < hd; ++c) {
          dqi[c] += dss * kb[c];
          dkb[c] += dss * qi[c];
        }
      }
    }
  }
  return gr;
}

/// TGlobal attention for already-projected queries, keys and values:
/// each query sees keys within the local radius plus every global key.
template <class T>
Matrix<T> tglobal_attention(const Matrix<T>& queries, const Matrix<T>& keys, const Matrix<T>& values,
                            const Matrix<T>& global_keys, const Matrix<T>& global_values,
                            const AttentionConfig& cfg, const PositionBias<T>& token_bias = {},
                            const PositionBias<T>& global_bias = {}, AttentionStats* stats = nullptr,
                            AttentionTape<T>* tape = nullptr) {
  AttentionGeometry<T> geo;
  geo.pattern = KeyPattern::local;
  geo.radius = static_cast<std::size_t>(cfg.local_radius);
  geo.block_size = static_cast<std::size_t>(cfg.block_size);
  geo.globals = cfg.globals_enabled;
  geo.token_bias = token_bias;
  geo.global_bias = global_bias;
  return attention_forward(queries, keys, values, &global_keys, &global_values, geo,
                           static_cast<std::size_t>(cfg.n_heads), tape, stats);
}

/// Textbook full attention, optionally with an additive n x m bias matrix.
/// Serves as the reference the sparse kernel is checked against.
template <class T>
Matrix<T> dense_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, std::size_t n_heads = 1,
                          const Matrix<T>* bias = nullptr, AttentionStats* stats = nullptr) {
  const std::size_t n = q.rows(), m = k.rows(), hd = q.cols() / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  Matrix<T> out(n, v.cols());
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<T> w(m);
      for (std::size_t j = 0; j < m; ++j) {
        T s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += q(i, h * hd + c) * k(j, h * hd + c);
        w[j] = s * scale + (bias ? (*bias)(i, j) : T(0));
      }
      if (stats) stats->token_scores += m;
      const T mx = *std::max_element(w.begin(), w.end());
      T sum = 0;
      for (auto& x : w) sum += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < hd; ++c) out(i, h * hd + c) += w[j] / sum * v(j, h * hd + c);
    }
  }
  return out;
}

/// Dense evaluation of TGlobal semantics: scores for every (query, token)
/// and (query, global) pair, with disallowed pairs set to -inf before the
/// softmax. This is the normative definition the banded kernel must match.
template <class T>
Matrix<T> masked_dense_tglobal(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const Matrix<T>& gk,
                               const Matrix<T>& gv, const AttentionConfig& cfg, AttentionStats* stats = nullptr) {
  const std::size_t n = q.rows(), g = gk.rows();
  const AttentionMask mask = tglobal_mask(n, cfg);
  Matrix<T> keys(n + g, k.cols()), vals(n + g, v.cols());
  for (std::size_t j = 0; j < n; ++j) {
    std::copy(k.row(j).begin(), k.row(j).end(), keys.row(j).begin());
    std::copy(v.row(j).begin(), v.row(j).end(), vals.row(j).begin());
  }
  for (std::size_t b = 0; b < g; ++b) {
    std::copy(gk.row(b).begin(), gk.row(b).end(), keys.row(n + b).begin());
    std::copy(gv.row(b).begin(), gv.row(b).end(), vals.row(n + b).begin());
  }
  Matrix<T> bias(n, n + g);
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.token_allowed(i, j)) bias(i, j) = neg_inf;
    }
    for (std::size_t b = 0; b < g; ++b) {
      if (!mask.global_allowed(i, b)) bias(i, n + b) = neg_inf;
    }
  }
  return dense_attention(q, keys, vals, static_cast<std::size_t>(cfg.n_heads), &bias, stats);
}

}  // namespace mlongt5
