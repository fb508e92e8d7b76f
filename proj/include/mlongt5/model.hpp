#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mlongt5/attention.hpp"
#include "mlongt5/common.hpp"
#include "mlongt5/tensor.hpp"
#include "mlongt5/tokenizer.hpp"

namespace mlongt5 {

struct ModelConfig {
  int vocab_size = 362;
  int d_model = 64;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int n_heads = 4;
  int head_dim = 16;
  int d_ff = 128;
  AttentionConfig attention{};
  double dropout = 0.0;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v <= 0) throw InputError(std::string("model config: ") + what + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_enc_layers, "n_enc_layers");
    positive(n_dec_layers, "n_dec_layers");
    positive(n_heads, "n_heads");
    positive(head_dim, "head_dim");
    positive(d_ff, "d_ff");
    positive(attention.block_size, "block_size");
    if (attention.local_radius < 0) throw InputError("model config: local_radius must be non-negative");
    if (attention.relpos_buckets < 2) throw InputError("model config: relpos_buckets must be at least 2");
    if (attention.relpos_max_distance < attention.relpos_buckets)
      throw InputError("model config: relpos_max_distance must be at least relpos_buckets");
    if (n_heads * head_dim != d_model) throw InputError("model config: n_heads * head_dim must equal d_model");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("model config: dropout must lie in [0, 1)");
  }

  /// Encoder attention settings with head geometry filled in from the model.
  AttentionConfig encoder_attention() const {
    AttentionConfig a = attention;
    a.n_heads = n_heads;
    a.head_dim = head_dim;
    return a;
  }
};

/// Named presets. Only "tiny" is meant for training at desk scale; the
/// others reproduce published layer shapes for shape checks.
inline ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") return c;
  if (name == "micro") {
    c.d_model = 8;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.n_heads = 2;
    c.head_dim = 4;
    c.d_ff = 16;
    return c;
  }
  if (name == "base") {
    c.d_model = 768, c.n_enc_layers = 12, c.n_dec_layers = 12, c.n_heads = 12, c.head_dim = 64, c.d_ff = 2048;
  } else if (name == "large") {
    c.d_model = 1024, c.n_enc_layers = 24, c.n_dec_layers = 24, c.n_heads = 16, c.head_dim = 64, c.d_ff = 2816;
  } else if (name == "xl") {
    c.d_model = 2048, c.n_enc_layers = 24, c.n_dec_layers = 24, c.n_heads = 32, c.head_dim = 64, c.d_ff = 5120;
  } else {
    throw InputError("unknown model preset '" + name + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

/// Flat store of named 2-D tensors. Gradients and optimizer moments use
/// stores with the same layout.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::size_t rows = 0, cols = 0, offset = 0;
    std::size_t size() const { return rows * cols; }
    bool operator==(const Entry&) const = default;
  };

  std::size_t add(std::string name, std::size_t rows, std::size_t cols) {
    entries_.push_back({std::move(name), rows, cols, values_.size()});
    values_.resize(values_.size() + rows * cols, T(0));
    return entries_.size() - 1;
  }

  MatrixRef<T> view(std::size_t i) {
    auto& e = entries_[i];
    return {values_.data() + e.offset, e.rows, e.cols};
  }
  MatrixRef<const T> view(std::size_t i) const {
    auto& e = entries_[i];
    return {values_.data() + e.offset, e.rows, e.cols};
  }
  std::span<T> span_of(std::size_t i) { return {values_.data() + entries_[i].offset, entries_[i].size()}; }
  std::span<const T> span_of(std::size_t i) const {
    return {values_.data() + entries_[i].offset, entries_[i].size()};
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  /// Same layout, all zeros.
  ParamStore zeros_like() const {
    ParamStore z;
    z.entries_ = entries_;
    z.values_.assign(values_.size(), T(0));
    return z;
  }

  bool operator==(const ParamStore&) const = default;

 private:
  std::vector<Entry> entries_;
  std::vector<T> values_;
};

struct AttnSlots {
  std::size_t norm = 0, q = 0, k = 0, v = 0, o = 0;
  std::optional<std::size_t> global_norm;
};

struct FfSlots {
  std::size_t norm = 0, wi0 = 0, wi1 = 0, wo = 0;
};

struct EncoderLayerSlots {
  AttnSlots attn;
  FfSlots ff;
};

struct DecoderLayerSlots {
  AttnSlots self_attn;
  AttnSlots cross_attn;
  FfSlots ff;
};

struct ParamLayout {
  std::size_t embedding = 0;
  std::size_t enc_relpos = 0;
  std::size_t enc_global_relpos = 0;
  std::size_t enc_final_norm = 0;
  std::size_t dec_relpos = 0;
  std::size_t dec_final_norm = 0;
  std::vector<EncoderLayerSlots> enc;
  std::vector<DecoderLayerSlots> dec;
};

enum class TensorRole { embedding, projection, norm, bias_table };

/// Registers every tensor of the model in a fixed order.
template <class T>
ParamLayout build_layout(const ModelConfig& c, ParamStore<T>& store, std::vector<TensorRole>* roles = nullptr) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto inner = static_cast<std::size_t>(c.n_heads * c.head_dim);
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto buckets = static_cast<std::size_t>(c.attention.relpos_buckets);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  auto add = [&](const std::string& name, std::size_t r, std::size_t cols, TensorRole role) {
    if (roles) roles->push_back(role);
    return store.add(name, r, cols);
  };
  auto attn = [&](const std::string& p, bool globals) {
    AttnSlots s;
    s.norm = add(p + ".norm", 1, d, TensorRole::norm);
    if (globals) s.global_norm = add(p + ".global_norm", 1, d, TensorRole::norm);
    s.q = add(p + ".q", d, inner, TensorRole::projection);
    s.k = add(p + ".k", d, inner, TensorRole::projection);
    s.v = add(p + ".v", d, inner, TensorRole::projection);
    s.o = add(p + ".o", inner, d, TensorRole::projection);
    return s;
  };
  auto feed = [&](const std::string& p) {
    FfSlots s;
    s.norm = add(p + ".norm", 1, d, TensorRole::norm);
    s.wi0 = add(p + ".wi0", d, ff, TensorRole::projection);
    s.wi1 = add(p + ".wi1", d, ff, TensorRole::projection);
    s.wo = add(p + ".wo", ff, d, TensorRole::projection);
    return s;
  };
  ParamLayout L;
  L.embedding = add("shared.embedding", static_cast<std::size_t>(c.vocab_size), d, TensorRole::embedding);
  L.enc_relpos = add("encoder.relpos_bias", buckets, heads, TensorRole::bias_table);
  L.enc_global_relpos = add("encoder.global_relpos_bias", buckets, heads, TensorRole::bias_table);
  for (int l = 0; l < c.n_enc_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    L.enc.push_back({attn(p + ".attn", true), feed(p + ".ff")});
  }
  L.enc_final_norm = add("encoder.final_norm", 1, d, TensorRole::norm);
  L.dec_relpos = add("decoder.relpos_bias", buckets, heads, TensorRole::bias_table);
  for (int l = 0; l < c.n_dec_layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    L.dec.push_back({attn(p + ".self_attn", false), attn(p + ".cross_attn", false), feed(p + ".ff")});
  }
  L.dec_final_norm = add("decoder.final_norm", 1, d, TensorRole::norm);
  return L;
}

template <class T>
struct Params {
  ModelConfig config;
  ParamStore<T> store;
  ParamLayout layout;

  MatrixRef<const T> operator[](std::size_t i) const { return store.view(i); }
};

/// Parameter tensors laid out for `config`, all zero.
template <class T>
Params<T> empty_params(const ModelConfig& config) {
  config.validate();
  Params<T> p;
  p.config = config;
  p.layout = build_layout(config, p.store);
  return p;
}

/// Seeded initialization: embeddings ~ N(0, 1), projections
/// ~ N(0, 1/fan_in), normalization gains 1, bias tables 0.
template <class T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Params<T> p;
  p.config = config;
  std::vector<TensorRole> roles;
  p.layout = build_layout(config, p.store, &roles);
  Rng rng(seed);
  for (std::size_t i = 0; i < roles.size(); ++i) {
    auto view = p.store.view(i);
    auto values = p.store.span_of(i);
    switch (roles[i]) {
      case TensorRole::embedding:
        for (auto& x : values) x = static_cast<T>(rng.normal());
        break;
      case TensorRole::projection: {
        const double s = 1.0 / std::sqrt(static_cast<double>(view.rows));
        for (auto& x : values) x = static_cast<T>(rng.normal() * s);
        break;
      }
      case TensorRole::norm:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case TensorRole::bias_table:
        std::fill(values.begin(), values.end(), T(0));
        break;
    }
  }
  return p;
}

template <class T>
ParamStore<T> zero_grads(const Params<T>& p) {
  return p.store.zeros_like();
}

// ---------------------------------------------------------------------------
// Building blocks

namespace nn {

inline constexpr double kNormEps = 1e-6;

template <class T>
struct RmsCache {
  Matrix<T> x;
  std::vector<T> inv;
};

template <class T>
Matrix<T> rms_forward(const Matrix<T>& x, std::span<const T> gain, RmsCache<T>* cache) {
  Matrix<T> y(x.rows(), x.cols());
  std::vector<T> inv(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    T ms = 0;
    for (T v : xr) ms += v * v;
    ms /= static_cast<T>(x.cols());
    inv[r] = T(1) / std::sqrt(ms + static_cast<T>(kNormEps));
    auto yr = y.row(r);
    for (std::size_t c = 0; c < x.cols(); ++c) yr[c] = xr[c] * inv[r] * gain[c];
  }
  if (cache) {
    cache->x = x;
    cache->inv = std::move(inv);
  }
  return y;
}

template <class T>
Matrix<T> rms_backward(const Matrix<T>& dy, const RmsCache<T>& cache, std::span<const T> gain, std::span<T> dgain) {
  const auto& x = cache.x;
  const std::size_t d = x.cols();
  Matrix<T> dx(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T inv = cache.inv[r];
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    T dot = 0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain[c] += dyr[c] * xr[c] * inv;
      dot += dyr[c] * gain[c] * xr[c];
    }
    const T coef = inv * inv * dot / static_cast<T>(d);
    auto dxr = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) dxr[c] = inv * (dyr[c] * gain[c] - xr[c] * coef);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T t = std::tanh(k * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * T(0.044715) * x * x);
}

/// Inverted dropout. An empty mask means identity.
template <class T>
struct Dropout {
  std::vector<T> mask;

  void apply(Matrix<T>& x, double rate, Rng* rng) {
    mask.clear();
    if (!rng || rate <= 0.0) return;
    mask.resize(x.size());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto v = x.flat();
    for (std::size_t i = 0; i < v.size(); ++i) {
      mask[i] = rng->bernoulli(rate) ? T(0) : keep_scale;
      v[i] *= mask[i];
    }
  }
  void backward(Matrix<T>& dx) const {
    if (mask.empty()) return;
    auto v = dx.flat();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] *= mask[i];
  }
};

template <class T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  dst += src;
}

template <class T>
struct AttnCache {
  RmsCache<T> norm;
  Matrix<T> xn, q, k, v;
  RmsCache<T> gnorm;
  Matrix<T> gn, gk, gv;
  AttentionTape<T> tape;
  Matrix<T> ctx;
  Dropout<T> drop;
};

template <class T>
struct AttnBlock {
  const ParamStore<T>& P;
  AttnSlots s;
  AttentionGeometry<T> geo;
  std::size_t heads;

  /// x + Attn(RMS(x)); keys and values come from `kv` when given (cross
  /// attention), otherwise from the normalized input.
  Matrix<T> forward(const Matrix<T>& x, const Matrix<T>* kv, AttnCache<T>& c, double drop, Rng* rng,
                    AttentionStats* stats = nullptr) const {
    c.xn = rms_forward(x, P.span_of(s.norm), &c.norm);
    const Matrix<T>& src = kv ? *kv : c.xn;
    c.q = matmul(c.xn, P.view(s.q));
    c.k = matmul(src, P.view(s.k));
    c.v = matmul(src, P.view(s.v));
    const Matrix<T>* gk = nullptr;
    const Matrix<T>* gv = nullptr;
    if (s.global_norm && geo.globals) {
      Matrix<T> gsum = tglobal_tokens(c.xn, geo.block_size);
      c.gn = rms_forward(gsum, P.span_of(*s.global_norm), &c.gnorm);
      c.gk = matmul(c.gn, P.view(s.k));
      c.gv = matmul(c.gn, P.view(s.v));
      gk = &c.gk;
      gv = &c.gv;
    }
    c.ctx = attention_forward(c.q, c.k, c.v, gk, gv, geo, heads, &c.tape, stats);
    Matrix<T> out = matmul(c.ctx, P.view(s.o));
    c.drop.apply(out, drop, rng);
    out += x;
    return out;
  }

  /// Returns dx; accumulates into `dkv` when this is a cross-attention block.
  Matrix<T> backward(const Matrix<T>& dy, const Matrix<T>* kv, const AttnCache<T>& c, ParamStore<T>& G,
                     MatrixRef<T> d_token_bias, MatrixRef<T> d_global_bias, Matrix<T>* dkv) const {
    Matrix<T> dout = dy;
    c.drop.backward(dout);
    add_matmul_tn(G.view(s.o), ref(c.ctx), ref(dout));
    Matrix<T> dctx = matmul_nt(ref(dout), P.view(s.o));
    const bool globals = s.global_norm && geo.globals;
    auto gr = attention_backward(dctx, c.q, c.k, c.v, globals ? &c.gk : nullptr, globals ? &c.gv : nullptr, geo,
                                 heads, c.tape, d_token_bias, d_global_bias);
    add_matmul_tn(G.view(s.q), ref(c.xn), ref(gr.dq));
    Matrix<T> dxn = matmul_nt(ref(gr.dq), P.view(s.q));
    const Matrix<T>& src = kv ? *kv : c.xn;
    add_matmul_tn(G.view(s.k), ref(src), ref(gr.dk));
    add_matmul_tn(G.view(s.v), ref(src), ref(gr.dv));
    Matrix<T> dsrc = matmul_nt(ref(gr.dk), P.view(s.k));
    dsrc += matmul_nt(ref(gr.dv), P.view(s.v));
    if (kv) {
      *dkv += dsrc;
    } else {
      dxn += dsrc;
    }
    if (globals) {
      add_matmul_tn(G.view(s.k), ref(c.gn), ref(gr.dgk));
      add_matmul_tn(G.view(s.v), ref(c.gn), ref(gr.dgv));
      Matrix<T> dgn = matmul_nt(ref(gr.dgk), P.view(s.k));
      dgn += matmul_nt(ref(gr.dgv), P.view(s.v));
      Matrix<T> dgsum = rms_backward(dgn, c.gnorm, P.span_of(*s.global_norm), G.span_of(*s.global_norm));
      tglobal_tokens_backward(dgsum, geo.block_size, dxn);
    }
    Matrix<T> dx = rms_backward(dxn, c.norm, P.span_of(s.norm), G.span_of(s.norm));
    dx += dy;
    return dx;
  }
};

template <class T>
struct FfCache {
  RmsCache<T> norm;
  Matrix<T> xn, a, b, h;
  Dropout<T> drop;
};

/// Gated-GELU feed-forward: x + (gelu(xn Wi0) * (xn Wi1)) Wo.
template <class T>
struct FfBlock {
  const ParamStore<T>& P;
  FfSlots s;

  Matrix<T> forward(const Matrix<T>& x, FfCache<T>& c, double drop, Rng* rng) const {
    c.xn = rms_forward(x, P.span_of(s.norm), &c.norm);
    c.a = matmul(c.xn, P.view(s.wi0));
    c.b = matmul(c.xn, P.view(s.wi1));
    c.h = Matrix<T>(c.a.rows(), c.a.cols());
    for (std::size_t i = 0; i < c.h.size(); ++i) c.h.data()[i] = gelu(c.a.data()[i]) * c.b.data()[i];
    Matrix<T> out = matmul(c.h, P.view(s.wo));
    c.drop.apply(out, drop, rng);
    out += x;
    return out;
  }

  Matrix<T> backward(const Matrix<T>& dy, const FfCache<T>& c, ParamStore<T>& G) const {
    Matrix<T> dout = dy;
    c.drop.backward(dout);
    add_matmul_tn(G.view(s.wo), ref(c.h), ref(dout));
    Matrix<T> dh = matmul_nt(ref(dout), P.view(s.wo));
    Matrix<T> da(dh.rows(), dh.cols()), db(dh.rows(), dh.cols());
    for (std::size_t i = 0; i < dh.size(); ++i) {
      const T a = c.a.data()[i];
      da.data()[i] = dh.data()[i] * c.b.data()[i] * gelu_grad(a);
      db.data()[i] = dh.data()[i] * gelu(a);
    }
    add_matmul_tn(G.view(s.wi0), ref(c.xn), ref(da));
    add_matmul_tn(G.view(s.wi1), ref(c.xn), ref(db));
    Matrix<T> dxn = matmul_nt(ref(da), P.view(s.wi0));
    dxn += matmul_nt(ref(db), P.view(s.wi1));
    Matrix<T> dx = rms_backward(dxn, c.norm, P.span_of(s.norm), G.span_of(s.norm));
    dx += dy;
    return dx;
  }
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Encoder-decoder

/// Everything the backward pass needs from one forward pass.
template <class T>
struct ForwardCache {
  std::vector<TokenId> inputs, decoder_inputs;
  nn::Dropout<T> enc_embed_drop, dec_embed_drop, enc_out_drop, dec_out_drop;
  std::vector<nn::AttnCache<T>> enc_attn;
  std::vector<nn::FfCache<T>> enc_ff;
  nn::RmsCache<T> enc_final;
  Matrix<T> enc_out;
  std::vector<nn::AttnCache<T>> dec_self, dec_cross;
  std::vector<nn::FfCache<T>> dec_ff;
  nn::RmsCache<T> dec_final;
  Matrix<T> dec_out;
  Matrix<T> logits;
};

namespace detail {

template <class T>
void check_ids(std::span<const TokenId> ids, int vocab, const char* what) {
  for (TokenId t : ids) {
    if (t < 0 || t >= vocab) {
      throw InputError(std::string(what) + " token id " + std::to_string(t) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
  }
}

template <class T>
Matrix<T> embed(const Params<T>& p, std::span<const TokenId> ids) {
  const auto E = p.store.view(p.layout.embedding);
  Matrix<T> x(ids.size(), E.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto src = E.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

template <class T>
AttentionGeometry<T> encoder_geometry(const Params<T>& p) {
  const auto& a = p.config.attention;
  AttentionGeometry<T> g;
  g.pattern = KeyPattern::local;
  g.radius = static_cast<std::size_t>(a.local_radius);
  g.block_size = static_cast<std::size_t>(a.block_size);
  g.globals = a.globals_enabled;
  g.token_bias = {p.store.view(p.layout.enc_relpos), true, a.relpos_buckets, a.relpos_max_distance};
  g.global_bias = {p.store.view(p.layout.enc_global_relpos), true, a.relpos_buckets, a.relpos_max_distance};
  return g;
}

template <class T>
AttentionGeometry<T> decoder_self_geometry(const Params<T>& p) {
  const auto& a = p.config.attention;
  AttentionGeometry<T> g;
  g.pattern = KeyPattern::causal;
  g.token_bias = {p.store.view(p.layout.dec_relpos), false, a.relpos_buckets, a.relpos_max_distance};
  return g;
}

template <class T>
AttentionGeometry<T> cross_geometry() {
  AttentionGeometry<T> g;
  g.pattern = KeyPattern::full;
  return g;
}

}  // namespace detail

/// Decoder inputs: targets shifted right by one with pad as the start token.
inline std::vector<TokenId> shift_right(std::span<const TokenId> targets) {
  std::vector<TokenId> out;
  out.reserve(targets.size());
  out.push_back(Vocab::kPad);
  for (std::size_t i = 0; i + 1 < targets.size(); ++i) out.push_back(targets[i]);
  return out;
}

/// Encoder stack; returns the final-normalized encoder states.
template <class T>
Matrix<T> encode(const Params<T>& p, std::span<const TokenId> inputs, ForwardCache<T>* cache = nullptr,
                 Rng* dropout_rng = nullptr, AttentionStats* stats = nullptr) {
  if (inputs.empty()) throw InputError("forward: empty inputs");
  detail::check_ids<T>(inputs, p.config.vocab_size, "input");
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  const double drop = p.config.dropout;
  const auto heads = static_cast<std::size_t>(p.config.n_heads);
  c.inputs.assign(inputs.begin(), inputs.end());
  Matrix<T> x = detail::embed(p, inputs);
  c.enc_embed_drop.apply(x, drop, dropout_rng);
  const auto geo = detail::encoder_geometry(p);
  c.enc_attn.resize(p.layout.enc.size());
  c.enc_ff.resize(p.layout.enc.size());
  for (std::size_t l = 0; l < p.layout.enc.size(); ++l) {
    nn::AttnBlock<T> attn{p.store, p.layout.enc[l].attn, geo, heads};
    x = attn.forward(x, nullptr, c.enc_attn[l], drop, dropout_rng, stats);
    nn::FfBlock<T> ff{p.store, p.layout.enc[l].ff};
    x = ff.forward(x, c.enc_ff[l], drop, dropout_rng);
  }
  Matrix<T> out = nn::rms_forward(x, p.store.span_of(p.layout.enc_final_norm), &c.enc_final);
  c.enc_out_drop.apply(out, drop, dropout_rng);
  c.enc_out = out;
  return out;
}

/// Decoder stack and tied output projection over given decoder input ids.
template <class T>
Matrix<T> decode_logits(const Params<T>& p, const Matrix<T>& enc_out, std::span<const TokenId> decoder_inputs,
                        ForwardCache<T>* cache = nullptr, Rng* dropout_rng = nullptr) {
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  const double drop = p.config.dropout;
  const auto heads = static_cast<std::size_t>(p.config.n_heads);
  c.decoder_inputs.assign(decoder_inputs.begin(), decoder_inputs.end());
  Matrix<T> y = detail::embed(p, decoder_inputs);
  c.dec_embed_drop.apply(y, drop, dropout_rng);
  const auto self_geo = detail::decoder_self_geometry(p);
  const auto cross_geo = detail::cross_geometry<T>();
  const std::size_t L = p.layout.dec.size();
  c.dec_self.resize(L);
  c.dec_cross.resize(L);
  c.dec_ff.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    nn::AttnBlock<T> self{p.store, p.layout.dec[l].self_attn, self_geo, heads};
    y = self.forward(y, nullptr, c.dec_self[l], drop, dropout_rng);
    nn::AttnBlock<T> cross{p.store, p.layout.dec[l].cross_attn, cross_geo, heads};
    y = cross.forward(y, &enc_out, c.dec_cross[l], drop, dropout_rng);
    nn::FfBlock<T> ff{p.store, p.layout.dec[l].ff};
    y = ff.forward(y, c.dec_ff[l], drop, dropout_rng);
  }
  Matrix<T> out = nn::rms_forward(y, p.store.span_of(p.layout.dec_final_norm), &c.dec_final);
  c.dec_out_drop.apply(out, drop, dropout_rng);
  c.dec_out = out;
  // Tied embedding with the T5 d_model^-1/2 rescale.
  Matrix<T> logits = matmul_nt(ref(out), p.store.view(p.layout.embedding));
  const T scale = T(1) / std::sqrt(static_cast<T>(p.config.d_model));
  for (auto& v : logits.flat()) v *= scale;
  return logits;
}

/// Logits (|targets| x vocab) for teacher-forced decoding of `targets`.
template <class T>
Matrix<T> forward(const Params<T>& p, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                  ForwardCache<T>* cache = nullptr, Rng* dropout_rng = nullptr) {
  detail::check_ids<T>(targets, p.config.vocab_size, "target");
  if (targets.empty()) throw InputError("forward: empty targets");
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  Matrix<T> enc = encode(p, inputs, &c, dropout_rng);
  const auto dec_in = shift_right(targets);
  c.logits = decode_logits(p, enc, dec_in, &c, dropout_rng);
  return c.logits;
}

/// Mean token cross-entropy over non-pad target positions.
template <class T>
T loss(const Matrix<T>& logits, std::span<const TokenId> targets, TokenId pad_id = Vocab::kPad) {
  if (logits.rows() != targets.size()) throw Error("loss: logits rows do not match target length");
  T total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == pad_id) continue;
    auto row = logits.row(t);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T v : row) sum += std::exp(v - mx);
    total += mx + std::log(sum) - row[static_cast<std::size_t>(targets[t])];
    ++count;
  }
  if (count == 0) throw Error("loss: every target position is padding");
  return total / static_cast<T>(count);
}

inline std::size_t count_non_pad(std::span<const TokenId> targets, TokenId pad_id = Vocab::kPad) {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [&](TokenId t) { return t != pad_id; }));
}

/// Backward pass from d(logits) through the whole network.
template <class T>
void backward(const Params<T>& p, const ForwardCache<T>& c, const Matrix<T>& dlogits, ParamStore<T>& G) {
  const auto& L = p.layout;
  const auto heads = static_cast<std::size_t>(p.config.n_heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(p.config.d_model));
  Matrix<T> dl = dlogits;
  for (auto& v : dl.flat()) v *= scale;
  // logits = out E^T
  add_matmul_tn(G.view(L.embedding), ref(dl), ref(c.dec_out));
  Matrix<T> dy = matmul(ref(dl), p.store.view(L.embedding));
  c.dec_out_drop.backward(dy);
  dy = nn::rms_backward(dy, c.dec_final, p.store.span_of(L.dec_final_norm), G.span_of(L.dec_final_norm));

  const auto self_geo = detail::decoder_self_geometry(p);
  const auto cross_geo = detail::cross_geometry<T>();
  Matrix<T> denc(c.enc_out.rows(), c.enc_out.cols());
  for (std::size_t l = L.dec.size(); l-- > 0;) {
    nn::FfBlock<T> ff{p.store, L.dec[l].ff};
    dy = ff.backward(dy, c.dec_ff[l], G);
    nn::AttnBlock<T> cross{p.store, L.dec[l].cross_attn, cross_geo, heads};
    dy = cross.backward(dy, &c.enc_out, c.dec_cross[l], G, {}, {}, &denc);
    nn::AttnBlock<T> self{p.store, L.dec[l].self_attn, self_geo, heads};
    dy = self.backward(dy, nullptr, c.dec_self[l], G, G.view(L.dec_relpos), {}, nullptr);
  }
  c.dec_embed_drop.backward(dy);
  {
    auto dE = G.view(L.embedding);
    for (std::size_t i = 0; i < c.decoder_inputs.size(); ++i) {
      auto dst = dE.row(static_cast<std::size_t>(c.decoder_inputs[i]));
      auto src = dy.row(i);
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }

  c.enc_out_drop.backward(denc);
  Matrix<T> dx = nn::rms_backward(denc, c.enc_final, p.store.span_of(L.enc_final_norm), G.span_of(L.enc_final_norm));
  const auto enc_geo = detail::encoder_geometry(p);
  for (std::size_t l = L.enc.size(); l-- > 0;) {
    nn::FfBlock<T> ff{p.store, L.enc[l].ff};
    dx = ff.backward(dx, c.enc_ff[l], G);
    nn::AttnBlock<T> attn{p.store, L.enc[l].attn, enc_geo, heads};
    dx = attn.backward(dx, nullptr, c.enc_attn[l], G, G.view(L.enc_relpos), G.view(L.enc_global_relpos), nullptr);
  }
  c.enc_embed_drop.backward(dx);
  auto dE = G.view(L.embedding);
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    auto dst = dE.row(static_cast<std::size_t>(c.inputs[i]));
    auto src = dx.row(i);
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
  }
}

/// Forward + backward for one example. Accumulates d(sum of token NLL) /
/// `normalizer` into G and returns the summed NLL over non-pad targets.
template <class T>
T accumulate_example_gradient(const Params<T>& p, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                              T normalizer, ParamStore<T>& G, Rng* dropout_rng = nullptr) {
  ForwardCache<T> c;
  forward(p, inputs, targets, &c, dropout_rng);
  Matrix<T> dlogits(c.logits.rows(), c.logits.cols());
  T nll = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == Vocab::kPad) continue;
    auto row = c.logits.row(t);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T v : row) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    nll += lse - row[static_cast<std::size_t>(targets[t])];
    auto drow = dlogits.row(t);
    for (std::size_t k = 0; k < row.size(); ++k) drow[k] = std::exp(row[k] - lse) / normalizer;
    drow[static_cast<std::size_t>(targets[t])] -= T(1) / normalizer;
  }
  backward(p, c, dlogits, G);
  return nll;
}

/// Mean-token loss of one example and its gradient.
template <class T>
std::pair<T, ParamStore<T>> loss_and_gradient(const Params<T>& p, std::span<const TokenId> inputs,
                                              std::span<const TokenId> targets) {
  ParamStore<T> G = zero_grads(p);
  const auto n = count_non_pad(targets);
  if (n == 0) throw Error("loss: every target position is padding");
  const T nll = accumulate_example_gradient(p, inputs, targets, static_cast<T>(n), G);
  return {nll / static_cast<T>(n), std::move(G)};
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
};

/// Compares the analytic gradient with central finite differences on
/// `sample_count` coordinates drawn uniformly from the tensors whose name
/// starts with `prefix` (all tensors when empty).
inline GradCheckResult grad_check(const Params<double>& params, std::span<const TokenId> inputs,
                                  std::span<const TokenId> targets, double epsilon, std::size_t sample_count,
                                  std::uint64_t seed = 0, std::string_view prefix = {}) {
  if (params.config.dropout != 0.0) throw Error("grad_check requires dropout 0");
  auto [base_loss, G] = loss_and_gradient(params, inputs, targets);
  (void)base_loss;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < params.store.entries().size(); ++i)
    if (params.store.entries()[i].name.starts_with(prefix)) pool.push_back(i);
  if (pool.empty()) throw Error("grad_check: no tensor matches prefix '" + std::string(prefix) + "'");
  std::size_t total = 0;
  for (auto i : pool) total += params.store.entries()[i].size();

  Params<double> probe = params;
  Rng rng(seed);
  GradCheckResult res;
  for (std::size_t s = 0; s < sample_count; ++s) {
    std::size_t pick = rng.below(total);
    std::size_t tensor = pool.front();
    for (auto i : pool) {
      const auto sz = params.store.entries()[i].size();
      if (pick < sz) {
        tensor = i;
        break;
      }
      pick -= sz;
    }
    const std::size_t coord = params.store.entries()[tensor].offset + pick;
    double& theta = probe.store.values()[coord];
    const double saved = theta;
    theta = saved + epsilon;
    const double up = loss(forward(probe, inputs, targets), targets);
    theta = saved - epsilon;
    const double down = loss(forward(probe, inputs, targets), targets);
    theta = saved;
    const double fd = (up - down) / (2.0 * epsilon);
    const double analytic = G.values()[coord];
    const double rel = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-8);
    if (rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst_tensor = params.store.entries()[tensor].name;
    }
    ++res.coordinates;
  }
  return res;
}

/// Greedy decoding until eos (included) or max_len tokens.
template <class T>
std::vector<TokenId> generate(const Params<T>& p, std::span<const TokenId> inputs, std::size_t max_len) {
  std::vector<TokenId> out;
  if (max_len == 0) return out;
  const Matrix<T> enc = encode(p, inputs);
  std::vector<TokenId> dec_in{Vocab::kPad};
  while (out.size() < max_len) {
    const Matrix<T> logits = decode_logits(p, enc, dec_in);
    auto last = logits.row(logits.rows() - 1);
    const auto best = static_cast<TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    out.push_back(best);
    if (best == Vocab::kEos) break;
    dec_in.push_back(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   # mlongt5 checkpoint v1
//   # config vocab_size=362 d_model=64 ...
//   name shape dtype offset
//   shared.embedding 362x64 f32 0
//   ...
//   # end
//   <raw little-endian float32 data, row-major, manifest order>

inline std::map<std::string, std::string> model_config_fields(const ModelConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"vocab_size", std::to_string(c.vocab_size)},
      {"d_model", std::to_string(c.d_model)},
      {"n_enc_layers", std::to_string(c.n_enc_layers)},
      {"n_dec_layers", std::to_string(c.n_dec_layers)},
      {"n_heads", std::to_string(c.n_heads)},
      {"head_dim", std::to_string(c.head_dim)},
      {"d_ff", std::to_string(c.d_ff)},
      {"local_radius", std::to_string(c.attention.local_radius)},
      {"block_size", std::to_string(c.attention.block_size)},
      {"relpos_buckets", std::to_string(c.attention.relpos_buckets)},
      {"relpos_max_distance", std::to_string(c.attention.relpos_max_distance)},
      {"dropout", num(c.dropout)},
  };
}

inline void set_model_config_field(ModelConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&] {
    try {
      std::size_t used = 0;
      int v = std::stoi(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw InputError("model config: '" + key + "' expects an integer, got '" + value + "'");
    }
  };
  if (key == "vocab_size") c.vocab_size = as_int();
  else if (key == "d_model") c.d_model = as_int();
  else if (key == "n_enc_layers") c.n_enc_layers = as_int();
  else if (key == "n_dec_layers") c.n_dec_layers = as_int();
  else if (key == "n_heads") c.n_heads = as_int();
  else if (key == "head_dim") c.head_dim = as_int();
  else if (key == "d_ff") c.d_ff = as_int();
  else if (key == "local_radius") c.attention.local_radius = as_int();
  else if (key == "block_size") c.attention.block_size = as_int();
  else if (key == "relpos_buckets") c.attention.relpos_buckets = as_int();
  else if (key == "relpos_max_distance") c.attention.relpos_max_distance = as_int();
  else if (key == "dropout") {
    try {
      c.dropout = std::stod(value);
    } catch (const std::exception&) {
      throw InputError("model config: 'dropout' expects a number, got '" + value + "'");
    }
  } else {
    throw InputError("model config: unknown field '" + key + "'");
  }
}

template <class T>
void save_checkpoint(std::ostream& os, const Params<T>& p) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  os << "# mlongt5 checkpoint v1\n# config";
  for (const auto& [k, v] : model_config_fields(p.config)) os << ' ' << k << '=' << v;
  os << "\nname shape dtype offset\n";
  std::size_t offset = 0;
  for (const auto& e : p.store.entries()) {
    os << e.name << ' ' << e.rows << 'x' << e.cols << " f32 " << offset << '\n';
    offset += e.size() * sizeof(float);
  }
  os << "# end\n";
  std::vector<float> buf(p.store.size());
  std::transform(p.store.values().begin(), p.store.values().end(), buf.begin(),
                 [](T v) { return static_cast<float>(v); });
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw Error("failed to write checkpoint");
}

template <class T>
void save_checkpoint(const std::string& path, const Params<T>& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  save_checkpoint(os, p);
}

template <class T>
Params<T> load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "# mlongt5 checkpoint v1") throw InputError("not an mlongt5 checkpoint");
  if (!std::getline(is, line) || !line.starts_with("# config")) throw InputError("checkpoint: missing config line");
  ModelConfig cfg;
  {
    std::istringstream fields(line.substr(8));
    std::string kv;
    while (fields >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InputError("checkpoint: malformed config entry '" + kv + "'");
      set_model_config_field(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
  }
  Params<T> p = empty_params<T>(cfg);
  if (!std::getline(is, line) || line != "name shape dtype offset") throw InputError("checkpoint: missing manifest header");
  std::size_t index = 0;
  std::size_t expected_offset = 0;
  while (std::getline(is, line) && line != "# end") {
    std::istringstream row(line);
    std::string name, shape, dtype;
    std::size_t offset = 0;
    if (!(row >> name >> shape >> dtype >> offset)) throw InputError("checkpoint: malformed manifest row '" + line + "'");
    if (index >= p.store.entries().size()) throw InputError("checkpoint: more tensors than the config implies");
    const auto& e = p.store.entries()[index];
    const std::string want = std::to_string(e.rows) + "x" + std::to_string(e.cols);
    if (name != e.name || shape != want || dtype != "f32" || offset != expected_offset) {
      throw InputError("checkpoint: manifest row '" + line + "' does not match expected " + e.name + " " + want);
    }
    expected_offset += e.size() * sizeof(float);
    ++index;
  }
  if (index != p.store.entries().size()) throw InputError("checkpoint: manifest is missing tensors");
  std::vector<float> buf(p.store.size());
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != buf.size() * sizeof(float)) throw InputError("checkpoint: truncated data");
  std::transform(buf.begin(), buf.end(), p.store.values().begin(), [](float v) { return static_cast<T>(v); });
  return p;
}

template <class T>
Params<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<T>(is);
}

}  // namespace mlongt5
