#pragma once

// Small pre-layer-norm transformer encoder with learned positions, GELU
// feed-forward blocks and an MLM output layer tied to the token embedding.
// Forward and backward passes are written out by hand and templated on the
// scalar type: float for training, double for gradient checks.

#include <cmath>

#include "plse/tensor.hpp"
#include "plse/text_codec.hpp"

namespace plse {

struct EncoderConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  double dropout_p = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) throw Error("encoder config: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw Error("encoder config: d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    if (max_len < kTemplateMinLength) throw Error("encoder config: max_len below template minimum " + std::to_string(kTemplateMinLength));
    if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecial)) throw Error("encoder config: vocab_size too small");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error("encoder config: dropout_p must be in [0,1)");
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Closed-form parameter count for a configuration.
inline std::size_t encoder_parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  const std::size_t per_layer = 4 * d * d + 4 * d   // attention projections and biases
                                + 2 * d * f + f + d  // feed-forward
                                + 4 * d;             // two layer norms
  return c.vocab_size * d + c.max_len * d + c.n_layers * per_layer + 2 * d + c.vocab_size;
}

template <class S>
struct EncoderLayerParams {
  RowVec<S> ln1_g, ln1_b;
  Mat<S> wq, wk, wv, wo;
  RowVec<S> bq, bk, bv, bo;
  RowVec<S> ln2_g, ln2_b;
  Mat<S> w1;
  RowVec<S> b1;
  Mat<S> w2;
  RowVec<S> b2;
};

template <class S>
struct EncoderParams {
  EncoderConfig cfg;
  Mat<S> tok_emb;  // vocab x d, also the MLM output projection
  Mat<S> pos_emb;  // max_len x d
  std::vector<EncoderLayerParams<S>> layers;
  RowVec<S> lnf_g, lnf_b;
  RowVec<S> mlm_bias;

  /// Zero-valued parameters with the layout of `cfg`.
  static EncoderParams zeros(const EncoderConfig& cfg) {
    EncoderParams p;
    p.cfg = cfg;
    const auto d = static_cast<Eigen::Index>(cfg.d_model), f = static_cast<Eigen::Index>(cfg.d_ff);
    p.tok_emb = Mat<S>::Zero(static_cast<Eigen::Index>(cfg.vocab_size), d);
    p.pos_emb = Mat<S>::Zero(static_cast<Eigen::Index>(cfg.max_len), d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.ln1_g = RowVec<S>::Zero(d);
      l.ln1_b = RowVec<S>::Zero(d);
      l.wq = Mat<S>::Zero(d, d);
      l.wk = Mat<S>::Zero(d, d);
      l.wv = Mat<S>::Zero(d, d);
      l.wo = Mat<S>::Zero(d, d);
      l.bq = RowVec<S>::Zero(d);
      l.bk = RowVec<S>::Zero(d);
      l.bv = RowVec<S>::Zero(d);
      l.bo = RowVec<S>::Zero(d);
      l.ln2_g = RowVec<S>::Zero(d);
      l.ln2_b = RowVec<S>::Zero(d);
      l.w1 = Mat<S>::Zero(d, f);
      l.b1 = RowVec<S>::Zero(f);
      l.w2 = Mat<S>::Zero(f, d);
      l.b2 = RowVec<S>::Zero(d);
    }
    p.lnf_g = RowVec<S>::Zero(d);
    p.lnf_b = RowVec<S>::Zero(d);
    p.mlm_bias = RowVec<S>::Zero(static_cast<Eigen::Index>(cfg.vocab_size));
    return p;
  }

  std::vector<TensorRef<S>> tensors(const std::string& prefix = "") {
    std::vector<TensorRef<S>> out;
    add_ref(out, prefix + "tok_emb", tok_emb);
    add_ref(out, prefix + "pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const auto p = prefix + "layer" + std::to_string(i) + ".";
      add_ref(out, p + "ln1_g", l.ln1_g);
      add_ref(out, p + "ln1_b", l.ln1_b);
      add_ref(out, p + "wq", l.wq);
      add_ref(out, p + "wk", l.wk);
      add_ref(out, p + "wv", l.wv);
      add_ref(out, p + "wo", l.wo);
      add_ref(out, p + "bq", l.bq);
      add_ref(out, p + "bk", l.bk);
      add_ref(out, p + "bv", l.bv);
      add_ref(out, p + "bo", l.bo);
      add_ref(out, p + "ln2_g", l.ln2_g);
      add_ref(out, p + "ln2_b", l.ln2_b);
      add_ref(out, p + "w1", l.w1);
      add_ref(out, p + "b1", l.b1);
      add_ref(out, p + "w2", l.w2);
      add_ref(out, p + "b2", l.b2);
    }
    add_ref(out, prefix + "lnf_g", lnf_g);
    add_ref(out, prefix + "lnf_b", lnf_b);
    add_ref(out, prefix + "mlm_bias", mlm_bias);
    return out;
  }
};

inline constexpr double kInitStd = 0.02;

/// Weights ~ N(0, 0.02^2), biases zero, layer-norm gains one.
template <class S>
EncoderParams<S> init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  auto p = EncoderParams<S>::zeros(cfg);
  Rng rng(derive_seed(cfg.seed, {0x656e63ULL}));
  fill_normal(p.tok_emb, rng, kInitStd);
  fill_normal(p.pos_emb, rng, kInitStd);
  for (auto& l : p.layers) {
    for (Mat<S>* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) fill_normal(*w, rng, kInitStd);
    l.ln1_g.setOnes();
    l.ln2_g.setOnes();
  }
  p.lnf_g.setOnes();
  return p;
}

// ---------------------------------------------------------------------------
// Building blocks

inline constexpr double kLayerNormEps = 1e-12;

template <class S>
struct LayerNormCache {
  Mat<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <class S>
Mat<S> layer_norm_forward(const Mat<S>& x, const RowVec<S>& g, const RowVec<S>& b, LayerNormCache<S>& cache) {
  const auto n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
  }
  Mat<S> y = (cache.xhat.array().rowwise() * g.array()).rowwise() + b.array();
  return y;
}

/// Returns dx; accumulates dg, db.
template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const RowVec<S>& g, const LayerNormCache<S>& cache, RowVec<S>& dg, RowVec<S>& db) {
  dg += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  Mat<S> dxhat = dy.array().rowwise() * g.array();
  Mat<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S m1 = dxhat.row(i).mean();
    const S m2 = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2);
  }
  return dx;
}

template <class S>
S gelu(S x) {
  return static_cast<S>(0.5) * x * (S(1) + std::erf(x * static_cast<S>(0.70710678118654752440)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = static_cast<S>(0.5) * (S(1) + std::erf(x * static_cast<S>(0.70710678118654752440)));
  const S pdf = std::exp(static_cast<S>(-0.5) * x * x) * static_cast<S>(0.39894228040143267794);
  return cdf + x * pdf;
}

/// Row-wise softmax; entries where `key_valid` is zero get weight 0.
template <class S>
void masked_softmax_rows(Mat<S>& scores, const std::vector<std::uint8_t>& key_valid) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      if (key_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, scores(i, j));
    S sum = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const S e = key_valid[static_cast<std::size_t>(j)] ? std::exp(scores(i, j) - mx) : S(0);
      scores(i, j) = e;
      sum += e;
    }
    scores.row(i) /= sum;
  }
}

enum class Mode { train, eval };

template <class S>
struct EncoderLayerCache {
  Mat<S> x_in;
  LayerNormCache<S> ln1;
  Mat<S> a_in, q, k, v;
  std::vector<Mat<S>> probs;  // per head, n x n
  Mat<S> ctx;
  Mat<S> drop1;  // scaled keep mask, empty when dropout is off
  LayerNormCache<S> ln2;
  Mat<S> f_in, ff_pre, ff_act;
  Mat<S> drop2;
};

template <class S>
struct EncoderActivations {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attn_mask;
  std::vector<EncoderLayerCache<S>> layers;
  LayerNormCache<S> lnf;
  Mat<S> H;  // n x d, contextualised token representations
};

struct BackwardOptions {
  // Test hook: flips the sign of this layer's first feed-forward weight
  // gradient so the gradient checker can be shown to catch the error.
  int fault_layer = -1;
};

namespace detail {

template <class S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<S> m(rows, cols);
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform01(rng) < p ? S(0) : scale;
  return m;
}

}  // namespace detail

/// Runs the encoder over one sequence. `dropout_rng` is required in train
/// mode when dropout_p > 0; eval mode never draws from it.
template <class S>
void encoder_forward(const EncoderParams<S>& p, const std::vector<TokenId>& ids, const std::vector<std::uint8_t>& attn_mask, Mode mode,
                     Rng* dropout_rng, EncoderActivations<S>& act) {
  const auto& cfg = p.cfg;
  const auto n = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  if (ids.empty()) throw Error("encoder_forward: empty sequence");
  if (ids.size() > cfg.max_len) throw Error("encoder_forward: sequence length " + std::to_string(ids.size()) + " exceeds max_len");
  if (attn_mask.size() != ids.size()) throw Error("encoder_forward: attention mask length mismatch");
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) throw Error("encoder_forward: token id " + std::to_string(id) + " out of range");
  const bool use_dropout = mode == Mode::train && cfg.dropout_p > 0.0;
  if (use_dropout && !dropout_rng) throw Error("encoder_forward: train mode with dropout needs an rng");

  act.ids = ids;
  act.attn_mask = attn_mask;
  act.layers.resize(cfg.n_layers);
  Mat<S> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = p.tok_emb.row(ids[static_cast<std::size_t>(i)]) + p.pos_emb.row(i);

  const auto heads = static_cast<Eigen::Index>(cfg.n_heads);
  const Eigen::Index dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    const auto& L = p.layers[li];
    auto& c = act.layers[li];
    c.x_in = x;
    c.a_in = layer_norm_forward(x, L.ln1_g, L.ln1_b, c.ln1);
    c.q.noalias() = c.a_in * L.wq;
    c.q.rowwise() += L.bq;
    c.k.noalias() = c.a_in * L.wk;
    c.k.rowwise() += L.bk;
    c.v.noalias() = c.a_in * L.wv;
    c.v.rowwise() += L.bv;
    c.probs.resize(static_cast<std::size_t>(heads));
    c.ctx.resize(n, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
      auto& P = c.probs[static_cast<std::size_t>(h)];
      P.noalias() = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
      masked_softmax_rows(P, attn_mask);
      c.ctx.middleCols(h * dh, dh).noalias() = P * c.v.middleCols(h * dh, dh);
    }
    Mat<S> attn_out = c.ctx * L.wo;
    attn_out.rowwise() += L.bo;
    if (use_dropout) {
      c.drop1 = detail::dropout_mask<S>(n, d, cfg.dropout_p, *dropout_rng);
      attn_out.array() *= c.drop1.array();
    } else {
      c.drop1.resize(0, 0);
    }
    x += attn_out;
    c.f_in = layer_norm_forward(x, L.ln2_g, L.ln2_b, c.ln2);
    c.ff_pre.noalias() = c.f_in * L.w1;
    c.ff_pre.rowwise() += L.b1;
    c.ff_act = c.ff_pre.unaryExpr([](S v) { return gelu(v); });
    Mat<S> ff_out = c.ff_act * L.w2;
    ff_out.rowwise() += L.b2;
    if (use_dropout) {
      c.drop2 = detail::dropout_mask<S>(n, d, cfg.dropout_p, *dropout_rng);
      ff_out.array() *= c.drop2.array();
    } else {
      c.drop2.resize(0, 0);
    }
    x += ff_out;
  }
  act.H = layer_norm_forward(x, p.lnf_g, p.lnf_b, act.lnf);
}

/// Back-propagates dL/dH through the encoder, accumulating into `g`.
template <class S>
void encoder_backward(const EncoderParams<S>& p, const EncoderActivations<S>& act, const Mat<S>& dH, EncoderParams<S>& g,
                      const BackwardOptions& opts = {}) {
  const auto& cfg = p.cfg;
  const auto n = act.H.rows();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto heads = static_cast<Eigen::Index>(cfg.n_heads);
  const Eigen::Index dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Mat<S> dx = layer_norm_backward(dH, p.lnf_g, act.lnf, g.lnf_g, g.lnf_b);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = g.layers[li];
    const auto& c = act.layers[li];

    // feed-forward branch
    Mat<S> d_ff_out = dx;
    if (c.drop2.size()) d_ff_out.array() *= c.drop2.array();
    G.w2.noalias() += c.ff_act.transpose() * d_ff_out;
    G.b2 += d_ff_out.colwise().sum();
    Mat<S> d_ff_pre = d_ff_out * L.w2.transpose();
    for (Eigen::Index i = 0; i < d_ff_pre.size(); ++i) d_ff_pre.data()[i] *= gelu_grad(c.ff_pre.data()[i]);
    if (static_cast<int>(li) == opts.fault_layer)
      G.w1.noalias() -= c.f_in.transpose() * d_ff_pre;
    else
      G.w1.noalias() += c.f_in.transpose() * d_ff_pre;
    G.b1 += d_ff_pre.colwise().sum();
    Mat<S> d_f_in = d_ff_pre * L.w1.transpose();
    dx += layer_norm_backward(d_f_in, L.ln2_g, c.ln2, G.ln2_g, G.ln2_b);

    // attention branch
    Mat<S> d_attn = dx;
    if (c.drop1.size()) d_attn.array() *= c.drop1.array();
    G.wo.noalias() += c.ctx.transpose() * d_attn;
    G.bo += d_attn.colwise().sum();
    Mat<S> d_ctx = d_attn * L.wo.transpose();
    Mat<S> dq(n, d), dk(n, d), dv(n, d);
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto& P = c.probs[static_cast<std::size_t>(h)];
      const auto dctx_h = d_ctx.middleCols(h * dh, dh);
      Mat<S> dP = dctx_h * c.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dctx_h;
      Mat<S> dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
      dS *= scale;
      dq.middleCols(h * dh, dh).noalias() = dS * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dS.transpose() * c.q.middleCols(h * dh, dh);
    }
    G.wq.noalias() += c.a_in.transpose() * dq;
    G.wk.noalias() += c.a_in.transpose() * dk;
    G.wv.noalias() += c.a_in.transpose() * dv;
    G.bq += dq.colwise().sum();
    G.bk += dk.colwise().sum();
    G.bv += dv.colwise().sum();
    Mat<S> d_a_in = dq * L.wq.transpose();
    d_a_in.noalias() += dk * L.wk.transpose();
    d_a_in.noalias() += dv * L.wv.transpose();
    dx += layer_norm_backward(d_a_in, L.ln1_g, c.ln1, G.ln1_g, G.ln1_b);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    g.tok_emb.row(act.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    g.pos_emb.row(i) += dx.row(i);
  }
}

/// Logits over the vocabulary at `positions`: H[pos] E^T + b.
template <class S>
Mat<S> mlm_logits(const EncoderParams<S>& p, const Mat<S>& H, const std::vector<std::size_t>& positions) {
  Mat<S> hp(static_cast<Eigen::Index>(positions.size()), H.cols());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    if (positions[k] >= static_cast<std::size_t>(H.rows())) throw Error("mlm_logits: position out of range");
    hp.row(static_cast<Eigen::Index>(k)) = H.row(static_cast<Eigen::Index>(positions[k]));
  }
  Mat<S> logits = hp * p.tok_emb.transpose();
  logits.rowwise() += p.mlm_bias;
  return logits;
}

/// Backward of mlm_logits: accumulates into g.tok_emb, g.mlm_bias and dH.
template <class S>
void mlm_logits_backward(const EncoderParams<S>& p, const Mat<S>& H, const std::vector<std::size_t>& positions, const Mat<S>& dlogits,
                         EncoderParams<S>& g, Mat<S>& dH) {
  if (positions.empty()) return;
  Mat<S> hp(static_cast<Eigen::Index>(positions.size()), H.cols());
  for (std::size_t k = 0; k < positions.size(); ++k) hp.row(static_cast<Eigen::Index>(k)) = H.row(static_cast<Eigen::Index>(positions[k]));
  g.tok_emb.noalias() += dlogits.transpose() * hp;
  g.mlm_bias += dlogits.colwise().sum();
  Mat<S> dhp = dlogits * p.tok_emb;
  for (std::size_t k = 0; k < positions.size(); ++k)
    dH.row(static_cast<Eigen::Index>(positions[k])) += dhp.row(static_cast<Eigen::Index>(k));
}

/// Convenience batch forward returning H for each instance.
template <class S>
std::vector<Mat<S>> forward(const EncoderParams<S>& p, const std::vector<MaskedEncoding>& batch, Mode mode, std::uint64_t dropout_seed = 0,
                            int threads = 1) {
  std::vector<Mat<S>> out(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    EncoderActivations<S> act;
    Rng rng(derive_seed(dropout_seed, {i}));
    encoder_forward(p, batch[i].base.token_ids, batch[i].base.attn_mask, mode, &rng, act);
    out[i] = std::move(act.H);
  });
  return out;
}

}  // namespace plse
