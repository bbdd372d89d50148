#pragma once

// Global-logic extraction and mutual-information maximisation.
//
// A cross-attention block uses the slot vector as its single query and the
// concatenated argument representations as keys/values; its output is scored
// against the slot vector by a three-layer discriminator, and the scores enter
// a Jensen-Shannon lower bound on mutual information. Negatives pair each
// slot vector with the global vector of another batch member chosen by a
// random derangement.

#include "plse/tensor.hpp"

namespace plse {

/// Stable softplus: log(1 + e^z) = max(z, 0) + log1p(e^{-|z|}).
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

template <class S>
struct MHCAParams {
  std::size_t n_heads = 1;
  Mat<S> wq, wk, wv, wo;
  RowVec<S> bq, bk, bv, bo;

  static MHCAParams zeros(std::size_t d_model, std::size_t n_heads) {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw Error("mhca: d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    MHCAParams p;
    p.n_heads = n_heads;
    const auto d = static_cast<Eigen::Index>(d_model);
    for (Mat<S>* w : {&p.wq, &p.wk, &p.wv, &p.wo}) *w = Mat<S>::Zero(d, d);
    for (RowVec<S>* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = RowVec<S>::Zero(d);
    return p;
  }

  static MHCAParams init(std::size_t d_model, std::size_t n_heads, std::uint64_t seed, double stddev = 0.02) {
    auto p = zeros(d_model, n_heads);
    Rng rng(derive_seed(seed, {0x6d686361ULL}));
    for (Mat<S>* w : {&p.wq, &p.wk, &p.wv, &p.wo}) fill_normal(*w, rng, stddev);
    return p;
  }

  std::size_t d_model() const { return static_cast<std::size_t>(wq.rows()); }

  std::vector<TensorRef<S>> tensors(const std::string& prefix = "") {
    std::vector<TensorRef<S>> out;
    add_ref(out, prefix + "wq", wq);
    add_ref(out, prefix + "wk", wk);
    add_ref(out, prefix + "wv", wv);
    add_ref(out, prefix + "wo", wo);
    add_ref(out, prefix + "bq", bq);
    add_ref(out, prefix + "bk", bk);
    add_ref(out, prefix + "bv", bv);
    add_ref(out, prefix + "bo", bo);
    return out;
  }
};

template <class S>
struct MHCACache {
  RowVec<S> query_in;
  Mat<S> kv_in;
  RowVec<S> q;
  Mat<S> k, v;
  Mat<S> probs;  // heads x keys
  RowVec<S> ctx;
};

/// Single-query multi-head attention: Q = h_cmask, K = V = kv (arg1 rows
/// followed by arg2 rows). Returns h_glogic.
template <class S>
RowVec<S> mhca_forward(const MHCAParams<S>& p, const RowVec<S>& h_cmask, const Mat<S>& kv, MHCACache<S>* cache = nullptr) {
  if (kv.rows() == 0) throw Error("mhca: both argument spans are empty");
  if (kv.cols() != p.wk.rows() || h_cmask.cols() != p.wq.rows()) throw Error("mhca: dimension mismatch");
  const auto d = p.wq.rows();
  const auto heads = static_cast<Eigen::Index>(p.n_heads);
  const Eigen::Index dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  RowVec<S> q = h_cmask * p.wq + p.bq;
  Mat<S> k = kv * p.wk;
  k.rowwise() += p.bk;
  Mat<S> v = kv * p.wv;
  v.rowwise() += p.bv;
  Mat<S> probs(heads, kv.rows());
  RowVec<S> ctx(d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    RowVec<S> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    const S mx = s.maxCoeff();
    s = (s.array() - mx).exp();
    s /= s.sum();
    probs.row(h) = s;
    ctx.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
  }
  RowVec<S> out = ctx * p.wo + p.bo;
  if (cache) {
    cache->query_in = h_cmask;
    cache->kv_in = kv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
  }
  return out;
}

/// Accumulates parameter gradients into g; writes d(query) and d(kv).
template <class S>
void mhca_backward(const MHCAParams<S>& p, const MHCACache<S>& c, const RowVec<S>& dout, MHCAParams<S>& g, RowVec<S>& dquery, Mat<S>& dkv) {
  const auto d = p.wq.rows();
  const auto heads = static_cast<Eigen::Index>(p.n_heads);
  const Eigen::Index dh = d / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  g.wo.noalias() += c.ctx.transpose() * dout;
  g.bo += dout;
  RowVec<S> dctx = dout * p.wo.transpose();
  RowVec<S> dq(d);
  Mat<S> dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const RowVec<S> a = c.probs.row(h);
    const auto dctx_h = dctx.middleCols(h * dh, dh);
    RowVec<S> da = dctx_h * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * dctx_h;
    const S dot = (da.array() * a.array()).sum();
    RowVec<S> ds = (a.array() * (da.array() - dot)).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  g.wq.noalias() += c.query_in.transpose() * dq;
  g.bq += dq;
  g.wk.noalias() += c.kv_in.transpose() * dk;
  g.bk += dk.colwise().sum();
  g.wv.noalias() += c.kv_in.transpose() * dv;
  g.bv += dv.colwise().sum();
  dquery = dq * p.wq.transpose();
  dkv = dk * p.wk.transpose();
  dkv.noalias() += dv * p.wv.transpose();
}

// ---------------------------------------------------------------------------
// Discriminator: concat(h_glogic, h_cmask) -> 2d->d ReLU -> d->d ReLU -> d->1

template <class S>
struct DiscriminatorParams {
  Mat<S> w1, w2, w3;
  RowVec<S> b1, b2, b3;

  static DiscriminatorParams zeros(std::size_t d_model) {
    DiscriminatorParams p;
    const auto d = static_cast<Eigen::Index>(d_model);
    p.w1 = Mat<S>::Zero(2 * d, d);
    p.w2 = Mat<S>::Zero(d, d);
    p.w3 = Mat<S>::Zero(d, 1);
    p.b1 = RowVec<S>::Zero(d);
    p.b2 = RowVec<S>::Zero(d);
    p.b3 = RowVec<S>::Zero(1);
    return p;
  }

  /// He-style init scaled by fan-in; the score starts near zero.
  static DiscriminatorParams init(std::size_t d_model, std::uint64_t seed) {
    auto p = zeros(d_model);
    Rng rng(derive_seed(seed, {0x64697363ULL}));
    const double d = static_cast<double>(d_model);
    fill_normal(p.w1, rng, std::sqrt(2.0 / (2.0 * d)));
    fill_normal(p.w2, rng, std::sqrt(2.0 / d));
    fill_normal(p.w3, rng, std::sqrt(1.0 / d));
    return p;
  }

  std::size_t d_model() const { return static_cast<std::size_t>(w2.rows()); }

  std::vector<TensorRef<S>> tensors(const std::string& prefix = "") {
    std::vector<TensorRef<S>> out;
    add_ref(out, prefix + "w1", w1);
    add_ref(out, prefix + "b1", b1);
    add_ref(out, prefix + "w2", w2);
    add_ref(out, prefix + "b2", b2);
    add_ref(out, prefix + "w3", w3);
    add_ref(out, prefix + "b3", b3);
    return out;
  }
};

namespace detail {
// When set, discriminate_rows records the smallest |pre-activation| it sees.
// The gradient checker uses it to keep evaluation points away from ReLU kinks.
inline thread_local double* relu_margin_sink = nullptr;
}  // namespace detail

template <class S>
struct DiscriminatorCache {
  Mat<S> z, h1_pre, h1, h2_pre, h2;
};

/// Scores each row of [glogic | cmask] (P x 2d).
template <class S>
Eigen::Matrix<S, Eigen::Dynamic, 1> discriminate_rows(const DiscriminatorParams<S>& p, const Mat<S>& z, DiscriminatorCache<S>* cache = nullptr) {
  if (z.cols() != p.w1.rows()) throw Error("discriminate: expected input width " + std::to_string(p.w1.rows()));
  Mat<S> h1_pre = z * p.w1;
  h1_pre.rowwise() += p.b1;
  Mat<S> h1 = h1_pre.cwiseMax(S(0));
  Mat<S> h2_pre = h1 * p.w2;
  h2_pre.rowwise() += p.b2;
  Mat<S> h2 = h2_pre.cwiseMax(S(0));
  if (detail::relu_margin_sink)
    *detail::relu_margin_sink = std::min({*detail::relu_margin_sink, static_cast<double>(h1_pre.cwiseAbs().minCoeff()),
                                          static_cast<double>(h2_pre.cwiseAbs().minCoeff())});
  Eigen::Matrix<S, Eigen::Dynamic, 1> score = h2 * p.w3;
  score.array() += p.b3(0);
  if (cache) {
    cache->z = z;
    cache->h1_pre = std::move(h1_pre);
    cache->h1 = std::move(h1);
    cache->h2_pre = std::move(h2_pre);
    cache->h2 = std::move(h2);
  }
  return score;
}

template <class S>
S discriminate(const DiscriminatorParams<S>& p, const RowVec<S>& h_glogic, const RowVec<S>& h_cmask) {
  Mat<S> z(1, h_glogic.cols() + h_cmask.cols());
  z << h_glogic, h_cmask;
  return discriminate_rows(p, z)(0);
}

/// Returns dz (P x 2d); accumulates parameter gradients.
template <class S>
Mat<S> discriminate_backward(const DiscriminatorParams<S>& p, const DiscriminatorCache<S>& c, const Eigen::Matrix<S, Eigen::Dynamic, 1>& dscore,
                             DiscriminatorParams<S>& g) {
  g.w3.noalias() += c.h2.transpose() * dscore;
  g.b3(0) += dscore.sum();
  Mat<S> dh2 = dscore * p.w3.transpose();
  dh2.array() *= (c.h2_pre.array() > S(0)).template cast<S>();
  g.w2.noalias() += c.h1.transpose() * dh2;
  g.b2 += dh2.colwise().sum();
  Mat<S> dh1 = dh2 * p.w2.transpose();
  dh1.array() *= (c.h1_pre.array() > S(0)).template cast<S>();
  g.w1.noalias() += c.z.transpose() * dh1;
  g.b1 += dh1.colwise().sum();
  return dh1 * p.w1.transpose();
}

// ---------------------------------------------------------------------------
// Estimator

/// mean_pos[-sp(-T)] - mean_neg[sp(T)]; always <= 0.
inline double jsd_estimate(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw Error("jsd_estimate: score lists must be non-empty");
  double a = 0, b = 0;
  for (double t : pos) a += -softplus(-t);
  for (double t : neg) b += softplus(t);
  return a / static_cast<double>(pos.size()) - b / static_cast<double>(neg.size());
}

/// Uniform random derangement of {0..n-1} (rejection from uniform shuffles).
inline std::vector<std::size_t> random_derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw Error("derangement needs at least 2 elements");
  std::vector<std::size_t> perm(n);
  for (;;) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    shuffle(perm, rng);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) ok = perm[i] != i;
    if (ok) return perm;
  }
}

inline bool is_derangement(const std::vector<std::size_t>& perm) {
  std::vector<char> seen(perm.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || perm[i] == i || seen[perm[i]]) return false;
    seen[perm[i]] = 1;
  }
  return true;
}

/// Per-instance inputs to the GLSL objective.
template <class S>
struct MIBatch {
  std::vector<RowVec<S>> h_cmask;  // slot vectors
  std::vector<Mat<S>> kv;          // arg1 rows then arg2 rows
  std::vector<std::size_t> negative_of;  // sigma: negative for i uses glogic of sigma[i]
};

template <class S>
struct GlslResult {
  double loss = 0;
  double estimate = 0;
  std::vector<double> pos_scores, neg_scores;
  std::vector<RowVec<S>> d_cmask;  // filled when gradients are requested
  std::vector<Mat<S>> d_kv;
};

/// -JSD estimate with positives (glogic_i, cmask_i) and negatives
/// (glogic_sigma(i), cmask_i). When `g_mhca`/`g_disc` are given, parameter
/// gradients are accumulated and input gradients returned in the result.
template <class S>
GlslResult<S> glsl_loss(const MHCAParams<S>& mhca, const DiscriminatorParams<S>& disc, const MIBatch<S>& batch,
                        MHCAParams<S>* g_mhca = nullptr, DiscriminatorParams<S>* g_disc = nullptr) {
  const std::size_t n = batch.h_cmask.size();
  if (n < 2) throw Error("glsl_loss: batch size must be at least 2 to form negatives");
  if (batch.kv.size() != n || batch.negative_of.size() != n) throw Error("glsl_loss: batch arrays disagree in size");
  if (!is_derangement(batch.negative_of)) throw Error("glsl_loss: negative pairing must be a derangement");
  const bool want_grad = g_mhca && g_disc;
  const auto d = static_cast<Eigen::Index>(mhca.d_model());

  std::vector<MHCACache<S>> caches(n);
  std::vector<RowVec<S>> glogic(n);
  for (std::size_t i = 0; i < n; ++i) glogic[i] = mhca_forward(mhca, batch.h_cmask[i], batch.kv[i], want_grad ? &caches[i] : nullptr);

  // rows 0..n-1 positives, n..2n-1 negatives
  Mat<S> z(2 * static_cast<Eigen::Index>(n), 2 * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    z.row(r) << glogic[i], batch.h_cmask[i];
    z.row(r + static_cast<Eigen::Index>(n)) << glogic[batch.negative_of[i]], batch.h_cmask[i];
  }
  DiscriminatorCache<S> dcache;
  const auto scores = discriminate_rows(disc, z, want_grad ? &dcache : nullptr);

  GlslResult<S> res;
  for (std::size_t i = 0; i < n; ++i) {
    res.pos_scores.push_back(static_cast<double>(scores(static_cast<Eigen::Index>(i))));
    res.neg_scores.push_back(static_cast<double>(scores(static_cast<Eigen::Index>(i + n))));
  }
  res.estimate = jsd_estimate(res.pos_scores, res.neg_scores);
  res.loss = -res.estimate;
  if (!want_grad) return res;

  const double inv = 1.0 / static_cast<double>(n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> dscore(2 * static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    dscore(static_cast<Eigen::Index>(i)) = static_cast<S>(-sigmoid(-res.pos_scores[i]) * inv);
    dscore(static_cast<Eigen::Index>(i + n)) = static_cast<S>(sigmoid(res.neg_scores[i]) * inv);
  }
  const Mat<S> dz = discriminate_backward(disc, dcache, dscore, *g_disc);

  std::vector<RowVec<S>> d_glogic(n, RowVec<S>::Zero(d));
  res.d_cmask.assign(n, RowVec<S>::Zero(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d_glogic[i] += dz.row(r).leftCols(d);
    res.d_cmask[i] += dz.row(r).rightCols(d);
    d_glogic[batch.negative_of[i]] += dz.row(r + static_cast<Eigen::Index>(n)).leftCols(d);
    res.d_cmask[i] += dz.row(r + static_cast<Eigen::Index>(n)).rightCols(d);
  }
  res.d_kv.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    RowVec<S> dq;
    mhca_backward(mhca, caches[i], d_glogic[i], *g_mhca, dq, res.d_kv[i]);
    res.d_cmask[i] += dq;
  }
  return res;
}

}  // namespace plse
