#pragma once

// Calibration of the JSD mutual-information estimator on discrete toys with
// a known optimum. Symbols x, y in [0, k) are embedded one-hot in d_model
// dimensions and scored by the same discriminator GLSL uses. Training pairs
// negatives by a within-batch derangement, as GLSL does; the final estimate
// is measured on fresh samples with negatives drawn from the product of
// marginals.

#include <chrono>

#include "plse/logic_mi.hpp"
#include "plse/optimizer.hpp"

namespace plse {

enum class JsdToyKind { independent, coupled };

struct JsdToyConfig {
  JsdToyKind kind = JsdToyKind::coupled;
  std::size_t k = 8;
  std::size_t d_model = 32;
  std::size_t batch = 256;
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t eval_pairs = 100000;
  std::uint64_t seed = 1;

  void validate() const {
    if (k < 2) throw Error("jsd toy: k must be at least 2");
    if (d_model < k) throw Error("jsd toy: d_model must be at least k for one-hot codes");
    if (batch < 2 || steps == 0 || eval_pairs == 0) throw Error("jsd toy: batch >= 2, steps > 0 and eval_pairs > 0 required");
  }
};

struct JsdToyResult {
  double estimate = 0;  // held-out estimate after training
  double oracle = 0;    // value of the estimator at T* = ln(joint / product)
  double seconds = 0;
  std::vector<double> curve;  // training-batch estimate every 100 steps
};

/// Joint distribution of the toy: uniform product, or uniform on the diagonal.
inline Mat<double> jsd_toy_joint(JsdToyKind kind, std::size_t k) {
  const auto n = static_cast<Eigen::Index>(k);
  if (kind == JsdToyKind::independent) return Mat<double>::Constant(n, n, 1.0 / static_cast<double>(k * k));
  Mat<double> j = Mat<double>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) j(i, i) = 1.0 / static_cast<double>(k);
  return j;
}

/// Exhaustive estimator value at the optimal critic T* = ln(p(x,y) / p(x)p(y)).
/// Cells with zero joint mass have T* = -inf and contribute nothing.
inline double jsd_oracle(const Mat<double>& joint) {
  const Eigen::VectorXd px = joint.rowwise().sum();
  const RowVec<double> py = joint.colwise().sum();
  double a = 0, b = 0;
  for (Eigen::Index x = 0; x < joint.rows(); ++x)
    for (Eigen::Index y = 0; y < joint.cols(); ++y) {
      if (joint(x, y) <= 0) continue;
      const double t = std::log(joint(x, y) / (px(x) * py(y)));
      a += joint(x, y) * -softplus(-t);
      b += px(x) * py(y) * softplus(t);
    }
  return a - b;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> draw_joint(JsdToyKind kind, std::size_t k, Rng& rng) {
  const auto x = static_cast<std::size_t>(uniform_index(rng, k));
  return {x, kind == JsdToyKind::coupled ? x : static_cast<std::size_t>(uniform_index(rng, k))};
}

inline void put_pair(Mat<double>& z, Eigen::Index row, std::size_t x, std::size_t y, std::size_t d) {
  z.row(row).setZero();
  z(row, static_cast<Eigen::Index>(x)) = 1.0;
  z(row, static_cast<Eigen::Index>(d + y)) = 1.0;
}

}  // namespace detail

inline JsdToyResult run_jsd_toy(const JsdToyConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  JsdToyResult res;
  res.oracle = jsd_oracle(jsd_toy_joint(cfg.kind, cfg.k));

  auto disc = DiscriminatorParams<double>::init(cfg.d_model, cfg.seed);
  AdamWConfig oc;
  oc.weight_decay = 0.0;
  AdamW<double> opt(oc);
  const auto n = static_cast<Eigen::Index>(cfg.batch);
  const auto w = static_cast<Eigen::Index>(2 * cfg.d_model);
  Rng rng(derive_seed(cfg.seed, {0x6a7364ULL}));
  Mat<double> z(2 * n, w);
  std::vector<std::size_t> xs(cfg.batch), ys(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch; ++i) std::tie(xs[i], ys[i]) = detail::draw_joint(cfg.kind, cfg.k, rng);
    const auto sigma = random_derangement(cfg.batch, rng);
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      detail::put_pair(z, static_cast<Eigen::Index>(i), xs[i], ys[i], cfg.d_model);
      detail::put_pair(z, static_cast<Eigen::Index>(i) + n, xs[sigma[i]], ys[i], cfg.d_model);
    }
    DiscriminatorCache<double> cache;
    const auto s = discriminate_rows(disc, z, &cache);
    Eigen::VectorXd ds(2 * n);
    std::vector<double> pos(cfg.batch), neg(cfg.batch);
    for (Eigen::Index i = 0; i < n; ++i) {
      pos[static_cast<std::size_t>(i)] = s(i);
      neg[static_cast<std::size_t>(i)] = s(i + n);
      // gradient of the loss -estimate
      ds(i) = -sigmoid(-s(i)) / static_cast<double>(n);
      ds(i + n) = sigmoid(s(i + n)) / static_cast<double>(n);
    }
    if (step % 100 == 0) res.curve.push_back(jsd_estimate(pos, neg));
    auto g = DiscriminatorParams<double>::zeros(cfg.d_model);
    discriminate_backward(disc, cache, ds, g);
    opt.step(disc.tensors(), g.tensors(), cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(cfg.steps)));
  }

  // held-out evaluation with product-of-marginals negatives
  Rng eval_rng(derive_seed(cfg.seed, {0x6a7364ULL, 1}));
  const auto m = static_cast<Eigen::Index>(cfg.eval_pairs);
  Mat<double> ze(2 * m, w);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto [x, y] = detail::draw_joint(cfg.kind, cfg.k, eval_rng);
    detail::put_pair(ze, i, x, y, cfg.d_model);
    const auto xn = detail::draw_joint(cfg.kind, cfg.k, eval_rng).first;
    const auto yn = detail::draw_joint(cfg.kind, cfg.k, eval_rng).second;
    detail::put_pair(ze, i + m, xn, yn, cfg.d_model);
  }
  const auto se = discriminate_rows(disc, ze);
  std::vector<double> pos(se.data(), se.data() + m), neg(se.data() + m, se.data() + 2 * m);
  res.estimate = jsd_estimate(pos, neg);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace plse
