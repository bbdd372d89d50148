#pragma once

#include "plse/tensor.hpp"

namespace plse {

/// Linear warmup to `peak` over the first floor(warmup_ratio * total)
/// steps, then linear decay reaching 0 at `total`. Steps count from 1.
inline double lr_at(std::size_t step, std::size_t total, double warmup_ratio, double peak) {
  if (total == 0) return 0.0;
  const auto warm = static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total)));
  if (step <= warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - warm);
}

template <class S>
double global_norm(const std::vector<TensorRef<S>>& grads) {
  double sq = 0;
  for (const auto& t : grads)
    for (Eigen::Index i = 0; i < t.size(); ++i) sq += static_cast<double>(t.data[i]) * static_cast<double>(t.data[i]);
  return std::sqrt(sq);
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
template <class S>
double clip_global_norm(const std::vector<TensorRef<S>>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / norm);
    for (const auto& t : grads)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] *= f;
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay applied to matrices only (biases and
/// layer-norm parameters are not decayed).
template <class S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<TensorRef<S>>& params, const std::vector<TensorRef<S>>& grads, double lr) {
    if (params.size() != grads.size()) throw Error("adamw: parameter/gradient layout mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), S(0));
        v_.emplace_back(static_cast<std::size_t>(p.size()), S(0));
        names_.push_back(p.name);
      }
    }
    if (m_.size() != params.size()) throw Error("adamw: parameter count changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S step_size = static_cast<S>(lr / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(cfg_.eps);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& p = params[k];
      const auto& g = grads[k];
      if (p.size() != g.size() || static_cast<std::size_t>(p.size()) != m_[k].size()) throw Error("adamw: shape mismatch in " + p.name);
      const S decay = p.is_matrix() ? static_cast<S>(1.0 - lr * cfg_.weight_decay) : S(1);
      S* m = m_[k].data();
      S* v = v_[k].data();
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const S gi = g.data[i];
        m[i] = b1 * m[i] + (S(1) - b1) * gi;
        v[i] = b2 * v[i] + (S(1) - b2) * gi * gi;
        p.data[i] = p.data[i] * decay - step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void configure(const AdamWConfig& cfg) { cfg_ = cfg; }

  /// Moment buffers exposed for checkpointing, named "<param>".
  std::vector<std::string>& names() { return names_; }
  std::vector<std::vector<S>>& first_moments() { return m_; }
  std::vector<std::vector<S>>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace plse
