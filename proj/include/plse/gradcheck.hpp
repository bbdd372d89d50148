#pragma once

// Central finite-difference checks of every backward pass, in double.

#include "plse/model.hpp"

namespace plse {

struct GradCheckResult {
  std::string module;
  double max_rel_err = 0;
  std::string worst;  // tensor with the largest error
  std::size_t probes = 0;  // coordinates checked
};

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Per-tensor comparison of the analytic gradient with a coordinate-wise
/// central difference (L(p + eps e_i) - L(p - eps e_i)) / 2 eps. The error of
/// a tensor is ||g - fd|| / max(||g||, ||fd||, floor). `loss(want_grad)`
/// evaluates at the current parameters and fills the gradient viewed by
/// `grad` when asked.
template <class LossFn>
double tensor_error(const TensorRef<double>& param, const TensorRef<double>& grad, LossFn&& loss, double eps, double floor = 1e-6) {
  double diff = 0, na = 0, nn = 0;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + eps;
    const double up = loss(false);
    param.data[i] = saved - eps;
    const double down = loss(false);
    param.data[i] = saved;
    const double fd = (up - down) / (2 * eps);
    const double an = grad.data[i];
    diff += (an - fd) * (an - fd);
    na += an * an;
    nn += fd * fd;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

inline constexpr double kReluMargin = 0.02;

struct GradCheckOptions {
  double eps = 1e-3;
  std::uint64_t seed = 7;
  int fault_layer = -1;  // mutation test: corrupt one layer's backward
  double param_scale = 0.4;
};

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> m = {"encoder", "mhca", "discriminator", "cm", "mlm", "glsl", "tune", "mtl_cls", "mtl_mean"};
  return m;
}

namespace detail {

inline EncoderConfig gradcheck_encoder_config(std::uint64_t seed) {
  EncoderConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = 16;
  c.vocab_size = 24;
  c.dropout_p = 0.1;
  c.seed = seed;
  return c;
}

/// A small batch with every mask feature exercised: one pair with its
/// slot masked, one with the slot kept, universal positions in both.
inline std::vector<MaskedEncoding> gradcheck_batch(std::size_t vocab, std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x6263ULL}));
  std::vector<MaskedEncoding> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<TokenId> a1, a2;
    for (std::size_t k = 0; k < 3 + i; ++k) a1.push_back(static_cast<TokenId>(Vocab::kNumSpecial + uniform_index(rng, vocab - Vocab::kNumSpecial)));
    for (std::size_t k = 0; k < 4; ++k) a2.push_back(static_cast<TokenId>(Vocab::kNumSpecial + uniform_index(rng, vocab - Vocab::kNumSpecial)));
    auto enc = templatize_ids(a1, a2, 16);
    const auto gold = static_cast<TokenId>(Vocab::kNumSpecial + i);
    MaskedEncoding m = apply_connective_mask(enc, gold, rng, i % 2 == 0 ? 1.0 : 0.0);
    // deterministic universal positions: first token of each argument
    for (std::size_t pos : {m.base.arg1_span.begin, m.base.arg2_span.begin + 1}) {
      m.mlm_positions.push_back(pos);
      m.mlm_targets.push_back(m.base.token_ids[pos]);
      m.base.token_ids[pos] = Vocab::kMask;
    }
    if (i == 1) {  // an instance with a single masked position
      m.mlm_positions.pop_back();
      m.base.token_ids[m.base.arg2_span.begin + 1] = m.mlm_targets.back();
      m.mlm_targets.pop_back();
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

/// Runs the finite-difference check for one named module.
inline GradCheckResult run_gradcheck(const std::string& module, const GradCheckOptions& opt = {}) {
  const auto& mods = gradcheck_modules();
  if (std::find(mods.begin(), mods.end(), module) == mods.end()) throw Error("gradcheck: unknown module '" + module + "'");
  const auto cfg = detail::gradcheck_encoder_config(opt.seed);
  const std::size_t n = module == "tune" ? 3 : 2;
  auto batch = detail::gradcheck_batch(cfg.vocab_size, n, opt.seed);

  LossSwitches sw;
  sw.cm = module == "encoder" || module == "mhca" || module == "discriminator" || module == "cm";
  sw.mlm = module == "encoder" || module == "mhca" || module == "discriminator" || module == "mlm";
  sw.glsl = module == "encoder" || module == "mhca" || module == "discriminator" || module == "glsl";
  if (module == "mtl_cls") sw.mtl = MtlVariant::cls;
  if (module == "mtl_mean") sw.mtl = MtlVariant::mean;
  const bool is_tune = module == "tune";
  if (is_tune) sw.cm = sw.mlm = sw.glsl = false;

  auto model = init_model<double>(cfg, sw.glsl, 2, sw.mtl != MtlVariant::none ? 5 : 0);
  // At the 0.02 init scale pre-norm activations are so small that an eps
  // of 1e-3 is no longer a small step; unit-scale parameters keep the
  // central difference in its quadratic regime and exercise the softmaxes.
  {
    Rng r(derive_seed(opt.seed, {0x656eULL}));
    for (auto& t : model.enc.tensors())
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] += opt.param_scale * normal(r);
  }
  auto grad = ModelParams<double>::zeros_like(model);
  std::vector<std::size_t> neg = {1, 0};
  std::vector<std::size_t> mtl_t(n);
  for (std::size_t i = 0; i < n; ++i) mtl_t[i] = i % 5;

  Verbalizer verb(Verbalizer::Table{{"A", {"t5", "t6"}}, {"B", {"t7"}}, {"C", {"t8", "t9"}}});
  Vocab vocab;
  for (std::size_t i = Vocab::kNumSpecial; i < cfg.vocab_size; ++i) vocab.add("t" + std::to_string(i));
  verb.bind(vocab);
  const std::vector<std::size_t> gold = {0, 1, 2};

  BackwardOptions bo;
  bo.fault_layer = opt.fault_layer;
  auto loss = [&](bool want) {
    ModelParams<double>* g = want ? &grad : nullptr;
    if (is_tune) return tune_batch(model, batch, gold, verb, Mode::train, opt.seed, 1, g, bo);
    return pretrain_batch(model, batch, mtl_t, neg, sw, Mode::train, opt.seed, 1, g, bo).total;
  };

  // The discriminator's ReLUs are kinks; a central difference across one is
  // meaningless, so redraw the MI heads until every pre-activation at the
  // evaluation point is at least kReluMargin from zero.
  if (model.has_mi) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt == 64) throw Error("gradcheck: no kink-free evaluation point found");
      Rng r(derive_seed(opt.seed, {0x6d69ULL, attempt}));
      for (auto& t : model.mhca.tensors())
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = 0.5 * normal(r);
      model.disc = DiscriminatorParams<double>::init(cfg.d_model, derive_seed(opt.seed, {0x6473ULL, attempt}));
      double margin = std::numeric_limits<double>::infinity();
      detail::relu_margin_sink = &margin;
      loss(false);
      detail::relu_margin_sink = nullptr;
      if (margin >= kReluMargin) break;
    }
  }

  std::vector<TensorRef<double>> refs, grefs;
  auto all_p = model.tensors();
  auto all_g = grad.tensors();
  for (std::size_t k = 0; k < all_p.size(); ++k) {
    const auto& name = all_p[k].name;
    bool take = false;
    if (module == "encoder" || module == "cm" || module == "mlm" || module == "tune") take = name.rfind("enc.", 0) == 0;
    if (module == "mhca") take = name.rfind("mi.mhca.", 0) == 0;
    if (module == "discriminator") take = name.rfind("mi.disc.", 0) == 0;
    if (module == "glsl") take = true;
    if (module == "mtl_cls" || module == "mtl_mean") take = name.rfind("mtl.", 0) == 0 || name.rfind("enc.", 0) == 0;
    if (take) {
      refs.push_back(all_p[k]);
      grefs.push_back(all_g[k]);
    }
  }

  GradCheckResult res;
  res.module = module;
  for (const auto& g : all_g)
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data[i] = 0;
  loss(true);
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const double e = tensor_error(refs[k], grefs[k], loss, opt.eps);
    res.probes += static_cast<std::size_t>(refs[k].size());
    if (e >= res.max_rel_err) {
      res.max_rel_err = e;
      res.worst = refs[k].name;
    }
  }
  return res;
}

}  // namespace plse
