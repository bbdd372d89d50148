#pragma once

// The full model (encoder plus the pre-training heads) and batch-level
// loss/gradient evaluation for pre-training, prompt-tuning and inference.
//
// Gradients are accumulated into a fixed number of shards, each owning a
// contiguous slice of the batch, and the shards are summed in order. The
// result is therefore the same for any worker count.

#include "plse/encoder.hpp"
#include "plse/logic_mi.hpp"
#include "plse/objectives.hpp"

namespace plse {

inline constexpr std::size_t kGradShards = 8;

struct LossSwitches {
  bool cm = true;
  bool mlm = true;
  bool glsl = true;
  MtlVariant mtl = MtlVariant::none;
  bool detach_glsl = false;  // GLSL trains MHCA/discriminator only

  bool any() const { return cm || mlm || glsl || mtl != MtlVariant::none; }
};

template <class S>
struct ModelParams {
  EncoderParams<S> enc;
  bool has_mi = false;
  MHCAParams<S> mhca;
  DiscriminatorParams<S> disc;
  bool has_mtl = false;
  MtlHeadParams<S> mtl;

  std::vector<TensorRef<S>> tensors() {
    auto out = enc.tensors("enc.");
    if (has_mi) {
      for (auto& t : mhca.tensors("mi.mhca.")) out.push_back(t);
      for (auto& t : disc.tensors("mi.disc.")) out.push_back(t);
    }
    if (has_mtl)
      for (auto& t : mtl.tensors("mtl.")) out.push_back(t);
    return out;
  }

  static ModelParams zeros_like(const ModelParams& o) {
    ModelParams p;
    p.enc = EncoderParams<S>::zeros(o.enc.cfg);
    p.has_mi = o.has_mi;
    if (o.has_mi) {
      p.mhca = MHCAParams<S>::zeros(o.enc.cfg.d_model, o.mhca.n_heads);
      p.disc = DiscriminatorParams<S>::zeros(o.enc.cfg.d_model);
    }
    p.has_mtl = o.has_mtl;
    if (o.has_mtl) p.mtl = MtlHeadParams<S>::zeros(o.enc.cfg.d_model, static_cast<std::size_t>(o.mtl.b.cols()));
    return p;
  }

  /// Drops the pre-training-only heads.
  void strip_heads() {
    has_mi = false;
    mhca = {};
    disc = {};
    has_mtl = false;
    mtl = {};
  }
};

template <class S>
ModelParams<S> init_model(const EncoderConfig& cfg, bool with_mi, std::size_t mhca_heads, std::size_t mtl_classes) {
  ModelParams<S> p;
  p.enc = init_encoder<S>(cfg);
  if (with_mi) {
    p.has_mi = true;
    p.mhca = MHCAParams<S>::init(cfg.d_model, mhca_heads, cfg.seed);
    p.disc = DiscriminatorParams<S>::init(cfg.d_model, cfg.seed);
  }
  if (mtl_classes > 0) {
    p.has_mtl = true;
    p.mtl = MtlHeadParams<S>::init(cfg.d_model, mtl_classes, cfg.seed);
  }
  return p;
}

struct BatchLosses {
  double cm = 0;
  double mlm = 0;
  double glsl = 0;
  double mtl = 0;
  double total = 0;
  double glsl_estimate = 0;
  bool mlm_empty = true;
};

namespace detail {

template <class S>
struct InstanceState {
  EncoderActivations<S> act;
  Mat<S> dH;
  double cm = 0, mlm = 0, mtl = 0, tune = 0;
};

inline std::pair<std::size_t, std::size_t> shard_range(std::size_t shard, std::size_t n) {
  return {shard * n / kGradShards, (shard + 1) * n / kGradShards};
}

/// Runs forward + per-instance heads per shard, an optional batch-coupled
/// term serially, then backward per shard. `head(i, st, g)` fills st.dH and
/// the loss fields and accumulates head gradients into g (nullptr when no
/// gradients are requested).
template <class S, class Head, class Couple>
void run_sharded(const ModelParams<S>& p, const std::vector<MaskedEncoding>& batch, Mode mode, std::uint64_t dropout_seed, int threads,
                 ModelParams<S>* grad, const BackwardOptions& bo, std::vector<InstanceState<S>>& st, Head&& head, Couple&& couple) {
  const std::size_t n = batch.size();
  st.assign(n, {});
  std::vector<ModelParams<S>> shard_grads;
  if (grad)
    for (std::size_t s = 0; s < kGradShards; ++s) shard_grads.push_back(ModelParams<S>::zeros_like(p));
  parallel_for(kGradShards, threads, [&](std::size_t s) {
    auto [lo, hi] = shard_range(s, n);
    for (std::size_t i = lo; i < hi; ++i) {
      Rng rng(derive_seed(dropout_seed, {i}));
      encoder_forward(p.enc, batch[i].base.token_ids, batch[i].base.attn_mask, mode, &rng, st[i].act);
      if (grad) st[i].dH = Mat<S>::Zero(st[i].act.H.rows(), st[i].act.H.cols());
      head(i, st[i], grad ? &shard_grads[s] : nullptr);
    }
  });
  couple(grad);
  if (!grad) return;
  parallel_for(kGradShards, threads, [&](std::size_t s) {
    auto [lo, hi] = shard_range(s, n);
    for (std::size_t i = lo; i < hi; ++i) encoder_backward(p.enc, st[i].act, st[i].dH, shard_grads[s].enc, bo);
  });
  for (auto& sg : shard_grads) {
    accumulate(grad->enc, sg.enc);
    if (grad->has_mtl) accumulate(grad->mtl, sg.mtl);
  }
}

template <class S>
Mat<S> gather_kv(const Mat<S>& H, const PromptEncoding& enc) {
  Mat<S> kv(static_cast<Eigen::Index>(enc.arg1_span.size() + enc.arg2_span.size()), H.cols());
  Eigen::Index r = 0;
  for (auto sp : {enc.arg1_span, enc.arg2_span})
    for (std::size_t i = sp.begin; i < sp.end; ++i) kv.row(r++) = H.row(static_cast<Eigen::Index>(i));
  return kv;
}

template <class S>
void scatter_kv(const Mat<S>& dkv, const PromptEncoding& enc, Mat<S>& dH) {
  Eigen::Index r = 0;
  for (auto sp : {enc.arg1_span, enc.arg2_span})
    for (std::size_t i = sp.begin; i < sp.end; ++i) dH.row(static_cast<Eigen::Index>(i)) += dkv.row(r++);
}

}  // namespace detail

/// Pre-training objective over one batch: the sum of the enabled terms
/// among connective mask, MLM, GLSL and the MTL head. `negative_of` must be
/// a derangement of the batch when GLSL is on. With `grad`, the gradient of
/// the total is accumulated there.
template <class S>
BatchLosses pretrain_batch(const ModelParams<S>& p, const std::vector<MaskedEncoding>& batch, const std::vector<std::size_t>& mtl_targets,
                           const std::vector<std::size_t>& negative_of, const LossSwitches& sw, Mode mode, std::uint64_t dropout_seed,
                           int threads, ModelParams<S>* grad, const BackwardOptions& bo = {}) {
  const std::size_t n = batch.size();
  if (n == 0) throw Error("pretrain_batch: empty batch");
  if (sw.glsl && !p.has_mi) throw Error("pretrain_batch: GLSL enabled without MI heads");
  if (sw.mtl != MtlVariant::none && (!p.has_mtl || mtl_targets.size() != n)) throw Error("pretrain_batch: MTL enabled without head or targets");

  std::size_t n_cm = 0, n_mlm = 0;
  for (const auto& m : batch) {
    n_cm += m.cm_target.has_value();
    n_mlm += !m.mlm_positions.empty();
  }
  const double cm_scale = n_cm ? 1.0 / static_cast<double>(n_cm) : 0.0;
  const double mtl_scale = 1.0 / static_cast<double>(n);

  auto head = [&](std::size_t i, detail::InstanceState<S>& s, ModelParams<S>* g) {
    const auto& m = batch[i];
    const auto& H = s.act.H;
    std::vector<std::size_t> pos;
    const bool do_cm = sw.cm && m.cm_target;
    const bool do_mlm = sw.mlm && !m.mlm_positions.empty();
    if (do_cm) pos.push_back(m.base.cmask_pos);
    if (do_mlm) pos.insert(pos.end(), m.mlm_positions.begin(), m.mlm_positions.end());
    if (!pos.empty()) {
      const Mat<S> logits = mlm_logits(p.enc, H, pos);
      Mat<S> dl;
      if (g) dl = Mat<S>::Zero(logits.rows(), logits.cols());
      Eigen::Index r = 0;
      if (do_cm) s.cm = xent_row(logits, r++, *m.cm_target, cm_scale, g ? &dl : nullptr);
      if (do_mlm) {
        const double sc = 1.0 / (static_cast<double>(n_mlm) * static_cast<double>(m.mlm_positions.size()));
        double sum = 0;
        for (auto t : m.mlm_targets) sum += xent_row(logits, r++, t, sc, g ? &dl : nullptr);
        s.mlm = sum / static_cast<double>(m.mlm_positions.size());
      }
      if (g) mlm_logits_backward(p.enc, H, pos, dl, g->enc, s.dH);
    }
    if (sw.mtl != MtlVariant::none) {
      const RowVec<S> rep = mtl_representation(H, m.base, sw.mtl);
      RowVec<S> drep;
      s.mtl = mtl_row_loss(p.mtl, rep, mtl_targets[i], mtl_scale, g ? &g->mtl : nullptr, g ? &drep : nullptr);
      if (g) mtl_representation_backward(m.base, sw.mtl, drep, s.dH);
    }
  };

  std::vector<detail::InstanceState<S>> st;
  BatchLosses out;
  auto couple = [&](ModelParams<S>* g) {
    if (!sw.glsl) return;
    MIBatch<S> mb;
    mb.negative_of = negative_of;
    for (std::size_t i = 0; i < n; ++i) {
      mb.h_cmask.push_back(st[i].act.H.row(static_cast<Eigen::Index>(batch[i].base.cmask_pos)));
      mb.kv.push_back(detail::gather_kv(st[i].act.H, batch[i].base));
    }
    auto res = glsl_loss(p.mhca, p.disc, mb, g ? &g->mhca : nullptr, g ? &g->disc : nullptr);
    out.glsl = res.loss;
    out.glsl_estimate = res.estimate;
    if (!g || sw.detach_glsl) return;
    for (std::size_t i = 0; i < n; ++i) {
      st[i].dH.row(static_cast<Eigen::Index>(batch[i].base.cmask_pos)) += res.d_cmask[i];
      detail::scatter_kv(res.d_kv[i], batch[i].base, st[i].dH);
    }
  };
  detail::run_sharded(p, batch, mode, dropout_seed, threads, grad, bo, st, head, couple);

  double cm = 0, mlm = 0, mtl = 0;
  for (const auto& s : st) {
    cm += s.cm;
    mlm += s.mlm;
    mtl += s.mtl;
  }
  out.cm = cm * cm_scale;
  out.mlm_empty = n_mlm == 0;
  out.mlm = n_mlm ? mlm / static_cast<double>(n_mlm) : 0.0;
  out.mtl = mtl * mtl_scale;
  out.total = (sw.cm ? out.cm : 0.0) + (sw.mlm ? out.mlm : 0.0) + (sw.glsl ? out.glsl : 0.0) + (sw.mtl != MtlVariant::none ? out.mtl : 0.0);
  return out;
}

/// Prompt-tuning objective: batch mean of -log P(gold label) at the slot.
template <class S>
double tune_batch(const ModelParams<S>& p, const std::vector<MaskedEncoding>& batch, const std::vector<std::size_t>& gold, const Verbalizer& v,
                  Mode mode, std::uint64_t dropout_seed, int threads, ModelParams<S>* grad, const BackwardOptions& bo = {}) {
  const std::size_t n = batch.size();
  if (n == 0 || gold.size() != n) throw Error("tune_batch: batch and labels disagree");
  const double scale = 1.0 / static_cast<double>(n);
  auto head = [&](std::size_t i, detail::InstanceState<S>& s, ModelParams<S>* g) {
    const std::vector<std::size_t> pos = {batch[i].base.cmask_pos};
    const Mat<S> logits = mlm_logits(p.enc, s.act.H, pos);
    Mat<S> dl;
    if (g) dl = Mat<S>::Zero(logits.rows(), logits.cols());
    s.tune = tune_row(logits, 0, v, gold[i], scale, g ? &dl : nullptr);
    if (g) mlm_logits_backward(p.enc, s.act.H, pos, dl, g->enc, s.dH);
  };
  std::vector<detail::InstanceState<S>> st;
  detail::run_sharded(p, batch, mode, dropout_seed, threads, grad, bo, st, head, [](ModelParams<S>*) {});
  double sum = 0;
  for (const auto& s : st) sum += s.tune;
  return sum * scale;
}

/// Slot logits for each encoding, eval mode.
template <class S>
std::vector<RowVec<S>> slot_logits(const ModelParams<S>& p, const std::vector<MaskedEncoding>& encs, int threads) {
  std::vector<RowVec<S>> out(encs.size());
  parallel_for(encs.size(), threads, [&](std::size_t i) {
    EncoderActivations<S> act;
    encoder_forward(p.enc, encs[i].base.token_ids, encs[i].base.attn_mask, Mode::eval, nullptr, act);
    out[i] = mlm_logits(p.enc, act.H, {encs[i].base.cmask_pos}).row(0);
  });
  return out;
}

template <class S>
std::vector<Prediction> predict_batch(const ModelParams<S>& p, const std::vector<MaskedEncoding>& encs, const Verbalizer& v, int threads) {
  const auto logits = slot_logits(p, encs, threads);
  std::vector<Prediction> out;
  out.reserve(logits.size());
  for (const auto& l : logits) out.push_back(predict(l, v));
  return out;
}

/// Fraction of encodings whose slot argmax over the vocabulary is the gold
/// connective.
template <class S>
double connective_accuracy(const ModelParams<S>& p, const std::vector<MaskedEncoding>& encs, int threads) {
  if (encs.empty()) return 0.0;
  const auto logits = slot_logits(p, encs, threads);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < encs.size(); ++i) {
    Eigen::Index arg = 0;
    logits[i].maxCoeff(&arg);
    hit += encs[i].cm_target && static_cast<TokenId>(arg) == *encs[i].cm_target;
  }
  return static_cast<double>(hit) / static_cast<double>(encs.size());
}

}  // namespace plse
