#pragma once

// Loss heads: connective-mask and MLM cross-entropies, the verbalizer
// tuning loss, and the connective-classification head used by the MTL
// ablations. Losses are reduced in double; gradients are returned in S.

#include "plse/tensor.hpp"
#include "plse/verbalizer.hpp"

namespace plse {

/// -log softmax(z)[target] for row r of `logits`. When `d` is given,
/// scale * (softmax - onehot) is added to row r of *d.
template <class S>
double xent_row(const Mat<S>& logits, Eigen::Index r, TokenId target, double scale = 1.0, Mat<S>* d = nullptr) {
  const Eigen::Index V = logits.cols();
  if (target < 0 || target >= V) throw Error("xent: target id out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(logits(r, j)));
  double z = 0;
  for (Eigen::Index j = 0; j < V; ++j) z += std::exp(static_cast<double>(logits(r, j)) - mx);
  const double lse = mx + std::log(z);
  if (d) {
    for (Eigen::Index j = 0; j < V; ++j) (*d)(r, j) += static_cast<S>(scale * std::exp(static_cast<double>(logits(r, j)) - lse));
    (*d)(r, target) -= static_cast<S>(scale);
  }
  return lse - static_cast<double>(logits(r, target));
}

/// Connective-mask loss: batch mean of slot cross-entropies.
template <class S>
double cm_loss(const Mat<S>& slot_logits, const std::vector<TokenId>& targets, Mat<S>* d = nullptr) {
  if (static_cast<std::size_t>(slot_logits.rows()) != targets.size()) throw Error("cm_loss: logits and targets disagree");
  if (targets.empty()) return 0.0;
  if (d) d->setZero(slot_logits.rows(), slot_logits.cols());
  const double scale = 1.0 / static_cast<double>(targets.size());
  double sum = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) sum += xent_row(slot_logits, static_cast<Eigen::Index>(i), targets[i], scale, d);
  return sum * scale;
}

struct MlmLoss {
  double value = 0;
  bool empty = true;          // no instance had a masked position
  std::size_t instances = 0;  // instances entering the batch mean
};

/// Two-level mean: per-instance mean over its masked positions, then the
/// mean over instances that have at least one position. `group[k]` names
/// the instance of logits row k.
template <class S>
MlmLoss mlm_loss(const Mat<S>& logits, const std::vector<TokenId>& targets, const std::vector<std::size_t>& group, Mat<S>* d = nullptr) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != group.size())
    throw Error("mlm_loss: logits, targets and grouping disagree");
  if (d) d->setZero(logits.rows(), logits.cols());
  std::map<std::size_t, std::size_t> counts;
  for (auto gi : group) ++counts[gi];
  MlmLoss out;
  out.instances = counts.size();
  if (counts.empty()) return out;
  out.empty = false;
  const double inv_b = 1.0 / static_cast<double>(counts.size());
  double sum = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const double scale = inv_b / static_cast<double>(counts[group[k]]);
    sum += scale * xent_row(logits, static_cast<Eigen::Index>(k), targets[k], scale, d);
  }
  out.value = sum;
  return out;
}

/// -log P(gold label) for row r, with P the verbalizer label distribution.
template <class S>
double tune_row(const Mat<S>& logits, Eigen::Index r, const Verbalizer& v, std::size_t gold, double scale = 1.0, Mat<S>* d = nullptr) {
  if (gold >= v.num_labels()) throw Error("tune_loss: gold label outside the verbalizer");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < v.num_labels(); ++l)
    for (auto id : v.answer_ids(l)) mx = std::max(mx, static_cast<double>(logits(r, id)));
  double all = 0, mine = 0;
  for (std::size_t l = 0; l < v.num_labels(); ++l)
    for (auto id : v.answer_ids(l)) {
      const double e = std::exp(static_cast<double>(logits(r, id)) - mx);
      all += e;
      if (l == gold) mine += e;
    }
  if (d) {
    for (std::size_t l = 0; l < v.num_labels(); ++l)
      for (auto id : v.answer_ids(l)) {
        const double e = std::exp(static_cast<double>(logits(r, id)) - mx);
        double gz = e / all;
        if (l == gold) gz -= e / mine;
        (*d)(r, id) += static_cast<S>(scale * gz);
      }
  }
  return std::log(all) - std::log(mine);
}

template <class S>
double tune_loss(const Mat<S>& slot_logits, const Verbalizer& v, const std::vector<std::size_t>& gold, Mat<S>* d = nullptr) {
  if (static_cast<std::size_t>(slot_logits.rows()) != gold.size()) throw Error("tune_loss: logits and labels disagree");
  if (gold.empty()) return 0.0;
  if (d) d->setZero(slot_logits.rows(), slot_logits.cols());
  const double scale = 1.0 / static_cast<double>(gold.size());
  double sum = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) sum += tune_row(slot_logits, static_cast<Eigen::Index>(i), v, gold[i], scale, d);
  return sum * scale;
}

/// Gold label index by name; throws when the verbalizer lacks it.
inline std::size_t require_label(const Verbalizer& v, std::string_view label) {
  auto idx = v.label_index(label);
  if (!idx) throw Error("label '" + std::string(label) + "' is not in the verbalizer label set");
  return *idx;
}

// ---------------------------------------------------------------------------
// Connective classifier for the MTL ablations

enum class MtlVariant { none, cls, mean };

inline MtlVariant parse_mtl(std::string_view s) {
  if (s == "none" || s.empty()) return MtlVariant::none;
  if (s == "cls") return MtlVariant::cls;
  if (s == "mean") return MtlVariant::mean;
  throw Error("unknown mtl variant '" + std::string(s) + "'");
}

inline std::string mtl_name(MtlVariant m) {
  switch (m) {
    case MtlVariant::cls: return "cls";
    case MtlVariant::mean: return "mean";
    default: return "none";
  }
}

/// Linear classifier over the canonical connective inventory.
template <class S>
struct MtlHeadParams {
  Mat<S> w;  // d x C
  RowVec<S> b;

  static MtlHeadParams zeros(std::size_t d, std::size_t classes) {
    MtlHeadParams p;
    p.w = Mat<S>::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(classes));
    p.b = RowVec<S>::Zero(static_cast<Eigen::Index>(classes));
    return p;
  }

  static MtlHeadParams init(std::size_t d, std::size_t classes, std::uint64_t seed) {
    auto p = zeros(d, classes);
    Rng rng(derive_seed(seed, {0x6d746cULL}));
    fill_normal(p.w, rng, 0.02);
    return p;
  }

  std::vector<TensorRef<S>> tensors(const std::string& prefix = "mtl.") {
    std::vector<TensorRef<S>> t;
    add_ref(t, prefix + "w", w);
    add_ref(t, prefix + "b", b);
    return t;
  }
};

/// Sentence representation for the MTL head: the CLS row or the mean of
/// the argument rows.
template <class S>
RowVec<S> mtl_representation(const Mat<S>& H, const PromptEncoding& enc, MtlVariant variant) {
  if (variant == MtlVariant::cls) return H.row(0);
  RowVec<S> acc = RowVec<S>::Zero(H.cols());
  std::size_t n = 0;
  for (std::size_t i = 0; i < enc.length(); ++i)
    if (enc.in_args(i)) {
      acc += H.row(static_cast<Eigen::Index>(i));
      ++n;
    }
  if (n == 0) throw Error("mtl_representation: no argument positions");
  return acc / static_cast<S>(n);
}

/// Scatters dL/drep back onto H.
template <class S>
void mtl_representation_backward(const PromptEncoding& enc, MtlVariant variant, const RowVec<S>& drep, Mat<S>& dH) {
  if (variant == MtlVariant::cls) {
    dH.row(0) += drep;
    return;
  }
  std::size_t n = enc.arg1_span.size() + enc.arg2_span.size();
  const RowVec<S> share = drep / static_cast<S>(n);
  for (std::size_t i = 0; i < enc.length(); ++i)
    if (enc.in_args(i)) dH.row(static_cast<Eigen::Index>(i)) += share;
}

/// Cross-entropy of the MTL head on one representation; accumulates
/// parameter gradients into `g` and returns dL/drep through `drep`.
template <class S>
double mtl_row_loss(const MtlHeadParams<S>& p, const RowVec<S>& rep, std::size_t target, double scale, MtlHeadParams<S>* g,
                    RowVec<S>* drep) {
  Mat<S> logits = rep * p.w;
  logits.rowwise() += p.b;
  Mat<S> dl;
  if (g) dl = Mat<S>::Zero(1, logits.cols());
  const double loss = xent_row(logits, 0, static_cast<TokenId>(target), scale, g ? &dl : nullptr);
  if (g) {
    g->w.noalias() += rep.transpose() * dl;
    g->b += dl;
    if (drep) *drep = dl * p.w.transpose();
  }
  return loss;
}

}  // namespace plse
