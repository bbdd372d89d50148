#pragma once

// Optimisation loops for pre-training and prompt-tuning.
//
// All randomness is derived from (seed, step, instance) coordinates, so a
// run resumed from a checkpoint at step s replays steps s+1.. exactly.

#include <functional>
#include <numeric>

#include "plse/checkpoint.hpp"
#include "plse/config.hpp"
#include "plse/corpus_extractor.hpp"
#include "plse/datasets.hpp"
#include "plse/metrics.hpp"
#include "plse/model.hpp"
#include "plse/optimizer.hpp"

namespace plse {

enum class Phase { pretrain, tune };

struct TrainConfig {
  Phase phase = Phase::pretrain;
  std::size_t batch_size = 64;
  double learning_rate = 5e-6;
  std::size_t epochs = 2;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  LossSwitches switches;
  int threads = 1;
  std::size_t max_steps = 0;  // stop early (0 = run all epochs); the schedule is unchanged
  double cm_mask_rate = kConnectiveMaskRate;
  UniversalMaskConfig universal;
  std::string select_metric = "acc";  // tuning model selection: acc | f1

  void validate() const {
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw Error("train config: warmup_ratio must be in [0,1)");
    if (!(learning_rate > 0.0)) throw Error("train config: learning_rate must be positive");
    if (epochs < 1) throw Error("train config: epochs must be at least 1");
    if (batch_size < 1) throw Error("train config: batch_size must be at least 1");
    if (phase == Phase::pretrain && switches.glsl && batch_size < 2) throw Error("train config: GLSL needs batch_size >= 2");
    if (select_metric != "acc" && select_metric != "f1") throw Error("train config: select_metric must be acc or f1");
    if (threads < 1) throw Error("train config: threads must be at least 1");
  }

  nlohmann::json to_json() const {
    return {{"phase", phase == Phase::pretrain ? "pretrain" : "tune"},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"epochs", epochs},
            {"warmup_ratio", warmup_ratio},
            {"weight_decay", weight_decay},
            {"grad_clip", grad_clip},
            {"seed", seed},
            {"loss_cm", switches.cm},
            {"loss_mlm", switches.mlm},
            {"loss_glsl", switches.glsl},
            {"mtl_variant", mtl_name(switches.mtl)},
            {"detach_glsl", switches.detach_glsl},
            {"max_steps", max_steps},
            {"cm_mask_rate", cm_mask_rate},
            {"mlm_select_p", universal.select_p},
            {"select_metric", select_metric}};
  }
};

/// Reads training keys from a config; unspecified keys keep phase defaults
/// (pre-training 64 / 5e-6 / 2 epochs, tuning 64 / 1e-5 / 10 epochs).
inline TrainConfig train_config_from(const Config& c, Phase phase) {
  TrainConfig t;
  t.phase = phase;
  if (phase == Phase::tune) {
    t.learning_rate = 1e-5;
    t.epochs = 10;
  }
  const std::string pre = phase == Phase::pretrain ? "pretrain." : "tune.";
  t.batch_size = c.get_uint(pre + "batch_size", t.batch_size);
  t.learning_rate = c.get_double(pre + "learning_rate", t.learning_rate);
  t.epochs = c.get_uint(pre + "epochs", t.epochs);
  t.warmup_ratio = c.get_double(pre + "warmup_ratio", t.warmup_ratio);
  t.weight_decay = c.get_double(pre + "weight_decay", t.weight_decay);
  t.grad_clip = c.get_double(pre + "grad_clip", t.grad_clip);
  t.max_steps = c.get_uint(pre + "max_steps", 0);
  t.seed = c.get_uint("seed", t.seed);
  t.threads = static_cast<int>(c.get_uint("threads", 1));
  if (phase == Phase::pretrain) {
    t.switches.cm = c.get_bool("loss.cm", true);
    t.switches.mlm = c.get_bool("loss.mlm", true);
    t.switches.glsl = c.get_bool("loss.glsl", true);
    t.switches.mtl = parse_mtl(c.get("loss.mtl", "none"));
    t.switches.detach_glsl = c.get_bool("loss.detach_glsl", false);
    t.cm_mask_rate = c.get_double("mask.cm_rate", kConnectiveMaskRate);
    t.universal.select_p = c.get_double("mask.select_p", t.universal.select_p);
    t.universal.p_mask = c.get_double("mask.p_mask", t.universal.p_mask);
    t.universal.p_random = c.get_double("mask.p_random", t.universal.p_random);
  } else {
    t.select_metric = c.get("tune.select_metric", "acc");
  }
  t.validate();
  return t;
}

/// Encoder hyper-parameters from a config (vocab size comes from the vocab).
inline EncoderConfig encoder_config_from(const Config& c, std::size_t vocab_size) {
  EncoderConfig e;
  e.d_model = c.get_uint("model.d_model", e.d_model);
  e.n_layers = c.get_uint("model.n_layers", e.n_layers);
  e.n_heads = c.get_uint("model.n_heads", e.n_heads);
  e.d_ff = c.get_uint("model.d_ff", e.d_ff);
  e.max_len = c.get_uint("model.max_len", e.max_len);
  e.dropout_p = c.get_double("model.dropout", e.dropout_p);
  e.seed = c.get_uint("model.seed", c.get_uint("seed", 1));
  e.vocab_size = vocab_size;
  e.validate();
  return e;
}

class DivergenceError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Data preparation

struct PretrainData {
  std::vector<PromptEncoding> enc;
  std::vector<TokenId> conn;
  std::vector<std::size_t> mtl_class;
  std::size_t dropped_long = 0;
  std::size_t size() const { return enc.size(); }
};

/// Templatizes explicit pairs. Pairs longer than max_len are dropped; the
/// connective must be in the vocabulary. `classes` lists the connective
/// inventory for the MTL head.
inline PretrainData prepare_pretrain(const std::vector<ExplicitInstance>& xs, const Vocab& vocab, std::size_t max_len,
                                     const std::vector<std::string>& classes) {
  PretrainData d;
  std::map<std::string, std::size_t> cls;
  for (std::size_t i = 0; i < classes.size(); ++i) cls[classes[i]] = i;
  for (const auto& x : xs) {
    auto a1 = vocab.encode(x.arg1), a2 = vocab.encode(x.arg2);
    if (a1.empty() || a2.empty() || a1.size() + a2.size() + kTemplateOverhead > max_len) {
      ++d.dropped_long;
      continue;
    }
    auto c = vocab.find(x.connective);
    if (!c) throw Error("connective '" + x.connective + "' missing from vocabulary");
    d.enc.push_back(templatize_ids(std::move(a1), std::move(a2), max_len));
    d.conn.push_back(*c);
    auto it = cls.find(x.connective);
    d.mtl_class.push_back(it == cls.end() ? 0 : it->second);
  }
  return d;
}

/// Sorted distinct connectives of a corpus.
inline std::vector<std::string> connective_inventory(const std::vector<ExplicitInstance>& xs) {
  std::set<std::string> s;
  for (const auto& x : xs) s.insert(x.connective);
  return {s.begin(), s.end()};
}

struct LabeledData {
  std::vector<MaskedEncoding> enc;  // slot always [MASK]
  std::vector<std::size_t> label;   // first gold label index
  std::vector<std::vector<std::string>> golds;
  std::size_t size() const { return enc.size(); }
};

/// Templatizes labeled instances (truncating if needed). Every gold label
/// must belong to the verbalizer.
inline LabeledData prepare_labeled(const std::vector<LabeledInstance>& xs, const Vocab& vocab, std::size_t max_len, const Verbalizer& v) {
  LabeledData d;
  Rng unused(0);
  for (const auto& x : xs) {
    auto a1 = vocab.encode(x.arg1), a2 = vocab.encode(x.arg2);
    if (a1.empty()) a1.push_back(Vocab::kUnk);
    if (a2.empty()) a2.push_back(Vocab::kUnk);
    d.enc.push_back(apply_connective_mask(templatize_ids(std::move(a1), std::move(a2), max_len), std::nullopt, unused));
    for (const auto& g : x.gold_labels) require_label(v, g);
    d.label.push_back(require_label(v, x.gold_labels.front()));
    d.golds.push_back(x.gold_labels);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training state and loops

struct TrainState {
  ModelParams<float> model;
  AdamW<float> opt;
  std::size_t step = 0;
  nlohmann::json history = nlohmann::json::array();  // validation metric per epoch
  double best_metric = -1;
};

using MetricsSink = std::function<void(const nlohmann::json&)>;

namespace detail {

inline constexpr std::uint64_t kOrderTag = 0x6f72646572ULL;
inline constexpr std::uint64_t kMaskTag = 0x6d61736bULL;
inline constexpr std::uint64_t kNegTag = 0x6e6567ULL;
inline constexpr std::uint64_t kDropTag = 0x64726f70ULL;

/// Batches of one epoch as index lists into the data.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed, std::size_t epoch,
                                                           std::size_t min_batch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {kOrderTag, epoch}));
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
    if (b.size() >= min_batch) out.push_back(std::move(b));
  }
  return out;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch, std::size_t min_batch) {
  std::size_t full = n / batch, rem = n % batch;
  return full + (rem >= min_batch && rem > 0 ? 1 : 0);
}

inline void dump_divergence(const std::filesystem::path& dir, std::size_t step, const nlohmann::json& losses,
                            const std::vector<std::size_t>& idx, const std::vector<MaskedEncoding>& batch) {
  if (dir.empty()) return;
  nlohmann::json j = {{"step", step}, {"losses", losses}, {"instances", idx}};
  nlohmann::json toks = nlohmann::json::array();
  for (const auto& m : batch) toks.push_back(m.base.token_ids);
  j["token_ids"] = toks;
  std::filesystem::create_directories(dir);
  write_file(dir / "divergence_dump.json", j.dump(1) + "\n");
}

inline void apply_update(TrainState& st, ModelParams<float>& grad, const TrainConfig& cfg, double lr) {
  AdamWConfig oc;
  oc.weight_decay = cfg.weight_decay;
  st.opt.configure(oc);
  auto gt = grad.tensors();
  clip_global_norm(gt, cfg.grad_clip);
  st.opt.step(st.model.tensors(), gt, lr);
}

}  // namespace detail

/// Masked encodings for one pre-training batch at global step `step`.
inline std::vector<MaskedEncoding> pretrain_masks(const PretrainData& data, const std::vector<std::size_t>& idx, const TrainConfig& cfg,
                                                  std::size_t step, std::size_t vocab_size) {
  std::vector<MaskedEncoding> out;
  out.reserve(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    Rng rng(derive_seed(cfg.seed, {detail::kMaskTag, step, j}));
    auto m = apply_connective_mask(data.enc[idx[j]], data.conn[idx[j]], rng, cfg.cm_mask_rate);
    if (cfg.switches.mlm) m = apply_universal_mask(std::move(m), rng, vocab_size, cfg.universal);
    out.push_back(std::move(m));
  }
  return out;
}

/// Connective accuracy on validation pairs with the slot masked.
inline double pretrain_validation(const ModelParams<float>& model, const PretrainData& valid, int threads) {
  std::vector<MaskedEncoding> encs;
  Rng unused(0);
  for (std::size_t i = 0; i < valid.size(); ++i) encs.push_back(apply_connective_mask(valid.enc[i], valid.conn[i], unused, 1.0));
  return connective_accuracy(model, encs, threads);
}

inline std::size_t pretrain_total_steps(const TrainConfig& cfg, std::size_t n) {
  return cfg.epochs * detail::steps_per_epoch(n, cfg.batch_size, cfg.switches.glsl ? 2 : 1);
}

/// Runs (or resumes) pre-training from st.step. Emits one metrics record
/// per step; the last step of each epoch also carries valid_metric.
inline void pretrain(const TrainConfig& cfg, TrainState& st, const PretrainData& train, const PretrainData& valid, const MetricsSink& sink = {},
                     const std::filesystem::path& dump_dir = {}) {
  cfg.validate();
  if (train.size() == 0) throw Error("pretrain: no training pairs");
  if (!cfg.switches.any()) throw Error("pretrain: every loss term is disabled");
  const std::size_t min_batch = cfg.switches.glsl ? 2 : 1;
  const std::size_t total = pretrain_total_steps(cfg, train.size());
  if (total == 0) throw Error("pretrain: not enough data for one batch");
  const std::size_t V = st.model.enc.cfg.vocab_size;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto batches = detail::epoch_batches(train.size(), cfg.batch_size, cfg.seed, e, min_batch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ++step;
      if (step <= st.step) continue;
      if (cfg.max_steps && step > cfg.max_steps) return;
      const auto& idx = batches[b];
      const auto masks = pretrain_masks(train, idx, cfg, step, V);
      std::vector<std::size_t> mtl_t;
      for (auto i : idx) mtl_t.push_back(train.mtl_class[i]);
      std::vector<std::size_t> neg;
      if (cfg.switches.glsl) {
        Rng nrng(derive_seed(cfg.seed, {detail::kNegTag, step}));
        neg = random_derangement(idx.size(), nrng);
      }
      auto grad = ModelParams<float>::zeros_like(st.model);
      const auto L = pretrain_batch(st.model, masks, mtl_t, neg, cfg.switches, Mode::train, derive_seed(cfg.seed, {detail::kDropTag, step}),
                                    cfg.threads, &grad);
      const double lr = lr_at(step, total, cfg.warmup_ratio, cfg.learning_rate);
      nlohmann::json rec = {{"step", step},
                            {"lr", lr},
                            {"cm", cfg.switches.cm ? nlohmann::json(L.cm) : nlohmann::json(nullptr)},
                            {"mlm", cfg.switches.mlm ? nlohmann::json(L.mlm) : nlohmann::json(nullptr)},
                            {"glsl", cfg.switches.glsl ? nlohmann::json(L.glsl) : nlohmann::json(nullptr)},
                            {"total", L.total},
                            {"valid_metric", nullptr}};
      if (cfg.switches.mtl != MtlVariant::none) rec["mtl"] = L.mtl;
      if (!std::isfinite(L.total) || !all_finite(grad)) {
        detail::dump_divergence(dump_dir, step, rec, idx, masks);
        throw DivergenceError("pretrain: non-finite loss or gradient at step " + std::to_string(step));
      }
      detail::apply_update(st, grad, cfg, lr);
      st.step = step;
      if (b + 1 == batches.size()) {
        const double vm = valid.size() ? pretrain_validation(st.model, valid, cfg.threads) : 0.0;
        rec["valid_metric"] = vm;
        st.history.push_back({{"epoch", e + 1}, {"step", step}, {"valid_metric", vm}});
      }
      if (sink) sink(rec);
    }
  }
}

struct EvalOutput {
  EvalReport report;
  std::vector<std::string> predictions;
  std::vector<std::vector<double>> distributions;
};

inline EvalOutput evaluate(const ModelParams<float>& model, const LabeledData& data, const Verbalizer& v, int threads) {
  EvalOutput out;
  const auto preds = predict_batch(model, data.enc, v, threads);
  for (const auto& p : preds) {
    out.predictions.push_back(v.labels()[p.label]);
    out.distributions.push_back(p.distribution);
  }
  out.report = score(out.predictions, data.golds, v.labels());
  return out;
}

/// Prompt-tuning with best-on-validation selection: after every epoch the
/// model is scored on `valid`, and *best receives the best one so far.
inline void tune(const TrainConfig& cfg, TrainState& st, const LabeledData& train, const LabeledData& valid, const Verbalizer& v,
                 ModelParams<float>& best, const MetricsSink& sink = {}, const std::filesystem::path& dump_dir = {}) {
  cfg.validate();
  if (train.size() == 0) throw Error("tune: no training instances");
  const std::size_t total = cfg.epochs * detail::steps_per_epoch(train.size(), cfg.batch_size, 1);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto batches = detail::epoch_batches(train.size(), cfg.batch_size, cfg.seed, e, 1);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ++step;
      if (step <= st.step) continue;
      if (cfg.max_steps && step > cfg.max_steps) return;
      const auto& idx = batches[b];
      std::vector<MaskedEncoding> batch;
      std::vector<std::size_t> gold;
      for (auto i : idx) {
        batch.push_back(train.enc[i]);
        gold.push_back(train.label[i]);
      }
      auto grad = ModelParams<float>::zeros_like(st.model);
      const double loss = tune_batch(st.model, batch, gold, v, Mode::train, derive_seed(cfg.seed, {detail::kDropTag, step}), cfg.threads, &grad);
      const double lr = lr_at(step, total, cfg.warmup_ratio, cfg.learning_rate);
      nlohmann::json rec = {{"step", step}, {"lr", lr}, {"cm", nullptr}, {"mlm", nullptr}, {"glsl", nullptr},
                            {"total", loss}, {"valid_metric", nullptr}};
      if (!std::isfinite(loss) || !all_finite(grad)) {
        detail::dump_divergence(dump_dir, step, rec, idx, batch);
        throw DivergenceError("tune: non-finite loss or gradient at step " + std::to_string(step));
      }
      detail::apply_update(st, grad, cfg, lr);
      st.step = step;
      if (b + 1 == batches.size()) {
        double vm = 0;
        if (valid.size()) {
          const auto r = evaluate(st.model, valid, v, cfg.threads).report;
          vm = cfg.select_metric == "f1" ? r.macro_f1 : r.accuracy;
        }
        rec["valid_metric"] = vm;
        st.history.push_back({{"epoch", e + 1}, {"step", step}, {"valid_metric", vm}});
        if (vm > st.best_metric) {
          st.best_metric = vm;
          best = st.model;
        }
      }
      if (sink) sink(rec);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint glue

/// Stores model (and optionally optimizer state) with a manifest snapshot.
inline Checkpoint make_checkpoint(TrainState& st, const nlohmann::json& config_snapshot, bool with_optimizer, bool with_heads) {
  Checkpoint ck;
  ModelParams<float>& m = st.model;
  ck.put_all(m.enc.tensors("enc."));
  if (with_heads && m.has_mi) {
    ck.put_all(m.mhca.tensors("mi.mhca."));
    ck.put_all(m.disc.tensors("mi.disc."));
  }
  if (with_heads && m.has_mtl) ck.put_all(m.mtl.tensors("mtl."));
  ck.manifest["encoder"] = to_json(m.enc.cfg);
  ck.manifest["mi"] = with_heads && m.has_mi ? nlohmann::json{{"n_heads", m.mhca.n_heads}} : nlohmann::json(nullptr);
  ck.manifest["mtl_classes"] = with_heads && m.has_mtl ? m.mtl.b.cols() : 0;
  ck.manifest["step"] = st.step;
  ck.manifest["config"] = config_snapshot;
  ck.manifest["history"] = st.history;
  ck.manifest["best_metric"] = st.best_metric;
  if (with_optimizer && st.opt.steps() > 0) {
    ck.manifest["optimizer"] = {{"steps", st.opt.steps()}};
    auto& names = st.opt.names();
    auto params = st.model.tensors();
    for (std::size_t k = 0; k < names.size(); ++k) {
      ck.put("adam.m." + names[k], params[k].rows, params[k].cols, std::vector<float>(st.opt.first_moments()[k]));
      ck.put("adam.v." + names[k], params[k].rows, params[k].cols, std::vector<float>(st.opt.second_moments()[k]));
    }
  }
  return ck;
}

/// Rebuilds a training state; heads present in the checkpoint are restored
/// only when `with_heads`.
inline TrainState restore_state(const Checkpoint& ck, bool with_heads, AdamWConfig opt_cfg = {}) {
  TrainState st;
  st.opt = AdamW<float>(opt_cfg);
  const auto ecfg = encoder_config_from_json(ck.manifest.at("encoder"));
  st.model.enc = EncoderParams<float>::zeros(ecfg);
  if (with_heads && !ck.manifest.at("mi").is_null()) {
    st.model.has_mi = true;
    st.model.mhca = MHCAParams<float>::zeros(ecfg.d_model, ck.manifest.at("mi").at("n_heads").get<std::size_t>());
    st.model.disc = DiscriminatorParams<float>::zeros(ecfg.d_model);
  }
  const auto mtl = ck.manifest.value("mtl_classes", 0);
  if (with_heads && mtl > 0) {
    st.model.has_mtl = true;
    st.model.mtl = MtlHeadParams<float>::zeros(ecfg.d_model, static_cast<std::size_t>(mtl));
  }
  ck.load_into(st.model.tensors());
  st.step = ck.manifest.value("step", std::size_t{0});
  st.history = ck.manifest.value("history", nlohmann::json::array());
  st.best_metric = ck.manifest.value("best_metric", -1.0);
  if (ck.manifest.contains("optimizer")) {
    auto params = st.model.tensors();
    auto& names = st.opt.names();
    for (const auto& t : params) {
      if (!ck.has("adam.m." + t.name)) throw Error("checkpoint: optimizer state missing for " + t.name);
      names.push_back(t.name);
      st.opt.first_moments().push_back(ck.get("adam.m." + t.name).values);
      st.opt.second_moments().push_back(ck.get("adam.v." + t.name).values);
    }
    st.opt.set_steps(ck.manifest.at("optimizer").at("steps").get<std::size_t>());
  }
  return st;
}

}  // namespace plse
