#include <gtest/gtest.h>

#include "plse/gradcheck.hpp"
#include "plse/synthetic.hpp"
#include "plse/trainer.hpp"
#include "test_util.hpp"

using namespace plse;

namespace {

// Two-column logit row whose cross-entropy against column 0 equals `loss`.
void set_loss_row(Mat<double>& m, Eigen::Index r, double loss) {
  m(r, 0) = 0.0;
  m(r, 1) = std::log(std::exp(loss) - 1.0);
}

struct TinySetup {
  SynthCorpus corpus;
  Vocab vocab;
  Verbalizer verb;
  PretrainData train, valid;
  LabeledData tune_train, tune_valid;
  EncoderConfig enc;
};

TinySetup tiny_setup(std::size_t explicit_n = 600) {
  TinySetup s;
  SynthSpec spec;
  spec.vocab_size = 60;
  spec.arg_len_min = 3;
  spec.arg_len_max = 6;
  spec.explicit_n = explicit_n;
  spec.implicit_train_n = 200;
  spec.implicit_valid_n = 100;
  spec.implicit_test_n = 10;
  s.corpus = generate(spec);
  std::set<std::string> forced;
  for (const auto& w : s.corpus.verbalizer.answer_words()) forced.insert(w);
  s.vocab = build_vocab(s.corpus.explicit_pairs, 1, 1000, forced);
  s.verb = s.corpus.verbalizer;
  s.verb.bind(s.vocab);
  const auto inv = connective_inventory(s.corpus.explicit_pairs);
  const auto [tr, va] = split_train_valid(s.corpus.explicit_pairs, 0.9, 1);
  s.train = prepare_pretrain(tr, s.vocab, 24, inv);
  s.valid = prepare_pretrain(va, s.vocab, 24, inv);
  s.tune_train = prepare_labeled(s.corpus.implicit_train, s.vocab, 24, s.verb);
  s.tune_valid = prepare_labeled(s.corpus.implicit_valid, s.vocab, 24, s.verb);
  s.enc.d_model = 16;
  s.enc.n_layers = 2;
  s.enc.n_heads = 2;
  s.enc.d_ff = 32;
  s.enc.max_len = 24;
  s.enc.vocab_size = s.vocab.size();
  s.enc.dropout_p = 0.1;
  s.enc.seed = 4;
  return s;
}

TrainConfig tiny_pretrain_config() {
  TrainConfig c;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.epochs = 2;
  c.seed = 9;
  c.switches.mtl = MtlVariant::none;
  return c;
}

std::vector<nlohmann::json> run_pretrain(const TinySetup& s, const TrainConfig& cfg, TrainState& st) {
  std::vector<nlohmann::json> log;
  pretrain(cfg, st, s.train, s.valid, [&](const nlohmann::json& r) { log.push_back(r); });
  return log;
}

TrainState fresh_state(const TinySetup& s, const LossSwitches& sw) {
  TrainState st;
  st.model = init_model<float>(s.enc, sw.glsl, 2, sw.mtl != MtlVariant::none ? connective_inventory(s.corpus.explicit_pairs).size() : 0);
  return st;
}

}  // namespace

TEST(CmLoss, UniformLogitsGiveLogV) {
  const Mat<double> logits = Mat<double>::Zero(3, 8000);
  EXPECT_NEAR(cm_loss(logits, {5, 17, 7999}), std::log(8000.0), 1e-12);
  EXPECT_NEAR(std::log(8000.0), 8.987, 1e-3);
}

TEST(CmLoss, SaturatedCorrectLogits) {
  Mat<double> logits = Mat<double>::Zero(2, 100);
  logits(0, 3) = 50;
  logits(1, 9) = 50;
  EXPECT_LT(cm_loss(logits, {3, 9}), 1e-6);
}

TEST(CmLoss, BatchMeanIsMeanOfSingles) {
  Rng rng(1);
  Mat<double> logits(5, 30);
  fill_normal(logits, rng, 2.0);
  const std::vector<TokenId> t = {0, 4, 9, 29, 3};
  double singles = 0;
  for (Eigen::Index i = 0; i < 5; ++i) singles += cm_loss(Mat<double>(logits.row(i)), {t[static_cast<std::size_t>(i)]});
  EXPECT_NEAR(cm_loss(logits, t), singles / 5, 1e-12);
}

TEST(MlmLoss, TwoLevelMeanDiffersFromFlatMean) {
  Mat<double> logits(3, 2);
  set_loss_row(logits, 0, 1.0);
  set_loss_row(logits, 1, 3.0);
  set_loss_row(logits, 2, 5.0);
  const auto r = mlm_loss(logits, {0, 0, 0}, {0, 0, 1});
  EXPECT_NEAR(r.value, 3.5, 1e-12);
  EXPECT_FALSE(r.empty);
  EXPECT_EQ(r.instances, 2u);
  // the flat mean would be 3.0
  EXPECT_GT(std::abs(r.value - 3.0), 0.4);
}

TEST(MlmLoss, UniformLogitsGiveLogV) {
  const Mat<double> logits = Mat<double>::Zero(4, 250);
  EXPECT_NEAR(mlm_loss(logits, {1, 2, 3, 4}, {0, 0, 1, 2}).value, std::log(250.0), 1e-12);
}

TEST(MlmLoss, EmptyInstancesAreExcluded) {
  Mat<double> logits(1, 2);
  set_loss_row(logits, 0, 4.0);
  // instance 0 has no positions; only instance 1 contributes
  EXPECT_NEAR(mlm_loss(logits, {0}, {1}).value, 4.0, 1e-12);
  const auto none = mlm_loss(Mat<double>(0, 2), {}, {});
  EXPECT_TRUE(none.empty);
  EXPECT_EQ(none.value, 0.0);
}

TEST(MlmLoss, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Mat<double> logits(5, 7);
  fill_normal(logits, rng, 1.0);
  const std::vector<TokenId> t = {1, 2, 3, 4, 5};
  const std::vector<std::size_t> g = {0, 0, 0, 2, 2};
  Mat<double> d;
  mlm_loss(logits, t, g, &d);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    Mat<double> up = logits, dn = logits;
    up.data()[i] += 1e-6;
    dn.data()[i] -= 1e-6;
    EXPECT_NEAR(d.data()[i], (mlm_loss(up, t, g).value - mlm_loss(dn, t, g).value) / 2e-6, 1e-7);
  }
}

TEST(TuneLoss, SumThenRenormalize) {
  Verbalizer v(Verbalizer::Table{{"A", {"a1", "a2"}}, {"B", {"b1", "b2"}}});
  Vocab vocab;
  for (const char* t : {"a1", "a2", "b1", "b2", "other"}) vocab.add(t);
  v.bind(vocab);
  Mat<double> logits = Mat<double>::Constant(1, static_cast<Eigen::Index>(vocab.size()), 3.0);
  logits(0, vocab.id("a1")) = std::log(0.2);
  logits(0, vocab.id("a2")) = std::log(0.1);
  logits(0, vocab.id("b1")) = std::log(0.3);
  logits(0, vocab.id("b2")) = std::log(0.4);
  EXPECT_NEAR(tune_loss(logits, v, {0}), -std::log(0.3), 1e-12);
  EXPECT_NEAR(-std::log(0.3), 1.204, 1e-3);
  const auto dist = label_distribution(logits.row(0), v);
  EXPECT_NEAR(dist[0], 0.3, 1e-12);
  EXPECT_NEAR(dist[1], 0.7, 1e-12);
}

TEST(TuneLoss, SingleLabelIsZero) {
  Verbalizer v(Verbalizer::Table{{"only", {"x", "y"}}});
  Vocab vocab;
  vocab.add("x");
  vocab.add("y");
  v.bind(vocab);
  Rng rng(3);
  Mat<double> logits(4, static_cast<Eigen::Index>(vocab.size()));
  fill_normal(logits, rng, 5.0);
  EXPECT_NEAR(tune_loss(logits, v, {0, 0, 0, 0}), 0.0, 1e-12);
}

TEST(TuneLoss, ShiftInvariantAndUnknownLabel) {
  Verbalizer v(Verbalizer::Table{{"A", {"a"}}, {"B", {"b", "c"}}, {"C", {"d"}}});
  Vocab vocab;
  for (const char* t : {"a", "b", "c", "d"}) vocab.add(t);
  v.bind(vocab);
  Rng rng(4);
  Mat<double> logits(3, static_cast<Eigen::Index>(vocab.size()));
  fill_normal(logits, rng, 3.0);
  const Mat<double> shifted = logits.array() + 17.0;
  EXPECT_NEAR(tune_loss(logits, v, {0, 1, 2}), tune_loss(shifted, v, {0, 1, 2}), 1e-12);
  EXPECT_THROW(tune_loss(logits, v, {0, 1, 3}), Error);
  EXPECT_THROW(require_label(v, "Z"), Error);
  EXPECT_EQ(require_label(v, "B"), 1u);
}

TEST(TotalLoss, SwitchesSelectTermsAndSumIsAdditive) {
  const auto cfg = detail::gradcheck_encoder_config(5);
  auto batch = detail::gradcheck_batch(cfg.vocab_size, 3, 5);
  auto model = init_model<double>(cfg, true, 2, 4);
  const std::vector<std::size_t> neg = {2, 0, 1}, mtl_t = {0, 1, 3};
  ModelParams<double>* no_grad = nullptr;
  MtlHeadParams<double>* no_head = nullptr;
  RowVec<double>* no_rep = nullptr;

  // independent evaluation of each term from eval-mode hidden states
  std::vector<Mat<double>> H = forward(model.enc, batch, Mode::eval);
  Mat<double> slot(3, static_cast<Eigen::Index>(cfg.vocab_size));
  std::vector<TokenId> cm_t;
  std::vector<TokenId> mlm_t;
  std::vector<std::size_t> group;
  Mat<double> mlm_rows(0, static_cast<Eigen::Index>(cfg.vocab_size));
  MIBatch<double> mb;
  mb.negative_of = neg;
  double mtl = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& m = batch[i];
    slot.row(static_cast<Eigen::Index>(i)) = mlm_logits(model.enc, H[i], {m.base.cmask_pos}).row(0);
    cm_t.push_back(*m.cm_target);
    const auto L = mlm_logits(model.enc, H[i], m.mlm_positions);
    Mat<double> grown(mlm_rows.rows() + L.rows(), mlm_rows.cols());
    grown << mlm_rows, L;
    mlm_rows = grown;
    for (std::size_t k = 0; k < m.mlm_targets.size(); ++k) {
      mlm_t.push_back(m.mlm_targets[k]);
      group.push_back(i);
    }
    mb.h_cmask.push_back(H[i].row(static_cast<Eigen::Index>(m.base.cmask_pos)));
    mb.kv.push_back(detail::gather_kv(H[i], m.base));
    mtl += mtl_row_loss(model.mtl, mtl_representation(H[i], m.base, MtlVariant::mean), mtl_t[i], 1.0, no_head, no_rep) / 3.0;
  }
  const double cm = cm_loss(slot, cm_t);
  const double mlm = mlm_loss(mlm_rows, mlm_t, group).value;
  const double glsl = glsl_loss(model.mhca, model.disc, mb).loss;

  LossSwitches only_cm{true, false, false, MtlVariant::none};
  EXPECT_EQ(pretrain_batch(model, batch, mtl_t, neg, only_cm, Mode::eval, 0, 1, no_grad).total,
            pretrain_batch(model, batch, mtl_t, neg, only_cm, Mode::eval, 0, 1, no_grad).cm);
  EXPECT_NEAR(pretrain_batch(model, batch, mtl_t, neg, only_cm, Mode::eval, 0, 1, no_grad).total, cm, 1e-12);

  LossSwitches all{true, true, true, MtlVariant::none};
  const auto L = pretrain_batch(model, batch, mtl_t, neg, all, Mode::eval, 0, 1, no_grad);
  EXPECT_NEAR(L.cm, cm, 1e-12);
  EXPECT_NEAR(L.mlm, mlm, 1e-12);
  EXPECT_NEAR(L.glsl, glsl, 1e-12);
  EXPECT_NEAR(L.total, cm + mlm + glsl, 1e-12);
  EXPECT_GE(L.cm, 0.0);
  EXPECT_GE(L.mlm, 0.0);
  EXPECT_GE(L.glsl, 0.0);

  LossSwitches mtl_mean{true, true, false, MtlVariant::mean};
  const auto M = pretrain_batch(model, batch, mtl_t, neg, mtl_mean, Mode::eval, 0, 1, no_grad);
  EXPECT_NEAR(M.mtl, mtl, 1e-12);
  EXPECT_NEAR(M.total, cm + mlm + mtl, 1e-12);
  EXPECT_EQ(M.glsl, 0.0);
}

TEST(TotalLoss, InstanceWithoutMlmPositionsLeavesDenominator) {
  const auto cfg = detail::gradcheck_encoder_config(6);
  auto batch = detail::gradcheck_batch(cfg.vocab_size, 2, 6);
  auto model = init_model<double>(cfg, false, 2, 0);
  ModelParams<double>* no_grad = nullptr;
  LossSwitches sw{false, true, false, MtlVariant::none};
  const double single = pretrain_batch(model, {batch[0]}, {}, {}, sw, Mode::eval, 0, 1, no_grad).mlm;
  batch[1].mlm_positions.clear();
  batch[1].mlm_targets.clear();
  EXPECT_NEAR(pretrain_batch(model, batch, {}, {}, sw, Mode::eval, 0, 1, no_grad).mlm, single, 1e-12);
}

TEST(GradCheck, LossHeadsMatchFiniteDifferences) {
  for (const char* m : {"cm", "mlm", "tune", "mtl_cls", "mtl_mean"}) {
    const auto r = run_gradcheck(m);
    EXPECT_LT(r.max_rel_err, 1e-4) << m << " worst " << r.worst;
  }
}

TEST(Schedule, WarmupPeaksAtTenPercent) {
  std::size_t arg = 0;
  double best = -1;
  for (std::size_t s = 1; s <= 1000; ++s) {
    const double lr = lr_at(s, 1000, 0.1, 1e-3);
    if (lr > best) {
      best = lr;
      arg = s;
    }
  }
  EXPECT_EQ(arg, 100u);
  EXPECT_DOUBLE_EQ(best, 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(50, 1000, 0.1, 1e-3), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(550, 1000, 0.1, 1e-3), 5e-4);
  EXPECT_EQ(lr_at(1000, 1000, 0.1, 1e-3), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1, 10, 0.0, 1e-3), 9e-4);
}

TEST(Optimizer, GlobalNormClipping) {
  Mat<double> a(2, 2);
  a << 3, 0, 0, 0;
  RowVec<double> b(2);
  b << 4, 0;
  std::vector<TensorRef<double>> refs;
  add_ref(refs, "a", a);
  add_ref(refs, "b", b);
  EXPECT_DOUBLE_EQ(clip_global_norm(refs, 1.0), 5.0);
  EXPECT_NEAR(global_norm(refs), 1.0, 1e-12);
  EXPECT_NEAR(a(0, 0), 0.6, 1e-12);
  EXPECT_DOUBLE_EQ(clip_global_norm(refs, 10.0), global_norm(refs));
}

TEST(Optimizer, AdamWMatchesHandComputation) {
  Mat<double> w(2, 2);
  w << 1, -2, 0.5, 0;
  RowVec<double> b(2);
  b << 1, 1;
  Mat<double> gw(2, 2);
  gw << 0.1, -0.2, 0.3, 0;
  RowVec<double> gb(2);
  gb << 0.5, -0.5;
  std::vector<TensorRef<double>> p, g;
  add_ref(p, "w", w);
  add_ref(p, "b", b);
  add_ref(g, "w", gw);
  add_ref(g, "b", gb);
  AdamWConfig oc;
  oc.weight_decay = 0.1;
  AdamW<double> opt(oc);
  const double lr = 0.01;
  opt.step(p, g, lr);
  // after one step m_hat = g and v_hat = g^2, so the update is lr * sign(g)
  // up to eps; decay multiplies matrices only
  auto expect = [&](double p0, double gi, bool decay) {
    const double m = 0.1 * gi, v = 0.001 * gi * gi;
    return p0 * (decay ? 1 - lr * 0.1 : 1.0) - lr / 0.1 * m / (std::sqrt(v / 0.001) + 1e-8);
  };
  EXPECT_NEAR(w(0, 0), expect(1, 0.1, true), 1e-12);
  EXPECT_NEAR(w(0, 1), expect(-2, -0.2, true), 1e-12);
  EXPECT_NEAR(w(1, 1), 0.0, 1e-15);
  EXPECT_NEAR(b(0), expect(1, 0.5, false), 1e-12);
  EXPECT_NEAR(b(1), expect(1, -0.5, false), 1e-12);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(TrainConfigTest, ValidationAndConfigKeys) {
  TrainConfig t;
  t.warmup_ratio = 1.0;
  EXPECT_THROW(t.validate(), Error);
  t = {};
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), Error);
  t = {};
  t.epochs = 0;
  EXPECT_THROW(t.validate(), Error);
  auto c = Config::parse("seed = 3\npretrain.batch_size = 8\npretrain.learning_rate = 2e-4\nloss.glsl = false\nloss.mtl = mean\n");
  const auto pt = train_config_from(c, Phase::pretrain);
  EXPECT_EQ(pt.batch_size, 8u);
  EXPECT_DOUBLE_EQ(pt.learning_rate, 2e-4);
  EXPECT_EQ(pt.seed, 3u);
  EXPECT_FALSE(pt.switches.glsl);
  EXPECT_EQ(pt.switches.mtl, MtlVariant::mean);
  const auto tt = train_config_from(Config::parse(""), Phase::tune);
  EXPECT_EQ(tt.phase, Phase::tune);
  EXPECT_EQ(tt.epochs, 10u);
}

TEST(Trainer, SameSeedGivesIdenticalLossCurves) {
  const auto s = tiny_setup();
  auto cfg = tiny_pretrain_config();
  auto a = fresh_state(s, cfg.switches), b = fresh_state(s, cfg.switches);
  const auto la = run_pretrain(s, cfg, a);
  cfg.threads = 4;
  const auto lb = run_pretrain(s, cfg, b);
  ASSERT_EQ(la.size(), lb.size());
  ASSERT_EQ(la.size(), pretrain_total_steps(cfg, s.train.size()));
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_NEAR(la[i]["total"].get<double>(), lb[i]["total"].get<double>(), 1e-10);
    for (const char* k : {"cm", "mlm", "glsl"}) EXPECT_GE(la[i][k].get<double>(), 0.0);
  }
  auto ta = a.model.tensors(), tb = b.model.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k)
    EXPECT_EQ(std::memcmp(ta[k].data, tb[k].data, sizeof(float) * static_cast<std::size_t>(ta[k].size())), 0) << ta[k].name;
}

TEST(Trainer, ResumeReproducesTheNextTenSteps) {
  const auto s = tiny_setup();
  const auto cfg = tiny_pretrain_config();
  auto full = fresh_state(s, cfg.switches);
  const auto log = run_pretrain(s, cfg, full);

  const std::size_t cut = 37;
  auto part_cfg = cfg;
  part_cfg.max_steps = cut;
  auto part = fresh_state(s, cfg.switches);
  run_pretrain(s, part_cfg, part);
  ASSERT_EQ(part.step, cut);
  const auto bytes = serialize_checkpoint(make_checkpoint(part, cfg.to_json(), true, true));
  auto resumed = restore_state(parse_checkpoint(bytes), true);
  auto resume_cfg = cfg;
  resume_cfg.max_steps = cut + 10;
  const auto tail = run_pretrain(s, resume_cfg, resumed);
  ASSERT_EQ(tail.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(tail[i]["step"].get<std::size_t>(), cut + 1 + i);
    EXPECT_EQ(tail[i]["total"].get<double>(), log[cut + i]["total"].get<double>());
  }
}

TEST(Trainer, ValidationMetricLoggedPerEpoch) {
  const auto s = tiny_setup();
  const auto cfg = tiny_pretrain_config();
  auto st = fresh_state(s, cfg.switches);
  const auto log = run_pretrain(s, cfg, st);
  std::size_t with_metric = 0;
  for (const auto& r : log) {
    for (const char* k : {"step", "lr", "cm", "mlm", "glsl", "total", "valid_metric"}) EXPECT_TRUE(r.contains(k)) << k;
    with_metric += !r["valid_metric"].is_null();
  }
  EXPECT_EQ(with_metric, cfg.epochs);
  EXPECT_EQ(st.history.size(), cfg.epochs);
}

TEST(Trainer, DivergenceAbortsWithDump) {
  const auto s = tiny_setup(100);
  const auto cfg = tiny_pretrain_config();
  auto st = fresh_state(s, cfg.switches);
  st.model.enc.tok_emb(7, 0) = std::numeric_limits<float>::quiet_NaN();
  const auto dir = make_temp_dir("diverge");
  EXPECT_THROW(pretrain(cfg, st, s.train, s.valid, {}, dir), DivergenceError);
  ASSERT_TRUE(std::filesystem::exists(dir / "divergence_dump.json"));
  const auto dump = nlohmann::json::parse(read_file(dir / "divergence_dump.json"));
  EXPECT_EQ(dump["step"].get<std::size_t>(), 1u);
  EXPECT_FALSE(dump["instances"].empty());
}

TEST(Trainer, TuneKeepsBestOnValidation) {
  const auto s = tiny_setup(100);
  TrainConfig cfg;
  cfg.phase = Phase::tune;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 3;
  TrainState st;
  st.model = init_model<float>(s.enc, false, 2, 0);
  ModelParams<float> best;
  tune(cfg, st, s.tune_train, s.tune_valid, s.verb, best);
  ASSERT_EQ(st.history.size(), 3u);
  double top = -1;
  for (const auto& h : st.history) top = std::max(top, h["valid_metric"].get<double>());
  EXPECT_DOUBLE_EQ(st.best_metric, top);
  EXPECT_DOUBLE_EQ(evaluate(best, s.tune_valid, s.verb, 1).report.accuracy, top);
}

TEST(Trainer, SyntheticPretrainingDrivesCmBelowLn2) {
  const auto s = tiny_setup(4000);
  auto cfg = tiny_pretrain_config();
  cfg.batch_size = 32;
  cfg.epochs = 12;
  cfg.learning_rate = 3e-3;
  auto st = fresh_state(s, cfg.switches);
  run_pretrain(s, cfg, st);
  // connective-mask loss on held-out pairs with the slot masked
  std::vector<MaskedEncoding> encs;
  Rng unused(0);
  for (std::size_t i = 0; i < s.valid.size(); ++i) encs.push_back(apply_connective_mask(s.valid.enc[i], s.valid.conn[i], unused, 1.0));
  const auto logits = slot_logits(st.model, encs, 1);
  double cm = 0;
  for (std::size_t i = 0; i < encs.size(); ++i) cm += xent_row(Mat<float>(logits[i]), 0, s.valid.conn[i]);
  cm /= static_cast<double>(encs.size());
  EXPECT_LT(cm, std::log(2.0));
}
