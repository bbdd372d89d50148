#include <gtest/gtest.h>

#include <fstream>

#include "plse/harness.hpp"
#include "plse/synthetic.hpp"
#include "test_util.hpp"

using namespace plse;

namespace {

Verbalizer bound_ab(Vocab& vocab) {
  Verbalizer v(Verbalizer::Table{{"B", {"b1", "b2"}}, {"A", {"a1"}}});
  for (const char* t : {"a1", "b1", "b2", "x", "y"}) vocab.add(t);
  v.bind(vocab);
  return v;
}

RowVec<double> log_masses(const Vocab& vocab, const std::map<std::string, double>& mass, double rest) {
  RowVec<double> r = RowVec<double>::Constant(static_cast<Eigen::Index>(vocab.size()), std::log(rest));
  for (const auto& [w, m] : mass) r(vocab.id(w)) = std::log(m);
  return r;
}

void write_pdtb_fixture(const std::filesystem::path& dir) {
  std::ofstream f(dir / "pdtb.csv");
  f << "section,arg1,arg2,conn_list,sense_list\n";
  for (int s = 0; s <= 24; ++s) f << s << ",a" << s << ",b" << s << ",but,Comparison.Contrast\n";
  f << "5,\"two, senses\",x,because|so,Contingency.Cause.Reason|Expansion.Conjunction\n";
  f << "21,test arg,y,and,Expansion.Conjunction\n";
  f << "1,one,z,instead,Expansion\n";
}

}  // namespace

TEST(Verbalizer, BuiltinSchemes) {
  const auto second = builtin_verbalizer(VerbalizerScheme::pdtb_second11);
  EXPECT_EQ(second.num_labels(), 11u);
  EXPECT_EQ(second.label_of("because").value(), "Contingency.Cause");
  const auto conll = builtin_verbalizer(VerbalizerScheme::conll14);
  EXPECT_EQ(conll.num_labels(), 14u);
  EXPECT_EQ(conll.label_of("if").value(), "Cont.Condition");
  const auto top = builtin_verbalizer(VerbalizerScheme::pdtb_top4);
  EXPECT_EQ(top.labels(), (std::vector<std::string>{"Comparison", "Contingency", "Expansion", "Temporal"}));
  EXPECT_EQ(top.label_of("instance").value(), "Expansion");
  EXPECT_FALSE(top.label_of("xyzzy").has_value());
  EXPECT_THROW(parse_scheme("pdtb_top5"), Error);
}

TEST(Verbalizer, RejectsOverlapAndEmptySets) {
  EXPECT_THROW(Verbalizer(Verbalizer::Table{{"A", {"w"}}, {"B", {"w"}}}), Error);
  EXPECT_THROW(Verbalizer(Verbalizer::Table{{"A", {}}}), Error);
  EXPECT_THROW(Verbalizer(Verbalizer::Table{}), Error);
  Verbalizer v(Verbalizer::Table{{"A", {"missing"}}});
  Vocab vocab;
  vocab.add("present");
  EXPECT_THROW(v.bind(vocab), Error);
}

TEST(Verbalizer, AnswerMapIsTotalAndDisjointForBuiltins) {
  for (auto s : {VerbalizerScheme::pdtb_top4, VerbalizerScheme::pdtb_second11, VerbalizerScheme::conll14}) {
    const auto v = builtin_verbalizer(s);
    std::set<std::string> seen;
    for (std::size_t l = 0; l < v.num_labels(); ++l) {
      ASSERT_FALSE(v.answers(l).empty());
      for (const auto& w : v.answers(l)) {
        EXPECT_TRUE(seen.insert(w).second) << w;
        EXPECT_EQ(v.label_of(w).value(), v.labels()[l]);
      }
    }
  }
}

TEST(Predict, ArgmaxOfAggregatedMass) {
  Vocab vocab;
  const auto v = bound_ab(vocab);
  const auto row = log_masses(vocab, {{"a1", 0.3}, {"b1", 0.5}, {"b2", 0.2}}, 1.0);
  const auto p = predict(row, v);
  EXPECT_EQ(v.labels()[p.label], "B");
  EXPECT_NEAR(p.distribution[0], 0.3, 1e-12);
  EXPECT_NEAR(p.distribution[1], 0.7, 1e-12);
}

TEST(Predict, ExactTieGoesToFirstLabel) {
  Vocab vocab;
  const auto v = bound_ab(vocab);
  const auto p = predict(log_masses(vocab, {{"a1", 0.5}, {"b1", 0.25}, {"b2", 0.25}}, 1e-3), v);
  EXPECT_EQ(p.label, 0u);
  EXPECT_EQ(v.labels()[0], "A");
}

TEST(Predict, RenormalizesWhenMassSitsOffAnswers) {
  Vocab vocab;
  const auto v = bound_ab(vocab);
  auto row = log_masses(vocab, {{"a1", 1e-9}, {"b1", 2e-9}, {"b2", 1e-9}}, 1.0);
  row(vocab.id("x")) = 40.0;
  const auto p = predict(row, v);
  EXPECT_NEAR(p.distribution[0] + p.distribution[1], 1.0, 1e-12);
  EXPECT_NEAR(p.distribution[0], 0.25, 1e-9);
  EXPECT_EQ(p.label, 1u);
}

TEST(Score, CountingExample) {
  const auto r = score({"A", "B", "A"}, {{"A"}, {"A"}, {"B"}}, {"A", "B"});
  EXPECT_NEAR(r.accuracy, 1.0 / 3, 1e-12);
  // A: tp 1, fp 1, fn 1 -> f1 0.5; B: tp 0 -> f1 0
  EXPECT_NEAR(r.per_class_f1[0], 0.5, 1e-12);
  EXPECT_NEAR(r.per_class_f1[1], 0.0, 1e-12);
  EXPECT_NEAR(r.macro_f1, 0.25, 1e-12);
  EXPECT_EQ(r.confusion, (std::vector<std::vector<std::size_t>>{{1, 1}, {1, 0}}));
}

TEST(Score, MatchOnAnyGold) {
  const auto r = score({"B", "C"}, {{"A", "B"}, {"A", "B"}}, {"A", "B", "C"});
  EXPECT_NEAR(r.accuracy, 0.5, 1e-12);
  // the matched gold is the reference; unmatched rows count against the first gold
  EXPECT_EQ(r.confusion[1][1], 1u);
  EXPECT_EQ(r.confusion[0][2], 1u);
  EXPECT_NEAR(r.per_class_f1[1], 1.0, 1e-12);
  EXPECT_NEAR(r.macro_f1, 1.0 / 3, 1e-12);
}

TEST(Score, AbsentLabelCountsInMacroAverage) {
  const auto r = score({"A", "A"}, {{"A"}, {"A"}}, {"A", "B", "C", "D"});
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_NEAR(r.macro_f1, 0.25, 1e-12);
}

TEST(Score, Errors) {
  EXPECT_THROW(score({"A"}, {}, {"A"}), Error);
  EXPECT_THROW(score({"Z"}, {{"A"}}, {"A"}), Error);
  EXPECT_THROW(score({"A"}, {{"A"}}, {"A", "A"}), Error);
  const auto empty = score({}, {}, {"A"});
  EXPECT_EQ(empty.accuracy, 0.0);
}

TEST(Score, MacroF1InvariantToLabelPermutation) {
  Rng rng(5);
  const std::vector<std::string> labels = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> pred;
    std::vector<std::vector<std::string>> gold;
    for (int i = 0; i < 40; ++i) {
      pred.push_back(labels[uniform_index(rng, 5)]);
      std::vector<std::string> g = {labels[uniform_index(rng, 5)]};
      if (uniform01(rng) < 0.2) g.push_back(labels[uniform_index(rng, 5)]);
      gold.push_back(g);
    }
    auto perm = labels;
    shuffle(perm, rng);
    const auto a = score(pred, gold, labels), b = score(pred, gold, perm);
    EXPECT_NEAR(a.macro_f1, b.macro_f1, 1e-12);
    EXPECT_EQ(a.accuracy, b.accuracy);
    // independent recount of accuracy
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += std::find(gold[i].begin(), gold[i].end(), pred[i]) != gold[i].end();
    EXPECT_NEAR(a.accuracy, static_cast<double>(hit) / 40.0, 1e-12);
  }
}

TEST(Datasets, LabeledJsonlRoundTripAndExpansion) {
  LabeledInstance x{"first arg", "second arg", {"A", "B"}, {"but"}, "doc1"};
  LabeledInstance y{"p", "q", {"C"}, {}, ""};
  const auto dir = make_temp_dir("jsonl");
  write_file(dir / "x.jsonl", write_labeled_jsonl({x, y}));
  EXPECT_EQ(read_labeled_jsonl(dir / "x.jsonl"), (std::vector<LabeledInstance>{x, y}));
  const auto rows = expand_multi_sense({x, y});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].gold_labels, std::vector<std::string>{"A"});
  EXPECT_EQ(rows[1].gold_labels, std::vector<std::string>{"B"});
  EXPECT_EQ(rows[1].arg1, "first arg");
  write_file(dir / "bad.jsonl", "{\"arg1\":\"a\",\"arg2\":\"b\",\"labels\":[\"A\"]}\n{bad\n");
  EXPECT_THROW_LINE(read_labeled_jsonl(dir / "bad.jsonl"), 2u);
}

TEST(Datasets, CsvQuotingAndErrors) {
  const auto rows = parse_csv("a,\"b,c\",\"d \"\"e\"\"\"\n1,2,3\n");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"a", "b,c", "d \"e\""}));
  EXPECT_THROW(parse_csv("a,\"open\n"), ParseError);
}

TEST(Datasets, PdtbSplitsAndSenseLevels) {
  const auto dir = make_temp_dir("pdtb");
  write_pdtb_fixture(dir);
  const auto l1 = load_pdtb(dir, 1);
  // sections 2-20 plus the two-sense row; 23 and 24 fall outside every split
  EXPECT_EQ(l1.stats.at("train").instances, 20u);
  EXPECT_EQ(l1.stats.at("train").rows, 21u);
  EXPECT_EQ(l1.train.size(), 21u);
  EXPECT_EQ(l1.dev.size(), 3u);
  EXPECT_EQ(l1.test.size(), 3u);
  bool found_test = false;
  for (const auto& x : l1.test) found_test |= x.arg1 == "test arg";
  EXPECT_TRUE(found_test);

  const auto l2 = load_pdtb(dir, 2);
  // "Expansion" has no second-level sense
  EXPECT_EQ(l2.dropped, 1u);
  EXPECT_EQ(l2.dev.size(), 2u);
  std::size_t cause = 0;
  for (const auto& x : l2.train) cause += x.gold_labels == std::vector<std::string>{"Contingency.Cause"};
  EXPECT_EQ(cause, 1u);

  const auto only = load_pdtb(dir, 1, {"Comparison"});
  EXPECT_EQ(only.stats.at("train").rows, 19u);
}

TEST(Datasets, PdtbMissingSectionsAreListed) {
  const auto dir = make_temp_dir("pdtb_missing");
  write_file(dir / "a.csv", "section,arg1,arg2,conn_list,sense_list\n0,a,b,c,Expansion\n21,a,b,c,Expansion\n");
  try {
    load_pdtb(dir, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("missing sections 1,2,3"), std::string::npos) << m;
    EXPECT_NE(m.find(",22"), std::string::npos) << m;
  }
  EXPECT_THROW(load_pdtb(dir, 3), Error);
}

TEST(Datasets, ConllLabelsAndTrainExpansion) {
  const auto dir = make_temp_dir("conll");
  write_file(dir / "train.jsonl",
             "{\"arg1\":\"a\",\"arg2\":\"b\",\"senses\":[\"Contingency.Cause.Reason\",\"Expansion.Conjunction\"]}\n"
             "{\"arg1\":\"c\",\"arg2\":\"d\",\"senses\":[\"EntRel\"]}\n");
  write_file(dir / "test.jsonl", "{\"arg1\":\"a\",\"arg2\":\"b\",\"senses\":[\"Temporal.Synchrony\",\"Comparison.Contrast\"]}\n");
  const auto v = builtin_verbalizer(VerbalizerScheme::conll14);
  const std::set<std::string> allowed(v.labels().begin(), v.labels().end());
  const auto tr = load_conll(dir, "train", allowed);
  EXPECT_EQ(tr.relations, 1u);
  EXPECT_EQ(tr.dropped, 1u);
  ASSERT_EQ(tr.instances.size(), 2u);
  EXPECT_EQ(tr.instances[0].gold_labels, std::vector<std::string>{"Cont.Cause.Reason"});
  const auto te = load_conll(dir, "test", allowed);
  ASSERT_EQ(te.instances.size(), 1u);
  EXPECT_EQ(te.instances[0].gold_labels, (std::vector<std::string>{"Temp.Synchrony", "Comp.Contrast"}));
  EXPECT_THROW(load_conll(dir, "dev"), Error);
}

TEST(Harness, VariantSwitches) {
  EXPECT_TRUE(variant_switches("full").any());
  const auto none = variant_switches("-GLSL-CM-MLM");
  EXPECT_FALSE(none.any());
  const auto g = variant_switches("-GLSL");
  EXPECT_FALSE(g.glsl);
  EXPECT_TRUE(g.cm && g.mlm);
  EXPECT_EQ(variant_switches("MTL_mean").mtl, MtlVariant::mean);
  EXPECT_FALSE(variant_switches("MTL_cls").glsl);
  EXPECT_THROW(variant_switches("-XYZ"), Error);
  EXPECT_THROW(variant_switches("partial"), Error);
  for (const auto& v : ablation_variants()) EXPECT_NO_THROW(variant_switches(v));
}

TEST(Harness, StratifiedSubsample) {
  std::vector<LabeledInstance> xs;
  for (int i = 0; i < 100; ++i) xs.push_back({"a" + std::to_string(i), "b", {i < 60 ? "A" : "B"}, {}, ""});
  const auto half = stratified_subsample(xs, 0.5, 3);
  std::size_t a = 0;
  for (const auto& x : half) a += x.gold_labels[0] == "A";
  EXPECT_EQ(a, 30u);
  EXPECT_EQ(half.size() - a, 20u);
  EXPECT_EQ(stratified_subsample(xs, 1.0, 3), xs);
  EXPECT_NE(stratified_subsample(xs, 0.5, 4), half);
  EXPECT_THROW(stratified_subsample(xs, 0.0, 1), Error);

  std::vector<LabeledInstance> rare = xs;
  rare.push_back({"r", "b", {"C"}, {}, ""});
  CaptureWarnings warn;
  const auto small = stratified_subsample(rare, 0.1, 1);
  EXPECT_EQ(small.size(), 10u);
  ASSERT_FALSE(warn.messages.empty());
  EXPECT_NE(warn.messages[0].find("'C'"), std::string::npos);
}

TEST(Harness, SummaryStatistics) {
  const std::vector<RunRow> rows = {{"x", 1, 0.5, 0.4}, {"x", 2, 0.7, 0.6}, {"y", 1, 0.9, 0.8}};
  const auto g = summarize(rows);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_NEAR(g[0].acc_mean, 0.6, 1e-12);
  EXPECT_NEAR(g[0].acc_std, std::sqrt(0.02), 1e-12);
  EXPECT_EQ(g[1].acc_std, 0.0);
  const auto [name, back] = parse_runs_csv(runs_csv("variant", rows));
  EXPECT_EQ(name, "variant");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_NEAR(back[1].macro_f1, 0.6, 1e-9);
  EXPECT_NE(summary_markdown("variant", g).find("60.00 ± 14.14"), std::string::npos);
}

TEST(Harness, PipelineSkipAndFullFractionIdentity) {
  SynthSpec spec;
  spec.explicit_n = 300;
  spec.implicit_train_n = 80;
  spec.implicit_valid_n = 40;
  spec.implicit_test_n = 40;
  const auto c = generate(spec);
  PipelineData d;
  std::tie(d.explicit_train, d.explicit_valid) = split_train_valid(c.explicit_pairs, 0.9, 1);
  d.train = c.implicit_train;
  d.valid = c.implicit_valid;
  d.test = c.implicit_test;
  d.verbalizer = c.verbalizer;
  std::set<std::string> forced;
  for (const auto& w : c.verbalizer.answer_words()) forced.insert(w);
  d.vocab = build_vocab(c.explicit_pairs, 1, 1000, forced);

  PipelineConfig cfg;
  cfg.encoder.d_model = 16;
  cfg.encoder.n_layers = 1;
  cfg.encoder.n_heads = 2;
  cfg.encoder.d_ff = 32;
  cfg.encoder.max_len = 32;
  cfg.mhca_heads = 2;
  cfg.pretrain.batch_size = 16;
  cfg.pretrain.learning_rate = 1e-3;
  cfg.pretrain.epochs = 1;
  cfg.tune.phase = Phase::tune;
  cfg.tune.batch_size = 16;
  cfg.tune.learning_rate = 1e-3;
  cfg.tune.epochs = 2;

  auto off = cfg;
  off.pretrain.switches = variant_switches("-GLSL-CM-MLM");
  const auto r0 = run_pipeline(off, d);
  EXPECT_EQ(r0.pretrain_steps, 0u);
  EXPECT_TRUE(r0.pretrain_log.empty());

  const auto direct = run_pipeline(with_seed(cfg, 2), d);
  EXPECT_GT(direct.pretrain_steps, 0u);
  const auto rows = few_shot_harness(cfg, d, {1.0}, {2});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].accuracy, direct.test.accuracy);
  EXPECT_EQ(rows[0].macro_f1, direct.test.macro_f1);
}
