// Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "plse/gradcheck.hpp"
#include "plse/harness.hpp"
#include "plse/jsd_toy.hpp"
#include "plse/manifest.hpp"
#include "plse/synthetic.hpp"

using namespace plse;
namespace fs = std::filesystem;

namespace {

constexpr double kEndToEndMinAccuracy = 0.90;
constexpr double kEndToEndMinMacroF1 = 0.85;
constexpr double kEndToEndMaxSeconds = 600;
constexpr double kJsdTolerance = 0.05;
constexpr double kJsdMaxSeconds = 60;
constexpr double kAblationMinGain = 0.02;
constexpr double kGradMaxRelErr = 1e-4;
constexpr double kGradMaxSeconds = 120;
constexpr std::size_t kMaskTrials = 10000;
constexpr double kConnMaskLow = 0.88, kConnMaskHigh = 0.92;
constexpr double kUniversalMaskRelTol = 0.10;
constexpr double kScoreTolerance = 1e-12;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

std::string source_path(const std::string& rel) { return std::string(PLSE_SOURCE_DIR) + "/" + rel; }

fs::path scratch_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("plse_acceptance_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// 1: PDTB loader statistics

struct SplitTarget {
  std::size_t total;
  std::vector<std::size_t> per_label;  // aligned with the label list
};

struct TableTarget {
  int level;
  std::vector<std::string> labels;
  std::map<std::string, SplitTarget> splits;
};

TableTarget top_level_target() {
  return {1,
          {"Comparison", "Contingency", "Expansion", "Temporal"},
          {{"train", {12632, {1942, 3340, 7004, 760}}}, {"dev", {1183, {197, 292, 671, 64}}}, {"test", {1046, {152, 279, 574, 85}}}}};
}

TableTarget second_level_target() {
  return {2,
          {"Comparison.Concession", "Comparison.Contrast", "Contingency.Cause", "Contingency.Pragmatic cause", "Expansion.Alternative",
           "Expansion.Conjunction", "Expansion.Instantiation", "Expansion.List", "Expansion.Restatement", "Temporal.Asynchronous",
           "Temporal.Synchrony"},
          {{"train", {12406, {184, 1610, 3277, 64, 151, 2882, 1102, 338, 2458, 555, 204}}},
           {"dev", {1165, {15, 171, 284, 7, 10, 264, 108, 10, 271, 50, 13}}},
           {"test", {1039, {17, 134, 272, 7, 9, 209, 122, 12, 216, 57, 28}}}}};
}

std::string csv_field(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

// Relations for one split: the label occurrences are laid out in label
// order and relation j takes occurrence j, plus occurrence total + j when
// the occurrence count exceeds the relation count. Sections cycle over the
// split's range.
void write_split_fixture(const TableTarget& t, const std::string& split, const std::vector<int>& sections,
                         std::map<int, std::string>& files) {
  const auto& st = t.splits.at(split);
  std::vector<std::string> occ;
  for (std::size_t l = 0; l < t.labels.size(); ++l) occ.insert(occ.end(), st.per_label[l], t.labels[l]);
  if (occ.size() < st.total || occ.size() > 2 * st.total) throw Error("fixture: per-label counts inconsistent with total for " + split);
  for (std::size_t j = 0; j < st.total; ++j) {
    std::vector<std::string> senses = {occ[j] + ".Detail"};
    if (st.total + j < occ.size()) {
      if (occ[st.total + j] == occ[j]) throw Error("fixture: cannot pair distinct senses for " + split);
      senses.push_back(occ[st.total + j]);
    }
    const int sec = sections[j % sections.size()];
    files[sec] += std::to_string(sec) + "," + csv_field("arg one " + std::to_string(j)) + "," + csv_field("arg two " + split) + ",and|but," +
                  csv_field(join(senses, "|")) + "\n";
  }
}

std::string check_stats(const PdtbDataset& ds, const TableTarget& t, bool totals_only) {
  std::vector<std::string> bad;
  for (const auto& [split, st] : t.splits) {
    const auto it = ds.stats.find(split);
    const std::size_t got = it == ds.stats.end() ? 0 : it->second.instances;
    if (got != st.total) bad.push_back(split + " total " + std::to_string(got) + "!=" + std::to_string(st.total));
    if (totals_only || it == ds.stats.end()) continue;
    for (std::size_t l = 0; l < t.labels.size(); ++l) {
      const auto pl = it->second.per_label.find(t.labels[l]);
      const std::size_t n = pl == it->second.per_label.end() ? 0 : pl->second;
      if (n != st.per_label[l]) bad.push_back(split + " " + t.labels[l] + " " + std::to_string(n) + "!=" + std::to_string(st.per_label[l]));
    }
  }
  return join(bad, "; ");
}

Outcome criterion_pdtb_stats() {
  std::vector<std::string> parts;
  bool ok = true;
  for (const auto& t : {top_level_target(), second_level_target()}) {
    const auto dir = scratch_dir("pdtb_l" + std::to_string(t.level));
    std::map<int, std::string> files;
    std::vector<int> train_secs;
    for (int s = 2; s <= 20; ++s) train_secs.push_back(s);
    write_split_fixture(t, "train", train_secs, files);
    write_split_fixture(t, "dev", {0, 1}, files);
    write_split_fixture(t, "test", {21, 22}, files);
    // sections outside the splits, and a relation with no usable sense
    for (int s : {23, 24}) files[s] += std::to_string(s) + ",a,b,and," + csv_field(t.labels[0]) + "\n";
    files[2] += std::string("2,a,b,and,") + (t.level == 2 ? "Temporal" : "EntRel") + "\n";
    for (const auto& [sec, body] : files)
      write_file(dir / ("wsj_" + std::to_string(sec) + ".csv"), "section,arg1,arg2,conn_list,sense_list\n" + body);
    const std::set<std::string> allowed(t.labels.begin(), t.labels.end());
    const auto ds = load_pdtb(dir, t.level, allowed);
    const auto err = check_stats(ds, t, false);
    const auto& tr = ds.stats.at("train");
    parts.push_back("level " + std::to_string(t.level) + " train/dev/test " + std::to_string(tr.instances) + "/" +
                    std::to_string(ds.stats.at("dev").instances) + "/" + std::to_string(ds.stats.at("test").instances) + " train rows " +
                    std::to_string(tr.rows) + (err.empty() ? "" : " [" + err + "]"));
    ok = ok && err.empty() && ds.train.size() == tr.rows;
    fs::remove_all(dir);
  }
  if (const char* real = std::getenv("PLSE_PDTB_DIR")) {
    const auto t = top_level_target();
    const std::set<std::string> allowed(t.labels.begin(), t.labels.end());
    const auto err = check_stats(load_pdtb(real, 1, allowed), t, true);
    parts.push_back(std::string("real export ") + (err.empty() ? "matches totals" : "[" + err + "]"));
    ok = ok && err.empty();
  } else {
    parts.push_back("real export not checked (PLSE_PDTB_DIR unset)");
  }
  return {ok, join(parts, ", ")};
}

// ---------------------------------------------------------------------------
// 2 and 4: synthetic pipelines

PipelineData synthetic_pipeline_data(const SynthCorpus& c, const Config& cfg) {
  PipelineData d;
  const auto [tr, va] = split_train_valid(c.explicit_pairs, 1.0 - cfg.get_double("pretrain.valid_ratio", 0.025), cfg.get_uint("data.seed", 1));
  d.explicit_train = tr;
  d.explicit_valid = va;
  d.train = expand_multi_sense(c.implicit_train);
  d.valid = c.implicit_valid;
  d.test = c.implicit_test;
  d.verbalizer = c.verbalizer;
  d.vocab = pipeline_vocab(cfg, d.explicit_train, d.train, d.verbalizer);
  return d;
}

Config load_with_threads(const std::string& rel, int threads) {
  auto cfg = Config::load(source_path(rel));
  cfg.set("threads", std::to_string(threads));
  return cfg;
}

Outcome criterion_end_to_end(int threads) {
  const auto t0 = clock_type::now();
  const auto cfg = load_with_threads("configs/synth_local.cfg", threads);
  const auto data = synthetic_pipeline_data(generate(synth_spec_from(cfg), threads), cfg);
  const auto r = run_pipeline(pipeline_config_from(cfg), data);
  const double s = seconds_since(t0);
  const bool ok = r.test.accuracy >= kEndToEndMinAccuracy && r.test.macro_f1 >= kEndToEndMinMacroF1 && s <= kEndToEndMaxSeconds;
  return {ok, "accuracy " + fmt(r.test.accuracy) + " (>= " + fmt(kEndToEndMinAccuracy, 2) + "), macro-F1 " + fmt(r.test.macro_f1) + " (>= " +
                  fmt(kEndToEndMinMacroF1, 2) + "), " + fmt(s, 1) + " s (<= " + fmt(kEndToEndMaxSeconds, 0) + ")"};
}

Outcome criterion_ablation(int threads) {
  const auto cfg = load_with_threads("configs/synth_long_range.cfg", threads);
  const auto data = synthetic_pipeline_data(generate(synth_spec_from(cfg), threads), cfg);
  const auto rows = ablation_harness(pipeline_config_from(cfg), data, {"full", "-GLSL"}, harness_seeds(cfg));
  std::map<std::string, GroupSummary> by;
  for (const auto& g : summarize(rows)) by[g.group] = g;
  const auto& full = by.at("full");
  const auto& nog = by.at("-GLSL");
  const double gain = full.acc_mean - nog.acc_mean;
  return {gain >= kAblationMinGain, "full " + fmt(100 * full.acc_mean, 2) + " +- " + fmt(100 * full.acc_std, 2) + ", -GLSL " +
                                        fmt(100 * nog.acc_mean, 2) + " +- " + fmt(100 * nog.acc_std, 2) + " over " +
                                        std::to_string(full.n) + " seeds, gain " + fmt(100 * gain, 2) + " points (>= " +
                                        fmt(100 * kAblationMinGain, 1) + ")"};
}

// ---------------------------------------------------------------------------
// 3: JSD estimator calibration

Outcome criterion_jsd() {
  bool ok = true;
  std::vector<std::string> parts;
  for (auto kind : {JsdToyKind::independent, JsdToyKind::coupled}) {
    JsdToyConfig c;
    c.kind = kind;
    const auto r = run_jsd_toy(c);
    const bool pass = std::abs(r.estimate - r.oracle) <= kJsdTolerance && r.seconds <= kJsdMaxSeconds;
    ok = ok && pass;
    parts.push_back(std::string(kind == JsdToyKind::independent ? "independent" : "coupled") + " " + fmt(r.estimate) + " vs " + fmt(r.oracle) +
                    " in " + fmt(r.seconds, 1) + " s");
  }
  return {ok, join(parts, ", ") + " (tol " + fmt(kJsdTolerance, 2) + ", <= " + fmt(kJsdMaxSeconds, 0) + " s each)"};
}

// ---------------------------------------------------------------------------
// 5: gradients

Outcome criterion_gradcheck() {
  const auto t0 = clock_type::now();
  double worst = 0;
  std::string worst_mod;
  for (const auto& m : gradcheck_modules()) {
    const auto r = run_gradcheck(m);
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_mod = m;
    }
  }
  const double s = seconds_since(t0);
  std::ostringstream err;
  err << std::scientific << std::setprecision(2) << worst;
  return {worst < kGradMaxRelErr && s <= kGradMaxSeconds, std::to_string(gradcheck_modules().size()) + " modules, worst " + err.str() + " (" +
                                                              worst_mod + "), " + fmt(s, 1) + " s"};
}

// ---------------------------------------------------------------------------
// 6: masking rates

Outcome criterion_masking() {
  const auto enc = templatize_ids({10, 11, 12, 13, 14, 15, 16, 17}, {20, 21, 22, 23, 24, 25, 26, 27}, 32);
  Rng rng(derive_seed(6, {1}));
  std::size_t masked = 0, selected = 0, eligible = 0;
  for (std::size_t i = 0; i < kMaskTrials; ++i) {
    auto m = apply_connective_mask(enc, TokenId{40}, rng);
    masked += m.cm_masked;
    m = apply_universal_mask(std::move(m), rng, 64);
    selected += m.mlm_positions.size();
    eligible += enc.arg1_span.size() + enc.arg2_span.size();
  }
  const double cm = static_cast<double>(masked) / static_cast<double>(kMaskTrials);
  const double um = static_cast<double>(selected) / static_cast<double>(eligible);
  const double p = UniversalMaskConfig{}.select_p;
  const bool ok = cm >= kConnMaskLow && cm <= kConnMaskHigh && std::abs(um - p) <= kUniversalMaskRelTol * p;
  return {ok, "connective slot masked " + fmt(cm) + " in [" + fmt(kConnMaskLow, 2) + ", " + fmt(kConnMaskHigh, 2) + "], universal rate " +
                  fmt(um) + " vs " + fmt(p, 2) + " +- 10%"};
}

// ---------------------------------------------------------------------------
// 7: metric fixtures

struct ScoreFixture {
  std::string name;
  std::vector<std::string> labels, pred;
  std::vector<std::vector<std::string>> gold;
  double accuracy, macro_f1;
};

std::vector<ScoreFixture> score_fixtures() {
  return {
      // all correct
      {"perfect", {"A", "B"}, {"A", "B", "B"}, {{"A"}, {"B"}, {"B"}}, 1.0, 1.0},
      // confusion [[1,1],[1,0]]: F1(A) = 2/4, F1(B) = 0
      {"off_diagonal", {"A", "B"}, {"A", "B", "A"}, {{"A"}, {"A"}, {"B"}}, 1.0 / 3, 0.25},
      // second instance matches its second gold; confusion [[1,0],[0,1]] plus a miss on C
      {"multi_gold", {"A", "B", "C"}, {"A", "B", "A"}, {{"A"}, {"C", "B"}, {"C"}}, 2.0 / 3, (2.0 / 3 + 1.0 + 0.0) / 3},
      // a label that never occurs still counts in the macro average
      {"absent_label", {"A", "B", "C"}, {"A", "A"}, {{"A"}, {"A"}}, 1.0, 1.0 / 3},
      // nothing right: reference falls back to the first gold
      {"all_wrong", {"A", "B"}, {"B", "A"}, {{"A", "A"}, {"B"}}, 0.0, 0.0},
      // confusion A->A 2, A->B 1, B->B 1, C->C 1: F1 = 4/5, 2/3, 1
      {"mixed", {"A", "B", "C"}, {"A", "A", "B", "B", "C"}, {{"A"}, {"A", "C"}, {"A"}, {"B"}, {"C", "B"}}, 4.0 / 5, (4.0 / 5 + 2.0 / 3 + 1.0) / 3},
  };
}

Outcome criterion_scoring() {
  const auto fx = score_fixtures();
  std::size_t ok = 0;
  std::vector<std::string> bad;
  for (const auto& f : fx) {
    const auto r = score(f.pred, f.gold, f.labels);
    if (std::abs(r.accuracy - f.accuracy) <= kScoreTolerance && std::abs(r.macro_f1 - f.macro_f1) <= kScoreTolerance)
      ++ok;
    else
      bad.push_back(f.name + " acc " + fmt(r.accuracy, 6) + " f1 " + fmt(r.macro_f1, 6));
  }
  return {bad.empty(), std::to_string(ok) + "/" + std::to_string(fx.size()) + " hand-computed fixtures within 1e-12" +
                           (bad.empty() ? "" : " [" + join(bad, "; ") + "]")};
}

// ---------------------------------------------------------------------------
// 8: reproducibility through the CLI

std::string quote(const std::string& s) { return "'" + s + "'"; }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = quote(PLSE_CLI_PATH) + " " + args + " >" + quote(log.string()) + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json outputs_of(const fs::path& dir) { return nlohmann::json::parse(read_file(dir / kManifestName))["outputs"]; }

void write_plain_corpus(const fs::path& dir) {
  fs::create_directories(dir);
  const std::vector<std::string> subj = {"The market", "Our team", "The committee", "Investors", "The company", "The city"};
  const std::vector<std::string> verb = {"raised prices", "missed the deadline", "reported strong sales", "cut its budget", "hired new staff",
                                         "delayed the vote"};
  const std::vector<std::string> conn = {"However", "Because", "Meanwhile", "Therefore", "Instead", "Then"};
  Rng rng(derive_seed(8, {2}));
  for (int f = 0; f < 4; ++f) {
    std::string text;
    for (int d = 0; d < 25; ++d) {
      for (int s = 0; s < 3; ++s) {
        text += subj[uniform_index(rng, subj.size())] + " " + verb[uniform_index(rng, verb.size())] + " last year. ";
        text += conn[uniform_index(rng, conn.size())] + ", " + to_lower(subj[uniform_index(rng, subj.size())]) + " " +
                verb[uniform_index(rng, verb.size())] + " this spring. ";
      }
      text += "\n\n";
    }
    write_file(dir / ("doc" + std::to_string(f) + ".txt"), text);
  }
}

Outcome criterion_reproducibility() {
  const auto dir = scratch_dir("repro");
  const auto log = dir / "log.txt";
  const std::string cfg = " --config " + quote(source_path("configs/toy.cfg"));
  auto p = [&](const std::string& rel) { return quote((dir / rel).string()); };
  write_plain_corpus(dir / "corpus");

  std::vector<std::string> failed;
  auto step = [&](const std::string& name, const std::string& args) {
    const int code = run_cli(args, log);
    if (code != 0) failed.push_back(name + " exited " + std::to_string(code) + ": " + read_file(log).substr(0, 200));
    return code == 0;
  };
  auto same = [&](const std::string& what, const std::string& a, const std::string& b) {
    if (!fs::exists(dir / a / kManifestName) || !fs::exists(dir / b / kManifestName)) return false;
    const auto oa = outputs_of(dir / a), ob = outputs_of(dir / b);
    if (oa.empty() || oa != ob) {
      failed.push_back(what + " outputs differ");
      return false;
    }
    return true;
  };

  std::size_t checks = 0;
  const std::string extract = "extract" + cfg + " --corpus " + p("corpus") + " --lexicon " + quote(source_path("data/connectives.tsv"));
  if (step("extract", extract + " --out " + p("ex1")) && step("extract", extract + " --out " + p("ex2"))) checks += same("extract", "ex1", "ex2");
  if (step("synth", "synth" + cfg + " --out " + p("s1")) && step("synth", "synth" + cfg + " --out " + p("s2"))) checks += same("synth", "s1", "s2");
  step("vocab", "vocab" + cfg + " --data " + p("s1/explicit") + " --implicit " + p("s1/implicit_train.jsonl") + " --verbalizer " +
                    p("s1/verbalizer.json") + " --out " + p("vocab"));
  const std::string pre = "pretrain" + cfg + " --data " + p("s1/explicit") + " --vocab " + p("vocab/vocab.txt");
  if (step("pretrain", pre + " --threads 1 --out " + p("p1")) && step("pretrain", pre + " --threads 1 --out " + p("p2")) &&
      step("pretrain", pre + " --threads 4 --out " + p("p4"))) {
    checks += same("pretrain rerun", "p1", "p2");
    checks += same("pretrain 1 vs 4 threads", "p1", "p4");
  }
  step("tune", "tune" + cfg + " --checkpoint " + p("p1/pretrained.ckpt") + " --train " + p("s1/implicit_train.jsonl") + " --valid " +
                   p("s1/implicit_valid.jsonl") + " --vocab " + p("vocab/vocab.txt") + " --verbalizer " + p("s1/verbalizer.json") + " --out " + p("t"));
  const std::string ev = "eval" + cfg + " --checkpoint " + p("t/tuned.ckpt") + " --test " + p("s1/implicit_test.jsonl") + " --vocab " +
                         p("vocab/vocab.txt");
  if (step("eval", ev + " --out " + p("e1")) && step("eval", ev + " --threads 4 --out " + p("e2"))) checks += same("eval", "e1", "e2");
  fs::remove_all(dir);
  return {failed.empty() && checks == 5, std::to_string(checks) + "/5 output-hash comparisons identical (extract, synth, pretrain rerun, "
                                                                  "pretrain 1 vs 4 threads, eval)" +
                                             (failed.empty() ? "" : " [" + join(failed, "; ") + "]")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Runs the acceptance criteria and prints one PASS/FAIL line per criterion.");
  std::vector<int> only;
  int threads = static_cast<int>(std::max(1u, std::min(4u, std::thread::hardware_concurrency())));
  app.add_option("--only", only, "comma-separated criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--threads", threads, "worker threads for training (results do not depend on it)")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"PDTB statistics", criterion_pdtb_stats},
      {"synthetic end-to-end", [&] { return criterion_end_to_end(threads); }},
      {"JSD calibration", criterion_jsd},
      {"long-range ablation", [&] { return criterion_ablation(threads); }},
      {"gradient check", criterion_gradcheck},
      {"masking rates", criterion_masking},
      {"metric fixtures", criterion_scoring},
      {"reproducibility", criterion_reproducibility},
  };
  std::size_t run = 0, passed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    ++run;
    passed += o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << o.detail << std::endl;
  }
  std::cout << "acceptance: " << passed << "/" << run << " passed" << std::endl;
  return passed == run ? 0 : 1;
}
