#include <gtest/gtest.h>

#include <sys/wait.h>

#include "plse/harness.hpp"
#include "plse/manifest.hpp"
#include "test_util.hpp"

using namespace plse;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = quote(PLSE_CLI_PATH) + " " + args + " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

std::string toy_cfg() { return std::string(PLSE_SOURCE_DIR) + "/configs/toy.cfg"; }

nlohmann::json manifest_of(const fs::path& dir) { return nlohmann::json::parse(read_file(dir / kManifestName)); }

class Cli : public ::testing::Test {
 protected:
  fs::path dir = make_temp_dir("cli");
  RunResult run(const std::string& args) { return run_cli(args, dir); }
  std::string p(const std::string& rel) const { return quote((dir / rel).string()); }
};

}  // namespace

TEST_F(Cli, NoSubcommandIsUsageError) {
  const auto r = run("");
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, PretrainWithoutConfigPrintsUsage) {
  const auto r = run("pretrain --data " + p(".") + " --vocab " + quote(toy_cfg()) + " --out " + p("x"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--config"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownFlagListsValidFlags) {
  const auto r = run("synth --config " + quote(toy_cfg()) + " --out " + p("x") + " --frobnicate 3");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos) << r.err;
  for (const char* f : {"--seed", "--out", "--threads", "--set"}) EXPECT_NE(r.err.find(f), std::string::npos) << f;
}

TEST_F(Cli, HelpDocumentsEveryFlag) {
  for (const char* sub : {"extract", "synth", "vocab", "pretrain", "tune", "eval", "ablate", "fewshot", "datascale", "gradcheck", "report"}) {
    const auto r = run(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    for (const char* f : {"--config", "--seed", "--out"}) EXPECT_NE(r.out.find(f), std::string::npos) << sub << " " << f;
  }
}

TEST_F(Cli, SynthRerunGivesIdenticalHashes) {
  ASSERT_EQ(run("synth --config " + quote(toy_cfg()) + " --seed 7 --out " + p("a")).code, 0);
  ASSERT_EQ(run("synth --config " + quote(toy_cfg()) + " --seed 7 --threads 3 --out " + p("b")).code, 0);
  ASSERT_EQ(run("synth --config " + quote(toy_cfg()) + " --seed 8 --out " + p("c")).code, 0);
  const auto a = manifest_of(dir / "a"), b = manifest_of(dir / "b"), c = manifest_of(dir / "c");
  EXPECT_EQ(a["status"], "ok");
  EXPECT_EQ(a["seeds"], nlohmann::json::array({7}));
  EXPECT_FALSE(a["outputs"].empty());
  EXPECT_EQ(a["outputs"], b["outputs"]);
  EXPECT_NE(a["outputs"], c["outputs"]);
  EXPECT_EQ(a["config"]["seed"], "7");
}

TEST_F(Cli, RuntimeErrorExitsTwoAndMarksManifestFailed) {
  const auto r = run("synth --config " + quote(toy_cfg()) + " --set synth.cue_noise=0.7 --out " + p("bad"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("cue_noise"), std::string::npos) << r.err;
  // the synthetic settings are validated before the manifest is opened
  EXPECT_FALSE(fs::exists(dir / "bad" / kManifestName));
  write_file(dir / "empty_vocab.txt", "");
  const auto v = run("tune --config " + quote(toy_cfg()) + " --train " + p("empty_vocab.txt") + " --valid " + p("empty_vocab.txt") +
                     " --vocab " + p("empty_vocab.txt") + " --verbalizer pdtb_top4 --out " + p("t"));
  EXPECT_EQ(v.code, 2);
}

TEST_F(Cli, GradcheckExitCodes) {
  const auto ok = run("gradcheck --module all --out " + p("gc"));
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  for (const char* m : {"encoder", "mhca", "discriminator", "glsl", "cm", "mlm", "tune"}) EXPECT_NE(ok.out.find(m), std::string::npos) << m;
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  const auto j = nlohmann::json::parse(read_file(dir / "gc" / "gradcheck.json"));
  for (const auto& m : j) EXPECT_LT(m["max_rel_err"].get<double>(), 1e-4) << m["module"];
  const auto strict = run("gradcheck --module mhca --tol 0");
  EXPECT_EQ(strict.code, 2);
  EXPECT_NE(strict.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run("gradcheck --module nonsense").code, 2);
}

TEST_F(Cli, ToyPipelineEndToEnd) {
  const std::string cfg = " --config " + quote(toy_cfg());
  ASSERT_EQ(run("synth" + cfg + " --out " + p("data")).code, 0);
  ASSERT_EQ(run("vocab" + cfg + " --data " + p("data/explicit") + " --implicit " + p("data/implicit_train.jsonl") + " --verbalizer " +
                p("data/verbalizer.json") + " --out " + p("vocab"))
                .code,
            0);
  const std::string pre = "pretrain" + cfg + " --data " + p("data/explicit") + " --vocab " + p("vocab/vocab.txt");
  auto r = run(pre + " --out " + p("pre1"));
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(run(pre + " --threads 4 --out " + p("pre4")).code, 0);
  EXPECT_EQ(sha256_file(dir / "pre1" / "pretrained.ckpt"), sha256_file(dir / "pre4" / "pretrained.ckpt"));
  EXPECT_EQ(read_file(dir / "pre1" / "metrics.jsonl"), read_file(dir / "pre4" / "metrics.jsonl"));

  r = run("tune" + cfg + " --checkpoint " + p("pre1/pretrained.ckpt") + " --train " + p("data/implicit_train.jsonl") + " --valid " +
          p("data/implicit_valid.jsonl") + " --vocab " + p("vocab/vocab.txt") + " --verbalizer " + p("data/verbalizer.json") + " --out " + p("tune"));
  ASSERT_EQ(r.code, 0) << r.err;
  r = run("eval" + cfg + " --checkpoint " + p("tune/tuned.ckpt") + " --test " + p("data/implicit_test.jsonl") + " --vocab " + p("vocab/vocab.txt") +
          " --out " + p("eval"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = nlohmann::json::parse(read_file(dir / "eval" / "report.json"));
  EXPECT_EQ(rep["n_instances"].get<std::size_t>(), 40u);
  EXPECT_GE(rep["accuracy"].get<double>(), 0.0);
  EXPECT_EQ(manifest_of(dir / "eval")["status"], "ok");
  EXPECT_EQ(manifest_of(dir / "pre1")["command"], "pretrain");

  // resume from the final pretraining checkpoint is a no-op run
  r = run(pre + " --resume " + p("pre1/pretrained.ckpt") + " --out " + p("pre_resume"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(read_file(dir / "pre_resume" / "metrics.jsonl").empty());
}

TEST_F(Cli, AblateThenReport) {
  const std::string cfg = " --config " + quote(toy_cfg()) + " --set harness.seeds=1,2";
  ASSERT_EQ(run("synth" + cfg + " --out " + p("data")).code, 0);
  auto r = run("ablate" + cfg + " --data " + p("data") + " --variants full,-GLSL-CM-MLM --out " + p("abl"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto [group, rows] = parse_runs_csv(read_file(dir / "abl" / "ablation.csv"));
  EXPECT_EQ(group, "variant");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[2].group, "-GLSL-CM-MLM");
  write_file(dir / "fewshot.csv", "fraction,seed,accuracy,macro_f1\n0.5,1,0.6,0.5\n1,1,0.8,0.7\n");
  r = run("report " + p("abl/ablation.csv") + " " + p("fewshot.csv") + " --out " + p("rep"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "rep" / "report.md"));
  EXPECT_TRUE(fs::exists(dir / "rep" / "fewshot.svg"));
  EXPECT_FALSE(fs::exists(dir / "rep" / "ablation.svg"));
}

TEST(Config, ParseOverrideAndTypedGetters) {
  auto c = Config::parse("# comment\n a.b = 3 \nflag = yes\nx = 1.5e-3\nx = 2\n\nname = two words\n");
  EXPECT_EQ(c.get_uint("a.b", 0), 3u);
  EXPECT_TRUE(c.get_bool("flag", false));
  EXPECT_DOUBLE_EQ(c.get_double("x", 0), 2.0);
  EXPECT_EQ(c.get("name", ""), "two words");
  EXPECT_EQ(c.get_uint("absent", 17), 17u);
  c.set("x", "9");
  EXPECT_EQ(c.get_uint("x", 0), 9u);
  EXPECT_TRUE(c.unused().empty());
  EXPECT_EQ(Config::parse(c.serialize()).values(), c.values());
}

TEST(Config, ErrorsCarryLineNumbers) {
  EXPECT_THROW_LINE(Config::parse("a = 1\nno equals here\n"), 2u);
  EXPECT_THROW_LINE(Config::parse("a = 1\n\nbad key! = 2\n"), 3u);
  EXPECT_THROW_LINE(Config::parse(" = 2\n"), 1u);
  const auto c = Config::parse("n = -1\nf = 1.5x\nb = maybe\n");
  EXPECT_THROW(c.get_uint("n", 0), Error);
  EXPECT_THROW(c.get_double("f", 0), Error);
  EXPECT_THROW(c.get_bool("b", false), Error);
  EXPECT_THROW(c.require("missing"), Error);
}

TEST(Config, UnusedKeysAreReported) {
  const auto c = Config::parse("used = 1\ntypo = 2\n");
  c.get("used", "");
  EXPECT_EQ(c.unused(), std::vector<std::string>{"typo"});
}

TEST_F(Cli, TypoKeyWarnsAndSetBeatsFile) {
  const auto r = run("synth --config " + quote(toy_cfg()) + " --set synth.n_relatoins=3 --set synth.explicit_n=7 --out " + p("s"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("synth.n_relatoins"), std::string::npos) << r.err;
  EXPECT_EQ(read_shards(dir / "s" / "explicit").size(), 7u);
}
