// plse: command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

#include "plse/gradcheck.hpp"
#include "plse/harness.hpp"
#include "plse/manifest.hpp"
#include "plse/synthetic.hpp"

namespace fs = std::filesystem;
using namespace plse;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out;
  int threads = 1;
};

void add_common(CLI::App* sub, Common& c, bool config_required, bool out_required) {
  auto* opt = sub->add_option("--config", c.config, "key = value config file");
  if (config_required) opt->required();
  opt->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "override a config key (key=value); repeatable");
  sub->add_option("--seed", c.seed, "master seed (overrides the config's 'seed')");
  auto* o = sub->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  sub->add_option("--threads", c.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
}

/// Config file plus CLI overrides; --seed and --set win over the file.
Config load_config(const Common& c, const CLI::App* sub) {
  Config cfg = c.config.empty() ? Config{} : Config::load(c.config);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(std::string(trim(kv.substr(0, eq))), std::string(trim(kv.substr(eq + 1))));
  }
  if (sub->count("--seed")) cfg.set("seed", std::to_string(c.seed));
  cfg.set("threads", std::to_string(c.threads));
  return cfg;
}

/// Config snapshot stored in artifacts. Thread count is excluded so that
/// outputs do not depend on it.
nlohmann::json snapshot(const Config& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : cfg.values())
    if (k != "threads") j[k] = v;
  return j;
}

/// Flags likely typos: unread keys in a section the command reads from.
/// Keys of other sections are allowed so that one file can serve every
/// command.
void warn_unused(const Config& cfg) {
  auto section = [](const std::string& k) { return k.substr(0, k.find('.')); };
  const auto unused = cfg.unused();
  const std::set<std::string> unread(unused.begin(), unused.end());
  std::set<std::string> read;
  for (const auto& [k, v] : cfg.values())
    if (!unread.count(k)) read.insert(section(k));
  for (const auto& k : unused)
    if (k.find('.') == std::string::npos || read.count(section(k))) log_warn("config key '" + k + "' is not used by this command");
}

std::vector<std::uint64_t> seeds_of(const Config& cfg) { return {cfg.get_uint("seed", 1)}; }

/// Runs a command body under a manifest: written before outputs, completed
/// with output hashes, marked failed if the body throws.
template <class Body>
void with_manifest(const fs::path& out, const std::string& command, const Config& cfg, std::vector<std::uint64_t> seeds,
                   const std::vector<fs::path>& inputs, Body&& body) {
  RunManifest m(out, command, snapshot(cfg), std::move(seeds));
  for (const auto& p : inputs)
    if (!p.empty()) m.add_input(p);
  m.write();
  try {
    body(m);
  } catch (const std::exception& e) {
    m.fail(e.what());
    throw;
  }
  m.finish();
}

Verbalizer load_verbalizer(const std::string& spec) {
  if (fs::exists(spec)) return Verbalizer::from_json(nlohmann::json::parse(read_file(spec)));
  return builtin_verbalizer(parse_scheme(spec));
}

// ---------------------------------------------------------------------------
// Pipeline inputs shared by tune/ablate/fewshot/datascale

struct DataFlags {
  std::string data;        // directory with explicit/, implicit_{train,valid,test}.jsonl, verbalizer.json
  std::string pdtb;        // PDTB CSV export directory (alternative to implicit_*.jsonl)
  int level = 2;
  std::string verbalizer;  // path or builtin scheme name
  std::string vocab;       // existing vocab file (otherwise built in-process)
};

void add_data_flags(CLI::App* sub, DataFlags& d) {
  sub->add_option("--data", d.data, "data directory (explicit/ shards, implicit_*.jsonl, verbalizer.json)")->required();
  sub->add_option("--pdtb", d.pdtb, "PDTB CSV export directory; replaces the implicit_*.jsonl splits");
  sub->add_option("--level", d.level, "PDTB sense level for --pdtb (1 or 2)")->check(CLI::Range(1, 2));
  sub->add_option("--verbalizer", d.verbalizer, "verbalizer JSON file or builtin scheme (pdtb_top4, pdtb_second11, conll14)");
  sub->add_option("--vocab", d.vocab, "vocabulary file; built from the data when omitted");
}

PipelineData load_pipeline_data(const DataFlags& f, const Config& cfg, std::vector<fs::path>& inputs) {
  PipelineData d;
  const fs::path dir(f.data);
  const auto ex = read_shards(dir / "explicit");
  inputs.push_back(dir / "explicit");
  const auto [tr, va] = split_train_valid(ex, 1.0 - cfg.get_double("pretrain.valid_ratio", 0.025), cfg.get_uint("data.seed", 1));
  d.explicit_train = tr;
  d.explicit_valid = va;
  if (!f.pdtb.empty()) {
    const auto v = f.verbalizer.empty() ? builtin_verbalizer(f.level == 1 ? VerbalizerScheme::pdtb_top4 : VerbalizerScheme::pdtb_second11)
                                        : load_verbalizer(f.verbalizer);
    const std::set<std::string> allowed(v.labels().begin(), v.labels().end());
    const auto ds = load_pdtb(f.pdtb, f.level, allowed);
    d.train = ds.train;
    d.valid = ds.dev;
    d.test = ds.test;
    d.verbalizer = v;
    inputs.push_back(f.pdtb);
  } else {
    d.train = expand_multi_sense(read_labeled_jsonl(dir / "implicit_train.jsonl"));
    d.valid = read_labeled_jsonl(dir / "implicit_valid.jsonl");
    d.test = read_labeled_jsonl(dir / "implicit_test.jsonl");
    d.verbalizer = load_verbalizer(f.verbalizer.empty() ? (dir / "verbalizer.json").string() : f.verbalizer);
    for (const char* n : {"implicit_train.jsonl", "implicit_valid.jsonl", "implicit_test.jsonl"}) inputs.push_back(dir / n);
  }
  if (!f.vocab.empty()) {
    d.vocab = Vocab::load(f.vocab);
    inputs.push_back(f.vocab);
  } else {
    d.vocab = pipeline_vocab(cfg, d.explicit_train, d.train, d.verbalizer);
  }
  return d;
}

ProgressFn progress_printer() {
  return [](const RunRow& r, const PipelineResult& res) {
    std::cout << r.group << " seed=" << r.seed << " acc=" << fmt(r.accuracy) << " f1=" << fmt(r.macro_f1) << " pretrain_s=" << fmt(res.pretrain_seconds, 1)
              << " tune_s=" << fmt(res.tune_seconds, 1) << std::endl;
  };
}

void write_run_reports(const fs::path& out, const std::string& stem, const std::string& group, const std::vector<RunRow>& rows, bool curve) {
  write_file(out / (stem + ".csv"), runs_csv(group, rows));
  const auto s = summarize(rows);
  write_file(out / (stem + "_summary.csv"), summary_csv(group, s));
  write_file(out / (stem + ".md"), summary_markdown(group, s));
  if (curve) write_file(out / (stem + ".svg"), curve_svg(stem, group, s));
  std::cout << summary_markdown(group, s);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_extract(const Common& c, const CLI::App* sub, const std::string& corpus, const std::string& lexicon) {
  auto cfg = load_config(c, sub);
  ExtractionRules rules;
  rules.min_arg_tokens = cfg.get_uint("extract.min_arg_tokens", rules.min_arg_tokens);
  rules.max_arg_tokens = cfg.get_uint("extract.max_arg_tokens", rules.max_arg_tokens);
  rules.inter = cfg.get_bool("extract.inter", rules.inter);
  rules.intra = cfg.get_bool("extract.intra", rules.intra);
  if (cfg.has("extract.per_connective_cap")) rules.per_connective_cap = cfg.get_uint("extract.per_connective_cap", 0);
  rules.shard_size = cfg.get_uint("extract.shard_size", rules.shard_size);
  rules.threads = c.threads;
  const auto seed = cfg.get_uint("seed", 1);
  cfg.get("threads", "");
  warn_unused(cfg);
  const auto lex = load_lexicon(lexicon);
  with_manifest(c.out, "extract", cfg, {seed}, {corpus, lexicon}, [&](RunManifest& m) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = run_extraction(corpus, lex, rules, c.out, seed);
    m.set_timing("extract_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    m.extra() = {{"instances", rep.instances_emitted}, {"rejected", rep.rejected_counts}};
    std::cout << "files " << rep.files_seen << ", documents " << rep.documents_seen << ", instances " << rep.instances_emitted << "\n";
    for (const auto& [k, n] : rep.rejected_counts) std::cout << "  rejected " << k << ": " << n << "\n";
  });
}

void cmd_synth(const Common& c, const CLI::App* sub) {
  auto cfg = load_config(c, sub);
  const auto spec = synth_spec_from(cfg);
  const auto shard = cfg.get_uint("synth.shard_size", 100000);
  cfg.get("threads", "");
  warn_unused(cfg);
  with_manifest(c.out, "synth", cfg, {spec.seed}, {}, [&](RunManifest&) {
    const auto corpus = generate(spec, c.threads);
    write_synthetic(corpus, c.out, shard);
    std::cout << "explicit " << corpus.explicit_pairs.size() << ", implicit train/valid/test " << corpus.implicit_train.size() << "/"
              << corpus.implicit_valid.size() << "/" << corpus.implicit_test.size() << "\n";
  });
}

void cmd_vocab(const Common& c, const CLI::App* sub, const std::string& data, const std::vector<std::string>& extra_jsonl,
               const std::string& verbalizer, const std::string& lexicon) {
  auto cfg = load_config(c, sub);
  const auto min_freq = cfg.get_uint("vocab.min_freq", 1);
  const auto max_size = cfg.get_uint("vocab.max_size", 30000);
  cfg.get("threads", "");
  warn_unused(cfg);
  std::vector<fs::path> inputs = {data};
  for (const auto& p : extra_jsonl) inputs.push_back(p);
  if (!verbalizer.empty() && fs::exists(verbalizer)) inputs.push_back(verbalizer);
  if (!lexicon.empty()) inputs.push_back(lexicon);
  with_manifest(c.out, "vocab", cfg, seeds_of(cfg), inputs, [&](RunManifest&) {
    const auto ex = read_shards(data);
    std::vector<std::string> texts;
    std::set<std::string> forced;
    for (const auto& x : ex) {
      texts.push_back(x.arg1);
      texts.push_back(x.arg2);
      forced.insert(x.connective);
    }
    for (const auto& p : extra_jsonl)
      for (const auto& x : read_labeled_jsonl(p)) {
        texts.push_back(x.arg1);
        texts.push_back(x.arg2);
      }
    if (!verbalizer.empty())
      for (const auto& w : load_verbalizer(verbalizer).answer_words()) forced.insert(w);
    if (!lexicon.empty())
      for (const auto& e : load_lexicon(lexicon).entries()) forced.insert(e.canonical);
    const auto v = build_vocab(texts, min_freq, max_size, forced);
    v.save(fs::path(c.out) / "vocab.txt");
    std::cout << "vocab size " << v.size() << "\n";
  });
}

void cmd_pretrain(const Common& c, const CLI::App* sub, const std::string& data, const std::string& vocab_path, const std::string& resume) {
  auto cfg = load_config(c, sub);
  const auto vocab = Vocab::load(vocab_path);
  const auto ecfg = encoder_config_from(cfg, vocab.size());
  const auto tcfg = train_config_from(cfg, Phase::pretrain);
  const auto heads = cfg.get_uint("mi.heads", 4);
  const auto valid_ratio = cfg.get_double("pretrain.valid_ratio", 0.025);
  const auto data_seed = cfg.get_uint("data.seed", 1);
  const auto save_every = cfg.get_uint("pretrain.checkpoint_every", 0);
  warn_unused(cfg);
  const fs::path out(c.out);
  with_manifest(out, "pretrain", cfg, {tcfg.seed}, {data, vocab_path, resume}, [&](RunManifest& m) {
    const auto ex = read_shards(data);
    const auto [tr_x, va_x] = split_train_valid(ex, 1.0 - valid_ratio, data_seed);
    const auto classes = connective_inventory(tr_x);
    const auto tr = prepare_pretrain(tr_x, vocab, ecfg.max_len, classes);
    const auto va = prepare_pretrain(va_x, vocab, ecfg.max_len, classes);
    if (tr.dropped_long) log_warn(std::to_string(tr.dropped_long) + " training pairs exceed max_len and were dropped");
    TrainState st;
    if (!resume.empty()) {
      st = restore_state(load_checkpoint(resume), true);
      if (!(st.model.enc.cfg == ecfg)) throw Error("--resume: checkpoint encoder config differs from the config file");
    } else {
      st.model = init_model<float>(ecfg, tcfg.switches.glsl, heads, tcfg.switches.mtl != MtlVariant::none ? classes.size() : 0);
    }
    std::string log;
    const auto t0 = std::chrono::steady_clock::now();
    const auto total = pretrain_total_steps(tcfg, tr.size());
    pretrain(
        tcfg, st, tr, va,
        [&](const nlohmann::json& rec) {
          log += rec.dump() + "\n";
          const auto s = rec.at("step").get<std::size_t>();
          if (!rec.at("valid_metric").is_null())
            std::cout << "step " << s << "/" << total << " total=" << fmt(rec.at("total").get<double>()) << " valid_conn_acc="
                      << fmt(rec.at("valid_metric").get<double>()) << std::endl;
          if (save_every && s % save_every == 0) save_checkpoint(out / ("step-" + std::to_string(s) + ".ckpt"), make_checkpoint(st, snapshot(cfg), true, true));
        },
        out);
    m.set_timing("pretrain_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_file(out / "metrics.jsonl", log);
    save_checkpoint(out / "pretrained.ckpt", make_checkpoint(st, snapshot(cfg), true, true));
    m.extra() = {{"steps", st.step}, {"dropped_long", tr.dropped_long}};
  });
}

void cmd_tune(const Common& c, const CLI::App* sub, const std::string& checkpoint, const std::string& train_p, const std::string& valid_p,
              const std::string& vocab_path, const std::string& verb_spec) {
  auto cfg = load_config(c, sub);
  const auto vocab = Vocab::load(vocab_path);
  auto tcfg = train_config_from(cfg, Phase::tune);
  std::optional<EncoderConfig> fresh;
  if (checkpoint.empty()) fresh = encoder_config_from(cfg, vocab.size());
  warn_unused(cfg);
  const fs::path out(c.out);
  with_manifest(out, "tune", cfg, {tcfg.seed}, {checkpoint, train_p, valid_p, vocab_path}, [&](RunManifest& m) {
    auto verb = load_verbalizer(verb_spec);
    verb.bind(vocab);
    TrainState st;
    if (fresh) {
      st.model = init_model<float>(*fresh, false, 1, 0);
    } else {
      st.model = restore_state(load_checkpoint(checkpoint), false).model;
      if (st.model.enc.cfg.vocab_size != vocab.size()) throw Error("checkpoint vocabulary size differs from --vocab");
    }
    const auto L = st.model.enc.cfg.max_len;
    const auto tr = prepare_labeled(expand_multi_sense(read_labeled_jsonl(train_p)), vocab, L, verb);
    const auto va = prepare_labeled(read_labeled_jsonl(valid_p), vocab, L, verb);
    ModelParams<float> best = st.model;
    std::string log;
    const auto t0 = std::chrono::steady_clock::now();
    tune(
        tcfg, st, tr, va, verb, best,
        [&](const nlohmann::json& rec) {
          log += rec.dump() + "\n";
          if (!rec.at("valid_metric").is_null())
            std::cout << "step " << rec.at("step") << " valid_" << tcfg.select_metric << "=" << fmt(rec.at("valid_metric").get<double>()) << std::endl;
        },
        out);
    m.set_timing("tune_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_file(out / "metrics.jsonl", log);
    TrainState bs;
    bs.model = best;
    bs.step = st.step;
    bs.history = st.history;
    bs.best_metric = st.best_metric;
    auto snap = snapshot(cfg);
    snap["verbalizer"] = verb.to_json();
    save_checkpoint(out / "tuned.ckpt", make_checkpoint(bs, snap, false, false));
    write_file(out / "verbalizer.json", verb.to_json().dump(1) + "\n");
  });
}

void cmd_eval(const Common& c, const CLI::App* sub, const std::string& checkpoint, const std::string& test_p, const std::string& vocab_path,
              const std::string& verb_spec) {
  auto cfg = load_config(c, sub);
  cfg.get("threads", "");
  warn_unused(cfg);
  const fs::path out(c.out);
  with_manifest(out, "eval", cfg, seeds_of(cfg), {checkpoint, test_p, vocab_path}, [&](RunManifest&) {
    const auto vocab = Vocab::load(vocab_path);
    const auto ck = load_checkpoint(checkpoint);
    auto verb = verb_spec.empty() ? Verbalizer::from_json(ck.manifest.at("config").at("verbalizer")) : load_verbalizer(verb_spec);
    verb.bind(vocab);
    const auto model = restore_state(ck, false).model;
    const auto xs = read_labeled_jsonl(test_p);
    const auto data = prepare_labeled(xs, vocab, model.enc.cfg.max_len, verb);
    const auto res = evaluate(model, data, verb, c.threads);
    write_file(out / "report.json", res.report.to_json().dump(2) + "\n");
    std::string preds;
    for (std::size_t i = 0; i < xs.size(); ++i)
      preds += nlohmann::json{{"source_id", xs[i].source_id}, {"pred", res.predictions[i]}, {"gold", xs[i].gold_labels}, {"dist", res.distributions[i]}}
                   .dump() +
               "\n";
    write_file(out / "predictions.jsonl", preds);
    std::cout << "accuracy " << fmt(res.report.accuracy) << "  macro-F1 " << fmt(res.report.macro_f1) << "  (n=" << res.report.n_instances << ")\n";
  });
}

template <class Harness>
void cmd_harness(const Common& c, const CLI::App* sub, const DataFlags& df, const std::string& name, Harness&& run) {
  auto cfg = load_config(c, sub);
  const auto base = pipeline_config_from(cfg);
  const auto seeds = harness_seeds(cfg);
  std::vector<fs::path> inputs;
  const auto data = load_pipeline_data(df, cfg, inputs);
  auto w = [&](RunManifest& m) {
    const auto t0 = std::chrono::steady_clock::now();
    run(cfg, base, data, seeds, m);
    m.set_timing(name + "_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  // keys read inside the harness body are consumed before the warning
  with_manifest(c.out, name, cfg, seeds, inputs, w);
  warn_unused(cfg);
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& p : split_on(s, ',')) out.push_back(std::stod(std::string(trim(p))));
  return out;
}

int cmd_gradcheck(const Common& c, const CLI::App* sub, const std::string& module, double eps, double tol) {
  auto cfg = load_config(c, sub);
  GradCheckOptions opt;
  opt.eps = eps;
  opt.seed = cfg.get_uint("seed", opt.seed);
  cfg.get("threads", "");
  warn_unused(cfg);
  const auto mods = module == "all" ? gradcheck_modules() : std::vector<std::string>{module};
  bool ok = true;
  nlohmann::json j = nlohmann::json::array();
  auto body = [&](RunManifest*) {
    for (const auto& mod : mods) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = run_gradcheck(mod, opt);
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const bool pass = r.max_rel_err < tol;
      ok = ok && pass;
      std::cout << std::left << std::setw(14) << mod << " max_rel_err " << std::scientific << std::setprecision(3) << r.max_rel_err << std::defaultfloat
                << "  (" << r.probes << " probes, worst " << r.worst << ", " << fmt(s, 2) << "s) " << (pass ? "ok" : "FAIL") << "\n";
      j.push_back({{"module", mod}, {"max_rel_err", r.max_rel_err}, {"worst", r.worst}, {"probes", r.probes}, {"pass", pass}});
    }
  };
  if (c.out.empty()) {
    body(nullptr);
  } else {
    with_manifest(c.out, "gradcheck", cfg, {opt.seed}, {}, [&](RunManifest& m) {
      body(&m);
      write_file(fs::path(c.out) / "gradcheck.json", j.dump(2) + "\n");
    });
  }
  return ok ? 0 : 2;
}

void cmd_report(const Common& c, const CLI::App* sub, const std::vector<std::string>& inputs) {
  auto cfg = load_config(c, sub);
  cfg.get("threads", "");
  warn_unused(cfg);
  std::vector<fs::path> in(inputs.begin(), inputs.end());
  with_manifest(c.out, "report", cfg, seeds_of(cfg), in, [&](RunManifest&) {
    std::string index;
    for (const auto& p : in) {
      const auto [group, rows] = parse_runs_csv(read_file(p), p.string());
      const auto s = summarize(rows);
      const auto stem = p.stem().string();
      const auto md = summary_markdown(group, s);
      write_file(fs::path(c.out) / (stem + ".md"), md);
      write_file(fs::path(c.out) / (stem + "_summary.csv"), summary_csv(group, s));
      index += "## " + stem + "\n\n" + md + "\n";
      if (group != "variant") {
        write_file(fs::path(c.out) / (stem + ".svg"), curve_svg(stem, group, s));
        index += "![" + stem + "](" + stem + ".svg)\n\n";
      }
    }
    write_file(fs::path(c.out) / "report.md", index);
    std::cout << index;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plse: prompt-based logical semantics enhancement for implicit discourse relations"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for every subcommand");
  Common c;

  auto* extract = app.add_subcommand("extract", "mine explicit connective pairs from a plain-text corpus");
  add_common(extract, c, false, true);
  std::string corpus, lexicon;
  extract->add_option("--corpus", corpus, "corpus directory (UTF-8 text files)")->required()->check(CLI::ExistingDirectory);
  extract->add_option("--lexicon", lexicon, "connective lexicon TSV")->required()->check(CLI::ExistingFile);

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus with known ground truth");
  add_common(synth, c, false, true);

  auto* vocab = app.add_subcommand("vocab", "build a vocabulary from explicit shards");
  add_common(vocab, c, false, true);
  std::string v_data, v_verb, v_lex;
  std::vector<std::string> v_extra;
  vocab->add_option("--data", v_data, "explicit shard directory")->required()->check(CLI::ExistingDirectory);
  vocab->add_option("--implicit", v_extra, "implicit JSONL files whose text is also counted");
  vocab->add_option("--verbalizer", v_verb, "force the verbalizer's answer words (JSON file or builtin scheme)");
  vocab->add_option("--lexicon", v_lex, "force every canonical connective of a lexicon");

  auto* pre = app.add_subcommand("pretrain", "pre-train the encoder on explicit pairs");
  add_common(pre, c, true, true);
  std::string p_data, p_vocab, p_resume;
  pre->add_option("--data", p_data, "explicit shard directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--vocab", p_vocab, "vocabulary file")->required()->check(CLI::ExistingFile);
  pre->add_option("--resume", p_resume, "resume from a checkpoint written by pretrain")->check(CLI::ExistingFile);

  auto* tun = app.add_subcommand("tune", "prompt-tune on labeled implicit pairs");
  add_common(tun, c, true, true);
  std::string t_ck, t_train, t_valid, t_vocab, t_verb;
  tun->add_option("--checkpoint", t_ck, "pre-trained checkpoint (fresh encoder when omitted)")->check(CLI::ExistingFile);
  tun->add_option("--train", t_train, "training JSONL")->required()->check(CLI::ExistingFile);
  tun->add_option("--valid", t_valid, "validation JSONL")->required()->check(CLI::ExistingFile);
  tun->add_option("--vocab", t_vocab, "vocabulary file")->required()->check(CLI::ExistingFile);
  tun->add_option("--verbalizer", t_verb, "verbalizer JSON file or builtin scheme")->required();

  auto* ev = app.add_subcommand("eval", "score a tuned checkpoint");
  add_common(ev, c, false, true);
  std::string e_ck, e_test, e_vocab, e_verb;
  ev->add_option("--checkpoint", e_ck, "tuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--test", e_test, "test JSONL")->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", e_vocab, "vocabulary file")->required()->check(CLI::ExistingFile);
  ev->add_option("--verbalizer", e_verb, "verbalizer (defaults to the one stored in the checkpoint)");

  auto* abl = app.add_subcommand("ablate", "loss ablations over seeds");
  add_common(abl, c, true, true);
  DataFlags a_df;
  add_data_flags(abl, a_df);
  std::vector<std::string> variants = ablation_variants();
  abl->add_option("--variants", variants, "variants to run")->delimiter(',');

  auto* few = app.add_subcommand("fewshot", "few-shot tuning fractions over seeds");
  add_common(few, c, true, true);
  DataFlags f_df;
  add_data_flags(few, f_df);
  std::string fractions = "0.1,0.2,0.5,1";
  few->add_option("--fractions", fractions, "comma-separated training fractions");

  auto* ds = app.add_subcommand("datascale", "pre-training data scale over seeds");
  add_common(ds, c, true, true);
  DataFlags d_df;
  add_data_flags(ds, d_df);
  std::string scales;
  ds->add_option("--scales", scales, "comma-separated explicit pair counts, ascending")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gc, c, false, false);
  std::string module = "all";
  double eps = 1e-3, tol = 1e-4;
  gc->add_option("--module", module, "module name or 'all'");
  gc->add_option("--eps", eps, "central-difference step");
  gc->add_option("--tol", tol, "maximum allowed relative error");

  auto* rep = app.add_subcommand("report", "render harness CSVs as markdown and SVG");
  add_common(rep, c, false, true);
  std::vector<std::string> rep_in;
  rep->add_option("inputs", rep_in, "harness CSV files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 1;
  }

  try {
    if (*extract) cmd_extract(c, extract, corpus, lexicon);
    if (*synth) cmd_synth(c, synth);
    if (*vocab) cmd_vocab(c, vocab, v_data, v_extra, v_verb, v_lex);
    if (*pre) cmd_pretrain(c, pre, p_data, p_vocab, p_resume);
    if (*tun) cmd_tune(c, tun, t_ck, t_train, t_valid, t_vocab, t_verb);
    if (*ev) cmd_eval(c, ev, e_ck, e_test, e_vocab, e_verb);
    if (*abl)
      cmd_harness(c, abl, a_df, "ablate", [&](const Config&, const PipelineConfig& base, const PipelineData& data, const std::vector<std::uint64_t>& seeds, RunManifest&) {
        for (const auto& v : variants) variant_switches(v);
        write_run_reports(c.out, "ablation", "variant", ablation_harness(base, data, variants, seeds, progress_printer()), false);
      });
    if (*few)
      cmd_harness(c, few, f_df, "fewshot", [&](const Config&, const PipelineConfig& base, const PipelineData& data, const std::vector<std::uint64_t>& seeds, RunManifest&) {
        write_run_reports(c.out, "fewshot", "fraction", few_shot_harness(base, data, parse_doubles(fractions), seeds, progress_printer()), true);
      });
    if (*ds)
      cmd_harness(c, ds, d_df, "datascale", [&](const Config& cfg, const PipelineConfig& base, const PipelineData& data, const std::vector<std::uint64_t>& seeds, RunManifest&) {
        std::vector<std::size_t> ns;
        for (double x : parse_doubles(scales)) ns.push_back(static_cast<std::size_t>(x));
        write_run_reports(c.out, "datascale", "pairs", data_scale_harness(base, data, ns, seeds, cfg.get_uint("data.seed", 1), progress_printer()), true);
      });
    if (*gc) return cmd_gradcheck(c, gc, module, eps, tol);
    if (*rep) cmd_report(c, rep, rep_in);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
