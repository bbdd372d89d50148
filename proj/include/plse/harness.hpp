#pragma once

// End-to-end pipeline (pretrain -> tune -> evaluate) and the experiment
// harnesses built on it: loss ablations, few-shot fractions and
// pre-training data scale. Results are emitted as CSV and rendered to
// markdown tables and SVG line plots.

#include <chrono>
#include <iomanip>

#include "plse/trainer.hpp"

namespace plse {

struct PipelineData {
  std::vector<ExplicitInstance> explicit_train, explicit_valid;
  std::vector<LabeledInstance> train, valid, test;  // train already one row per sense
  Verbalizer verbalizer;
  Vocab vocab;
};

struct PipelineConfig {
  EncoderConfig encoder;  // vocab_size is taken from the data's vocab
  std::size_t mhca_heads = 4;
  TrainConfig pretrain;
  TrainConfig tune;
  bool skip_pretrain = false;
};

struct PipelineResult {
  EvalReport test;
  double valid_metric = 0;
  double pretrain_seconds = 0;
  double tune_seconds = 0;
  std::size_t pretrain_steps = 0;
  nlohmann::json pretrain_log = nlohmann::json::array();
  nlohmann::json tune_log = nlohmann::json::array();
};

/// Model, MI-head and both training phases from one config.
inline PipelineConfig pipeline_config_from(const Config& cfg) {
  PipelineConfig p;
  p.encoder = encoder_config_from(cfg, Vocab::kNumSpecial + 1);
  p.mhca_heads = cfg.get_uint("mi.heads", 4);
  p.pretrain = train_config_from(cfg, Phase::pretrain);
  p.tune = train_config_from(cfg, Phase::tune);
  return p;
}

inline std::vector<std::uint64_t> harness_seeds(const Config& cfg) {
  std::vector<std::uint64_t> out;
  for (const auto& s : split_on(cfg.get("harness.seeds", "1,2,3,4,5"), ',')) out.push_back(std::stoull(std::string(trim(s))));
  return out;
}

/// Vocabulary over explicit and labeled training text; every explicit
/// connective and verbalizer answer word is kept regardless of frequency.
inline Vocab pipeline_vocab(const Config& cfg, const std::vector<ExplicitInstance>& ex, const std::vector<LabeledInstance>& train,
                            const Verbalizer& v) {
  std::vector<std::string> texts;
  std::set<std::string> forced;
  for (const auto& x : ex) {
    texts.push_back(x.arg1);
    texts.push_back(x.arg2);
    forced.insert(x.connective);
  }
  for (const auto& x : train) {
    texts.push_back(x.arg1);
    texts.push_back(x.arg2);
  }
  for (const auto& w : v.answer_words()) forced.insert(w);
  return build_vocab(texts, cfg.get_uint("vocab.min_freq", 1), cfg.get_uint("vocab.max_size", 30000), forced);
}

/// Builds the model for `cfg`, pre-trains it unless every loss term is off
/// (or skip_pretrain), prompt-tunes with best-on-validation selection and
/// scores the selected model on the test split.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineData& data) {
  using clock = std::chrono::steady_clock;
  PipelineResult res;
  EncoderConfig ecfg = cfg.encoder;
  ecfg.vocab_size = data.vocab.size();
  ecfg.validate();
  Verbalizer verb = data.verbalizer;
  verb.bind(data.vocab);

  const auto& sw = cfg.pretrain.switches;
  const auto classes = connective_inventory(data.explicit_train);
  TrainState st;
  st.model = init_model<float>(ecfg, sw.glsl, cfg.mhca_heads, sw.mtl != MtlVariant::none ? classes.size() : 0);
  if (!cfg.skip_pretrain && sw.any()) {
    const auto t0 = clock::now();
    const auto tr = prepare_pretrain(data.explicit_train, data.vocab, ecfg.max_len, classes);
    const auto va = prepare_pretrain(data.explicit_valid, data.vocab, ecfg.max_len, classes);
    pretrain(cfg.pretrain, st, tr, va, [&](const nlohmann::json& j) { res.pretrain_log.push_back(j); });
    res.pretrain_steps = st.step;
    res.pretrain_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  }
  st.model.strip_heads();

  const auto t1 = clock::now();
  const auto tr = prepare_labeled(data.train, data.vocab, ecfg.max_len, verb);
  const auto va = prepare_labeled(data.valid, data.vocab, ecfg.max_len, verb);
  const auto te = prepare_labeled(data.test, data.vocab, ecfg.max_len, verb);
  TrainState ts;
  ts.model = std::move(st.model);
  ModelParams<float> best = ts.model;
  tune(cfg.tune, ts, tr, va, verb, best, [&](const nlohmann::json& j) { res.tune_log.push_back(j); });
  res.valid_metric = ts.best_metric;
  res.test = evaluate(best, te, verb, cfg.tune.threads).report;
  res.tune_seconds = std::chrono::duration<double>(clock::now() - t1).count();
  return res;
}

// ---------------------------------------------------------------------------
// Ablation variants

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"full",        "-GLSL",     "-CM",     "-MLM",    "-GLSL-CM",
                                             "-GLSL-MLM",   "-GLSL-CM-MLM", "MTL_cls", "MTL_mean"};
  return v;
}

/// Loss switches for a named variant. MTL variants replace GLSL with the
/// connective classifier on the CLS or mean representation.
inline LossSwitches variant_switches(const std::string& name) {
  LossSwitches s;
  if (name == "full") return s;
  if (name == "MTL_cls" || name == "MTL_mean") {
    s.glsl = false;
    s.mtl = name == "MTL_cls" ? MtlVariant::cls : MtlVariant::mean;
    return s;
  }
  if (name.empty() || name[0] != '-') throw Error("unknown ablation variant '" + name + "'");
  for (const auto& part : split_on(name.substr(1), '-')) {
    if (part == "GLSL") s.glsl = false;
    else if (part == "CM") s.cm = false;
    else if (part == "MLM") s.mlm = false;
    else throw Error("unknown ablation variant '" + name + "'");
  }
  return s;
}

struct RunRow {
  std::string group;  // variant name, fraction or scale
  std::uint64_t seed = 0;
  double accuracy = 0;
  double macro_f1 = 0;
};

/// Applies a run seed to every seeded component of a pipeline config.
inline PipelineConfig with_seed(PipelineConfig cfg, std::uint64_t seed) {
  cfg.encoder.seed = seed;
  cfg.pretrain.seed = seed;
  cfg.tune.seed = seed;
  return cfg;
}

using ProgressFn = std::function<void(const RunRow&, const PipelineResult&)>;

inline std::vector<RunRow> ablation_harness(const PipelineConfig& base, const PipelineData& data, const std::vector<std::string>& variants,
                                            const std::vector<std::uint64_t>& seeds, const ProgressFn& progress = {}) {
  std::vector<RunRow> rows;
  for (const auto& v : variants) {
    const auto sw = variant_switches(v);
    for (auto seed : seeds) {
      auto cfg = with_seed(base, seed);
      cfg.pretrain.switches = sw;
      const auto r = run_pipeline(cfg, data);
      rows.push_back({v, seed, r.test.accuracy, r.test.macro_f1});
      if (progress) progress(rows.back(), r);
    }
  }
  return rows;
}

/// Stratified subsample by first gold label: round(fraction * n_label)
/// rows per label, chosen by a seeded shuffle, original order preserved.
inline std::vector<LabeledInstance> stratified_subsample(const std::vector<LabeledInstance>& xs, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("fraction must be in (0, 1]");
  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < xs.size(); ++i) by_label[xs[i].gold_labels.front()].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [label, idx] : by_label) {
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    if (k == 0) log_warn("fraction " + std::to_string(fraction) + " leaves label '" + label + "' with no instances");
    Rng rng(derive_seed(seed, {0x6673ULL, std::hash<std::string>{}(label)}));
    auto shuffled = idx;
    shuffle(shuffled, rng);
    keep.insert(keep.end(), shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(keep.begin(), keep.end());
  std::vector<LabeledInstance> out;
  for (auto i : keep) out.push_back(xs[i]);
  return out;
}

inline std::string fraction_label(double f) {
  std::ostringstream os;
  os << f;
  return os.str();
}

inline std::vector<RunRow> few_shot_harness(const PipelineConfig& base, const PipelineData& data, const std::vector<double>& fractions,
                                            const std::vector<std::uint64_t>& seeds, const ProgressFn& progress = {}) {
  std::vector<RunRow> rows;
  for (double f : fractions) {
    for (auto seed : seeds) {
      PipelineData d = data;
      d.train = f >= 1.0 ? data.train : stratified_subsample(data.train, f, seed);
      const auto r = run_pipeline(with_seed(base, seed), d);
      rows.push_back({fraction_label(f), seed, r.test.accuracy, r.test.macro_f1});
      if (progress) progress(rows.back(), r);
    }
  }
  return rows;
}

/// Pre-trains on nested prefixes of a seeded permutation of the explicit
/// pairs, one pipeline run per scale.
inline std::vector<RunRow> data_scale_harness(const PipelineConfig& base, const PipelineData& data, const std::vector<std::size_t>& scales,
                                              const std::vector<std::uint64_t>& seeds, std::uint64_t data_seed, const ProgressFn& progress = {}) {
  if (!std::is_sorted(scales.begin(), scales.end())) throw Error("data scales must be ascending");
  std::vector<std::size_t> order(data.explicit_train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(data_seed, {0x6473ULL}));
  shuffle(order, rng);
  std::vector<RunRow> rows;
  for (auto n : scales) {
    if (n > order.size()) throw Error("data scale " + std::to_string(n) + " exceeds the " + std::to_string(order.size()) + " available pairs");
    PipelineData d = data;
    d.explicit_train.clear();
    for (std::size_t i = 0; i < n; ++i) d.explicit_train.push_back(data.explicit_train[order[i]]);
    for (auto seed : seeds) {
      const auto r = run_pipeline(with_seed(base, seed), d);
      rows.push_back({std::to_string(n), seed, r.test.accuracy, r.test.macro_f1});
      if (progress) progress(rows.back(), r);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline std::string runs_csv(const std::string& group_name, const std::vector<RunRow>& rows) {
  std::string out = group_name + ",seed,accuracy,macro_f1\n";
  for (const auto& r : rows) out += r.group + "," + std::to_string(r.seed) + "," + fmt(r.accuracy, 6) + "," + fmt(r.macro_f1, 6) + "\n";
  return out;
}

inline std::pair<std::string, std::vector<RunRow>> parse_runs_csv(std::string_view text, const std::string& where = "<runs>") {
  const auto rows = parse_csv(text, where);
  if (rows.empty() || rows[0].size() != 4) throw Error(where + ": expected header <group>,seed,accuracy,macro_f1");
  std::vector<RunRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 4) throw ParseError(where, i + 1, "expected 4 fields");
    try {
      out.push_back({rows[i][0], std::stoull(rows[i][1]), std::stod(rows[i][2]), std::stod(rows[i][3])});
    } catch (const std::logic_error&) {
      throw ParseError(where, i + 1, "bad number");
    }
  }
  return {rows[0][0], out};
}

struct GroupSummary {
  std::string group;
  std::size_t n = 0;
  double acc_mean = 0, acc_std = 0, f1_mean = 0, f1_std = 0;
};

/// Mean and sample standard deviation per group, in first-seen order.
inline std::vector<GroupSummary> summarize(const std::vector<RunRow>& rows) {
  std::vector<GroupSummary> out;
  std::map<std::string, std::vector<const RunRow*>> by;
  for (const auto& r : rows) {
    if (!by.count(r.group)) out.push_back({r.group});
    by[r.group].push_back(&r);
  }
  for (auto& g : out) {
    const auto& rs = by[g.group];
    g.n = rs.size();
    for (const auto* r : rs) {
      g.acc_mean += r->accuracy;
      g.f1_mean += r->macro_f1;
    }
    g.acc_mean /= static_cast<double>(g.n);
    g.f1_mean /= static_cast<double>(g.n);
    if (g.n > 1) {
      for (const auto* r : rs) {
        g.acc_std += (r->accuracy - g.acc_mean) * (r->accuracy - g.acc_mean);
        g.f1_std += (r->macro_f1 - g.f1_mean) * (r->macro_f1 - g.f1_mean);
      }
      g.acc_std = std::sqrt(g.acc_std / static_cast<double>(g.n - 1));
      g.f1_std = std::sqrt(g.f1_std / static_cast<double>(g.n - 1));
    }
  }
  return out;
}

inline std::string summary_markdown(const std::string& group_name, const std::vector<GroupSummary>& gs) {
  std::string out = "| " + group_name + " | runs | accuracy (%) | macro-F1 (%) |\n|---|---|---|---|\n";
  for (const auto& g : gs)
    out += "| " + g.group + " | " + std::to_string(g.n) + " | " + fmt(100 * g.acc_mean, 2) + " ± " + fmt(100 * g.acc_std, 2) + " | " +
           fmt(100 * g.f1_mean, 2) + " ± " + fmt(100 * g.f1_std, 2) + " |\n";
  return out;
}

inline std::string summary_csv(const std::string& group_name, const std::vector<GroupSummary>& gs) {
  std::string out = group_name + ",runs,acc_mean,acc_std,f1_mean,f1_std\n";
  for (const auto& g : gs)
    out += g.group + "," + std::to_string(g.n) + "," + fmt(g.acc_mean, 6) + "," + fmt(g.acc_std, 6) + "," + fmt(g.f1_mean, 6) + "," +
           fmt(g.f1_std, 6) + "\n";
  return out;
}

/// Line plot of mean accuracy and macro-F1 against a numeric x axis.
inline std::string curve_svg(const std::string& title, const std::string& x_label, const std::vector<GroupSummary>& gs) {
  const double W = 520, H = 340, L = 60, R = 20, T = 40, B = 50;
  std::vector<double> xs;
  for (const auto& g : gs) xs.push_back(std::stod(g.group));
  const double xmin = xs.empty() ? 0 : *std::min_element(xs.begin(), xs.end());
  const double xmax = xs.empty() ? 1 : *std::max_element(xs.begin(), xs.end());
  auto px = [&](double x) { return xmax > xmin ? L + (x - xmin) / (xmax - xmin) * (W - L - R) : (L + W - R) / 2; };
  auto py = [&](double y) { return T + (1.0 - y) * (H - T - B); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << py(0) << "\" x2=\"" << W - R << "\" y2=\"" << py(0) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << py(0) << "\" x2=\"" << L << "\" y2=\"" << py(1) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y, 2) << "</text>\n";
    s << "<line x1=\"" << L << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y) << "\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < gs.size(); ++i)
    s << "<text x=\"" << px(xs[i]) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << gs[i].group << "</text>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  auto series = [&](auto get, const char* colour, const char* name, double ly) {
    s << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < gs.size(); ++i) s << px(xs[i]) << "," << py(get(gs[i])) << " ";
    s << "\"/>\n";
    for (std::size_t i = 0; i < gs.size(); ++i)
      s << "<circle cx=\"" << px(xs[i]) << "\" cy=\"" << py(get(gs[i])) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    s << "<text x=\"" << W - R - 90 << "\" y=\"" << ly << "\" fill=\"" << colour << "\">" << name << "</text>\n";
  };
  series([](const GroupSummary& g) { return g.acc_mean; }, "#1f77b4", "accuracy", T + 14);
  series([](const GroupSummary& g) { return g.f1_mean; }, "#d62728", "macro-F1", T + 30);
  s << "</svg>\n";
  return s.str();
}

}  // namespace plse
