#pragma once

// Synthetic explicit/implicit corpora with a known relation -> connective
// mapping.
//
// Every instance has a latent relation r in [0, K). Tokens come from three
// disjoint pools: filler words, cue words, and connectives (K groups of
// `conns_per_relation`). In local mode relation r owns the cue words
// "cue<r>_<j>"; one closes arg1 and one opens arg2, right next to the slot.
// In long_range mode arg1 opens with "head<a>_<j>" and arg2 closes with
// "tail<b>_<j>", and the slot's neighbourhood is filler only. Two cue codes
// exist. `factorized` (K even, K >= 4) sets a = r / 2 and b = r mod 2, so
// each argument narrows r to a subset but neither determines it.
// `mod_sum` draws a uniformly and sets b = r - a (mod K), so each cue alone
// is independent of r and only their interaction is informative.

#include <json.hpp>

#include "plse/config.hpp"
#include "plse/corpus_extractor.hpp"
#include "plse/datasets.hpp"
#include "plse/verbalizer.hpp"

namespace plse {

enum class CuePlacement { local, long_range };

inline CuePlacement parse_placement(std::string_view s) {
  if (s == "local") return CuePlacement::local;
  if (s == "long_range") return CuePlacement::long_range;
  throw Error("unknown cue placement '" + std::string(s) + "'");
}

inline std::string placement_name(CuePlacement p) { return p == CuePlacement::local ? "local" : "long_range"; }

enum class LongRangeCode { factorized, mod_sum };

inline LongRangeCode parse_long_range_code(std::string_view s) {
  if (s == "factorized") return LongRangeCode::factorized;
  if (s == "mod_sum") return LongRangeCode::mod_sum;
  throw Error("unknown long-range cue code '" + std::string(s) + "'");
}

inline std::string long_range_code_name(LongRangeCode c) { return c == LongRangeCode::factorized ? "factorized" : "mod_sum"; }

struct SynthSpec {
  std::size_t n_relations = 4;
  std::size_t conns_per_relation = 2;
  std::size_t vocab_size = 400;  // filler words
  std::size_t cue_variants = 3;  // cue words per relation (local) or per head/tail class (long_range)
  std::size_t arg_len_min = 5;
  std::size_t arg_len_max = 10;
  CuePlacement placement = CuePlacement::local;
  LongRangeCode long_range_code = LongRangeCode::factorized;
  double cue_noise = 0.0;  // probability the connective comes from another relation
  std::size_t explicit_n = 20000;
  std::size_t implicit_train_n = 2000;
  std::size_t implicit_valid_n = 500;
  std::size_t implicit_test_n = 1000;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_relations < 2) throw Error("synth: need at least 2 relations");
    if (!(cue_noise >= 0.0 && cue_noise < 0.5)) throw Error("synth: cue_noise must be in [0, 0.5)");
    if (conns_per_relation < 1 || cue_variants < 1) throw Error("synth: conns_per_relation and cue_variants must be positive");
    const std::size_t min_len = placement == CuePlacement::long_range ? 3 : 1;
    if (arg_len_min < min_len || arg_len_max < arg_len_min)
      throw Error("synth: argument length range must satisfy " + std::to_string(min_len) + " <= min <= max");
    if (vocab_size < 2 * n_relations) throw Error("synth: vocab too small for disjoint cue and filler pools");
    if (placement == CuePlacement::long_range && long_range_code == LongRangeCode::factorized && (n_relations < 4 || n_relations % 2))
      throw Error("synth: factorized long-range cues need an even number of relations, at least 4");
  }

  /// Number of head and tail cue classes.
  std::size_t head_classes() const {
    if (placement == CuePlacement::local) return n_relations;
    return long_range_code == LongRangeCode::factorized ? n_relations / 2 : n_relations;
  }
  std::size_t tail_classes() const {
    if (placement == CuePlacement::local) return 0;
    return long_range_code == LongRangeCode::factorized ? 2 : n_relations;
  }

  nlohmann::json to_json() const {
    return {{"n_relations", n_relations},     {"conns_per_relation", conns_per_relation},
            {"vocab_size", vocab_size},       {"cue_variants", cue_variants},
            {"arg_len_min", arg_len_min},     {"arg_len_max", arg_len_max},
            {"placement", placement_name(placement)}, {"long_range_code", long_range_code_name(long_range_code)},
            {"cue_noise", cue_noise},
            {"explicit_n", explicit_n},       {"implicit_train_n", implicit_train_n},
            {"implicit_valid_n", implicit_valid_n}, {"implicit_test_n", implicit_test_n},
            {"seed", seed}};
  }
};

inline std::string relation_label(std::size_t r) { return "R" + std::to_string(r); }
inline std::string connective_word(std::size_t r, std::size_t k) { return "conn" + std::to_string(r) + std::string(1, static_cast<char>('a' + k % 26)) + (k >= 26 ? std::to_string(k / 26) : ""); }
inline std::string filler_word(std::size_t i) { return "w" + std::to_string(i); }

struct SynthInstance {
  std::size_t relation = 0;
  std::vector<std::string> arg1, arg2;
  std::string connective;        // as observed in explicit data (after noise)
  std::string clean_connective;  // deterministic function of the relation and cues
};

struct SynthCorpus {
  SynthSpec spec;
  std::vector<ExplicitInstance> explicit_pairs;
  std::vector<LabeledInstance> implicit_train, implicit_valid, implicit_test;
  std::vector<std::size_t> explicit_relations;
  Verbalizer verbalizer;
  nlohmann::json ground_truth;
};

namespace detail {

inline std::vector<std::string> cue_pool(const SynthSpec& s, std::size_t r, bool tail) {
  std::vector<std::string> out;
  const std::string stem = s.placement == CuePlacement::local ? "cue" : (tail ? "tail" : "head");
  for (std::size_t j = 0; j < s.cue_variants; ++j) out.push_back(stem + std::to_string(r) + "_" + std::to_string(j));
  return out;
}

/// Draws one instance; `stream` separates explicit/implicit splits.
inline SynthInstance draw_instance(const SynthSpec& s, std::uint64_t stream, std::size_t index) {
  Rng rng(derive_seed(s.seed, {0x73796eULL, stream, index}));
  const std::size_t K = s.n_relations;
  SynthInstance x;
  x.relation = static_cast<std::size_t>(uniform_index(rng, K));
  auto len = [&] { return s.arg_len_min + static_cast<std::size_t>(uniform_index(rng, s.arg_len_max - s.arg_len_min + 1)); };
  auto filler = [&](std::size_t n) {
    std::vector<std::string> w;
    for (std::size_t i = 0; i < n; ++i) w.push_back(filler_word(static_cast<std::size_t>(uniform_index(rng, s.vocab_size))));
    return w;
  };
  const std::size_t n1 = len(), n2 = len();
  std::size_t variant = 0;
  if (s.placement == CuePlacement::local) {
    x.arg1 = filler(n1 - 1);
    const auto j1 = static_cast<std::size_t>(uniform_index(rng, s.cue_variants));
    const auto j2 = static_cast<std::size_t>(uniform_index(rng, s.cue_variants));
    x.arg1.push_back(cue_pool(s, x.relation, false)[j1]);
    x.arg2 = {cue_pool(s, x.relation, false)[j2]};
    auto rest = filler(n2 - 1);
    x.arg2.insert(x.arg2.end(), rest.begin(), rest.end());
    variant = j1;
  } else {
    std::size_t a = x.relation / 2, b = x.relation % 2;
    if (s.long_range_code == LongRangeCode::mod_sum) {
      a = static_cast<std::size_t>(uniform_index(rng, K));
      b = (x.relation + K - a) % K;
    }
    const auto j1 = static_cast<std::size_t>(uniform_index(rng, s.cue_variants));
    const auto j2 = static_cast<std::size_t>(uniform_index(rng, s.cue_variants));
    x.arg1 = {cue_pool(s, a, false)[j1]};
    auto rest = filler(n1 - 1);
    x.arg1.insert(x.arg1.end(), rest.begin(), rest.end());
    x.arg2 = filler(n2 - 1);
    x.arg2.push_back(cue_pool(s, b, true)[j2]);
    variant = j1;
  }
  x.clean_connective = connective_word(x.relation, variant % s.conns_per_relation);
  x.connective = x.clean_connective;
  if (s.cue_noise > 0 && uniform01(rng) < s.cue_noise) {
    auto other = static_cast<std::size_t>(uniform_index(rng, K - 1));
    if (other >= x.relation) ++other;
    x.connective = connective_word(other, static_cast<std::size_t>(uniform_index(rng, s.conns_per_relation)));
  }
  return x;
}

}  // namespace detail

inline Verbalizer synthetic_verbalizer(const SynthSpec& s) {
  Verbalizer::Table t;
  for (std::size_t r = 0; r < s.n_relations; ++r) {
    std::vector<std::string> words;
    for (std::size_t k = 0; k < s.conns_per_relation; ++k) words.push_back(connective_word(r, k));
    t.emplace_back(relation_label(r), words);
  }
  return Verbalizer(t);
}

/// Lexicon text covering the synthetic connectives (single-word, identity).
inline std::string synthetic_lexicon_text(const SynthSpec& s) {
  std::string out = "# synthetic connectives\n";
  for (std::size_t r = 0; r < s.n_relations; ++r)
    for (std::size_t k = 0; k < s.conns_per_relation; ++k) out += connective_word(r, k) + "\t" + connective_word(r, k) + "\tinter,intra\n";
  return out;
}

inline SynthCorpus generate(const SynthSpec& spec, int threads = 1) {
  spec.validate();
  SynthCorpus c;
  c.spec = spec;
  c.verbalizer = synthetic_verbalizer(spec);

  // cue pools must be pairwise disjoint across relations and from filler
  std::set<std::string> seen;
  for (bool tail : {false, true})
    for (std::size_t r = 0; r < (tail ? spec.tail_classes() : spec.head_classes()); ++r)
      for (const auto& w : detail::cue_pool(spec, r, tail))
        if (!seen.insert(w).second) throw Error("synth: cue word '" + w + "' is shared");

  auto draw_all = [&](std::uint64_t stream, std::size_t n) {
    std::vector<SynthInstance> xs(n);
    parallel_for(n, threads, [&](std::size_t i) { xs[i] = detail::draw_instance(spec, stream, i); });
    return xs;
  };
  const auto ex = draw_all(0, spec.explicit_n);
  for (std::size_t i = 0; i < ex.size(); ++i) {
    ExplicitInstance e;
    e.arg1 = join(ex[i].arg1, " ");
    e.arg2 = join(ex[i].arg2, " ");
    e.connective = ex[i].connective;
    e.pattern = Pattern::inter_sentential;
    e.source_id = "synth";
    e.offset = i;
    c.explicit_pairs.push_back(std::move(e));
    c.explicit_relations.push_back(ex[i].relation);
  }
  auto labeled = [&](std::uint64_t stream, std::size_t n, const char* tag) {
    std::vector<LabeledInstance> out;
    for (const auto& x : draw_all(stream, n)) {
      LabeledInstance l;
      l.arg1 = join(x.arg1, " ");
      l.arg2 = join(x.arg2, " ");
      l.gold_labels = {relation_label(x.relation)};
      l.gold_connectives = {x.clean_connective};
      l.source_id = std::string("synth:") + tag + ":" + std::to_string(out.size());
      out.push_back(std::move(l));
    }
    return out;
  };
  c.implicit_train = labeled(1, spec.implicit_train_n, "train");
  c.implicit_valid = labeled(2, spec.implicit_valid_n, "valid");
  c.implicit_test = labeled(3, spec.implicit_test_n, "test");

  nlohmann::json rel = nlohmann::json::array();
  for (std::size_t r = 0; r < spec.n_relations; ++r) {
    nlohmann::json conns = nlohmann::json::array();
    for (std::size_t k = 0; k < spec.conns_per_relation; ++k) conns.push_back(connective_word(r, k));
    nlohmann::json j = {{"label", relation_label(r)}, {"connectives", conns}};
    if (spec.placement == CuePlacement::local) {
      j["cues"] = detail::cue_pool(spec, r, false);
    } else {
      nlohmann::json pairs = nlohmann::json::array();
      if (spec.long_range_code == LongRangeCode::factorized) {
        pairs.push_back({r / 2, r % 2});
      } else {
        for (std::size_t a = 0; a < spec.n_relations; ++a) pairs.push_back({a, (r + spec.n_relations - a) % spec.n_relations});
      }
      j["head_tail_classes"] = pairs;
    }
    rel.push_back(j);
  }
  c.ground_truth = {{"spec", spec.to_json()},
                    {"relations", rel},
                    {"bayes_implicit_accuracy", 1.0},
                    {"bayes_connective_accuracy", 1.0 - spec.cue_noise}};
  return c;
}

/// Writes explicit shards, implicit JSONL splits, the verbalizer, a
/// lexicon and the ground-truth manifest. Returns written paths (relative).
inline std::vector<std::string> write_synthetic(const SynthCorpus& c, const std::filesystem::path& out, std::size_t shard_size) {
  namespace fs = std::filesystem;
  fs::create_directories(out);
  std::vector<std::string> files;
  nlohmann::json extra = {{"generator", "synthetic"}, {"spec", c.spec.to_json()}};
  for (const auto& f : write_shards(out / "explicit", c.explicit_pairs, shard_size, extra)) files.push_back("explicit/" + f);
  files.push_back("explicit/manifest.json");
  auto put = [&](const std::string& name, const std::string& bytes) {
    write_file(out / name, bytes);
    files.push_back(name);
  };
  put("implicit_train.jsonl", write_labeled_jsonl(c.implicit_train));
  put("implicit_valid.jsonl", write_labeled_jsonl(c.implicit_valid));
  put("implicit_test.jsonl", write_labeled_jsonl(c.implicit_test));
  put("verbalizer.json", c.verbalizer.to_json().dump(1) + "\n");
  put("lexicon.tsv", synthetic_lexicon_text(c.spec));
  nlohmann::json gt = c.ground_truth;
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& f : files) hashes[f] = sha256_file(out / f);
  gt["files"] = hashes;
  put("ground_truth.json", gt.dump(1) + "\n");
  return files;
}

/// Generator settings under "synth." in a config; absent keys keep the defaults.
inline SynthSpec synth_spec_from(const Config& c) {
  SynthSpec s;
  s.n_relations = c.get_uint("synth.n_relations", s.n_relations);
  s.conns_per_relation = c.get_uint("synth.conns_per_relation", s.conns_per_relation);
  s.vocab_size = c.get_uint("synth.vocab_size", s.vocab_size);
  s.cue_variants = c.get_uint("synth.cue_variants", s.cue_variants);
  s.arg_len_min = c.get_uint("synth.arg_len_min", s.arg_len_min);
  s.arg_len_max = c.get_uint("synth.arg_len_max", s.arg_len_max);
  s.placement = parse_placement(c.get("synth.placement", placement_name(s.placement)));
  s.long_range_code = parse_long_range_code(c.get("synth.long_range_code", long_range_code_name(s.long_range_code)));
  s.cue_noise = c.get_double("synth.cue_noise", s.cue_noise);
  s.explicit_n = c.get_uint("synth.explicit_n", s.explicit_n);
  s.implicit_train_n = c.get_uint("synth.implicit_train_n", s.implicit_train_n);
  s.implicit_valid_n = c.get_uint("synth.implicit_valid_n", s.implicit_valid_n);
  s.implicit_test_n = c.get_uint("synth.implicit_test_n", s.implicit_test_n);
  s.seed = c.get_uint("seed", s.seed);
  s.validate();
  return s;
}

}  // namespace plse
