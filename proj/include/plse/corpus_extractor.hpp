#pragma once

// Mining of explicit-connective argument pairs from raw text.
//
// Two surface patterns are recognised:
//   inter-sentential  "S1. <Conn>[,] S2"   (connective heads the second sentence)
//   intra-sentential  "S1, <conn>[,] S2"   (connective follows a clause comma)
// Matching is case-insensitive and prefers two-word phrases over one-word ones.

#include <json.hpp>

#include <map>
#include <set>
#include <unordered_set>

#include "plse/common.hpp"
#include "plse/lexicon.hpp"

namespace plse {

struct ExplicitInstance {
  std::string arg1;
  std::string arg2;
  std::string connective;  // canonical token
  Pattern pattern = Pattern::inter_sentential;
  std::string source_id;
  std::size_t offset = 0;  // character index of the connective in its file

  bool operator==(const ExplicitInstance&) const = default;
};

struct ExtractionRules {
  std::size_t min_arg_tokens = 3;
  std::size_t max_arg_tokens = 100;
  bool inter = true;
  bool intra = true;
  std::optional<std::size_t> per_connective_cap;
  std::size_t shard_size = 100000;
  int threads = 1;
  std::set<std::string> abbreviations = {
      "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "inc", "corp", "co", "ltd",
      "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
      "gen", "gov", "sen", "rep", "lt", "col", "sgt", "no", "e.g", "i.e", "u.s", "u.k", "a.m", "p.m"};
};

struct ExtractionReport {
  std::size_t files_seen = 0;
  std::size_t documents_seen = 0;
  std::size_t instances_emitted = 0;
  std::map<std::string, std::size_t> per_connective_counts;
  std::map<std::string, std::size_t> rejected_counts;
  std::vector<std::string> shard_files;
};

using RejectTally = std::map<std::string, std::size_t>;

struct SentenceSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive, includes terminal punctuation
};

namespace detail {

inline bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

/// The whitespace-delimited word that ends at position `dot` (exclusive),
/// lowercased, with leading quotes/brackets removed.
inline std::string word_before(std::string_view text, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !std::isspace(static_cast<unsigned char>(text[b - 1]))) --b;
  std::string w = to_lower(text.substr(b, dot - b));
  while (!w.empty() && (w.front() == '"' || w.front() == '(' || w.front() == '\'')) w.erase(w.begin());
  return w;
}

}  // namespace detail

/// Rule-based splitter on [.?!]. A period does not end a sentence after a
/// blocklisted abbreviation, after a single-letter initial, or when the next
/// word starts in lowercase.
inline std::vector<SentenceSpan> split_sentences(std::string_view text, const std::set<std::string>& abbreviations) {
  std::vector<SentenceSpan> out;
  std::size_t start = 0;
  auto skip_ws = [&](std::size_t i) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    return i;
  };
  start = skip_ws(0);
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (c != '.' && c != '?' && c != '!') continue;
    std::size_t end = i + 1;
    while (end < text.size() && (text[end] == '.' || text[end] == '?' || text[end] == '!')) ++end;
    while (end < text.size() && detail::is_closer(text[end])) ++end;
    if (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) continue;
    const std::size_t next = skip_ws(end);
    if (c == '.') {
      const auto w = detail::word_before(text, i);
      if (abbreviations.count(w)) continue;
      if (w.size() == 1 && std::isalpha(static_cast<unsigned char>(w[0]))) continue;
      if (next < text.size() && std::islower(static_cast<unsigned char>(text[next]))) continue;
    }
    if (end > start) out.push_back({start, end});
    start = next;
    i = next == 0 ? 0 : next - 1;
  }
  if (start < text.size()) {
    std::size_t e = text.size();
    while (e > start && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
    if (e > start) out.push_back({start, e});
  }
  return out;
}

namespace detail {

struct ConnectiveMatch {
  const LexiconEntry* entry = nullptr;
  std::size_t length = 0;  // characters consumed, including a trailing comma and spaces
};

/// Reads up to two words starting at `pos` and returns the longest lexicon
/// entry allowed for `pattern`. A word ends at whitespace or a comma.
inline ConnectiveMatch match_connective(std::string_view text, std::size_t pos, const ConnectiveLexicon& lex, Pattern pattern) {
  struct Word {
    std::string lower;
    std::size_t end;
    bool comma_follows;
  };
  std::vector<Word> words;
  std::size_t i = pos;
  for (std::size_t k = 0; k < kMaxConnectiveWords && i < text.size(); ++k) {
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != ',') ++j;
    if (j == i) break;
    const bool comma = j < text.size() && text[j] == ',';
    words.push_back({to_lower(text.substr(i, j - i)), j, comma});
    if (comma) break;
    while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    i = j;
  }
  for (std::size_t n = words.size(); n >= 1; --n) {
    std::vector<std::string> phrase;
    for (std::size_t k = 0; k < n; ++k) phrase.push_back(words[k].lower);
    const auto* e = lex.find(phrase);
    if (!e || !e->allows(pattern)) continue;
    std::size_t end = words[n - 1].end;
    if (end < text.size() && text[end] == ',') ++end;
    if (end < text.size() && !std::isspace(static_cast<unsigned char>(text[end]))) continue;
    while (end < text.size() && std::isspace(static_cast<unsigned char>(text[end]))) ++end;
    return {e, end - pos};
  }
  return {};
}

inline bool arg2_has_connective_prefix(std::string_view arg2, const LexiconEntry& e) {
  auto words = split_ws(to_lower(arg2));
  if (words.size() < e.surface.size()) return false;
  for (std::size_t k = 0; k < e.surface.size(); ++k) {
    auto w = words[k];
    if (!w.empty() && w.back() == ',') w.pop_back();
    if (w != e.surface[k]) return false;
  }
  return true;
}

}  // namespace detail

/// Extracts explicit instances from one document in document order.
/// `base_offset` is added to every offset so that offsets index the
/// enclosing file. Rejections are counted in `tally` when provided.
inline std::vector<ExplicitInstance> extract_from_document(std::string_view doc, const ConnectiveLexicon& lex,
                                                           const ExtractionRules& rules,
                                                           const std::string& source_id = {},
                                                           std::size_t base_offset = 0,
                                                           RejectTally* tally = nullptr) {
  std::vector<ExplicitInstance> out;
  auto reject = [&](const char* why) {
    if (tally) ++(*tally)[why];
  };
  auto accept = [&](std::string arg1, std::string arg2, const LexiconEntry& e, Pattern p, std::size_t off) {
    const auto n1 = split_ws(arg1).size();
    const auto n2 = split_ws(arg2).size();
    if (n1 < rules.min_arg_tokens || n2 < rules.min_arg_tokens) return reject("too_short");
    if (n1 > rules.max_arg_tokens || n2 > rules.max_arg_tokens) return reject("too_long");
    if (detail::arg2_has_connective_prefix(arg2, e)) return reject("connective_prefix");
    out.push_back({std::move(arg1), std::move(arg2), e.canonical, p, source_id, base_offset + off});
  };

  const auto sentences = split_sentences(doc, rules.abbreviations);
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto sent = doc.substr(sentences[s].begin, sentences[s].end - sentences[s].begin);
    if (rules.inter && s > 0) {
      const auto m = detail::match_connective(sent, 0, lex, Pattern::inter_sentential);
      if (m.entry) {
        const auto prev = doc.substr(sentences[s - 1].begin, sentences[s - 1].end - sentences[s - 1].begin);
        accept(collapse_ws(prev), collapse_ws(sent.substr(m.length)), *m.entry, Pattern::inter_sentential,
               sentences[s].begin);
      }
    }
    if (rules.intra) {
      for (std::size_t c = sent.find(','); c != std::string_view::npos; c = sent.find(',', c + 1)) {
        std::size_t p = c + 1;
        if (p >= sent.size() || !std::isspace(static_cast<unsigned char>(sent[p]))) continue;
        while (p < sent.size() && std::isspace(static_cast<unsigned char>(sent[p]))) ++p;
        const auto m = detail::match_connective(sent, p, lex, Pattern::intra_sentential);
        if (!m.entry) continue;
        accept(collapse_ws(sent.substr(0, c)), collapse_ws(sent.substr(p + m.length)), *m.entry,
               Pattern::intra_sentential, sentences[s].begin + p);
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and shards

inline nlohmann::json to_json(const ExplicitInstance& x) {
  return {{"arg1", x.arg1}, {"arg2", x.arg2}, {"conn", x.connective}, {"pattern", std::string(pattern_name(x.pattern))},
          {"source_id", x.source_id}, {"offset", x.offset}};
}

inline ExplicitInstance explicit_from_json(const nlohmann::json& j) {
  ExplicitInstance x;
  x.arg1 = j.at("arg1").get<std::string>();
  x.arg2 = j.at("arg2").get<std::string>();
  x.connective = j.at("conn").get<std::string>();
  x.pattern = parse_pattern(j.at("pattern").get<std::string>());
  x.source_id = j.value("source_id", std::string{});
  x.offset = j.value("offset", std::size_t{0});
  return x;
}

inline std::string shard_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "part-%05zu", i);
  return buf;
}

/// Writes `instances` as line-delimited JSON shards plus manifest.json,
/// which lists every shard with its record count and SHA-256.
inline std::vector<std::string> write_shards(const std::filesystem::path& out_dir, const std::vector<ExplicitInstance>& instances,
                                             std::size_t shard_size, const nlohmann::json& extra_manifest = {}) {
  if (shard_size == 0) throw Error("shard_size must be positive");
  std::filesystem::create_directories(out_dir);
  for (const auto& entry : std::filesystem::directory_iterator(out_dir))
    if (entry.path().filename().string().rfind("part-", 0) == 0) std::filesystem::remove(entry.path());
  nlohmann::json manifest = extra_manifest.is_object() ? extra_manifest : nlohmann::json::object();
  manifest["shards"] = nlohmann::json::array();
  std::vector<std::string> names;
  const std::size_t n_shards = std::max<std::size_t>(1, (instances.size() + shard_size - 1) / shard_size);
  for (std::size_t s = 0; s < n_shards; ++s) {
    std::string body;
    const std::size_t lo = s * shard_size, hi = std::min(instances.size(), lo + shard_size);
    for (std::size_t i = lo; i < hi; ++i) body += to_json(instances[i]).dump() + "\n";
    const auto name = shard_name(s);
    write_file(out_dir / name, body);
    manifest["shards"].push_back({{"file", name}, {"records", hi - lo}, {"sha256", sha256_hex(body)}});
    names.push_back(name);
  }
  write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return names;
}

/// Reads shards listed in `dir/manifest.json` (or every part-* file when no
/// manifest exists), verifying hashes when listed.
inline std::vector<ExplicitInstance> read_shards(const std::filesystem::path& dir) {
  std::vector<std::string> files;
  std::map<std::string, std::string> hashes;
  if (std::filesystem::exists(dir / "manifest.json")) {
    const auto m = nlohmann::json::parse(read_file(dir / "manifest.json"));
    for (const auto& s : m.at("shards")) {
      files.push_back(s.at("file").get<std::string>());
      if (s.contains("sha256")) hashes[files.back()] = s["sha256"].get<std::string>();
    }
  } else {
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      if (entry.path().filename().string().rfind("part-", 0) == 0) files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw Error("no shards in " + dir.string());
  std::vector<ExplicitInstance> out;
  for (const auto& f : files) {
    const auto body = read_file(dir / f);
    if (hashes.count(f) && hashes[f] != sha256_hex(body)) throw Error("shard hash mismatch: " + (dir / f).string());
    std::size_t line_no = 0;
    for (const auto& line : split_on(body, '\n')) {
      ++line_no;
      if (trim(line).empty()) continue;
      try {
        out.push_back(explicit_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError((dir / f).string(), line_no, e.what());
      }
    }
  }
  return out;
}

/// Splits a file into documents at blank lines. Returns (offset, text) pairs.
inline std::vector<std::pair<std::size_t, std::string_view>> split_documents(std::string_view text) {
  std::vector<std::pair<std::size_t, std::string_view>> docs;
  std::size_t doc_start = std::string_view::npos;
  std::size_t pos = 0;
  std::size_t last_content_end = 0;
  while (pos <= text.size()) {
    const std::size_t eol = std::min(text.find('\n', pos), text.size());
    const auto line = text.substr(pos, eol - pos);
    const bool blank = trim(line).empty();
    if (!blank) {
      if (doc_start == std::string_view::npos) doc_start = pos;
      last_content_end = eol;
    } else if (doc_start != std::string_view::npos) {
      docs.emplace_back(doc_start, text.substr(doc_start, last_content_end - doc_start));
      doc_start = std::string_view::npos;
    }
    if (eol == text.size()) break;
    pos = eol + 1;
  }
  if (doc_start != std::string_view::npos) docs.emplace_back(doc_start, text.substr(doc_start, last_content_end - doc_start));
  return docs;
}

inline std::string dedup_key(const ExplicitInstance& x) {
  return sha256_hex(collapse_ws(to_lower(x.arg1)) + '\x1f' + collapse_ws(to_lower(x.arg2)) + '\x1f' + to_lower(x.connective));
}

/// Mines every plain-text file under `corpus_dir`, removes duplicate
/// triples, applies the optional per-connective cap, shuffles with `seed`
/// so that shard prefixes are random samples, and writes shards to `out_dir`.
inline ExtractionReport run_extraction(const std::filesystem::path& corpus_dir, const ConnectiveLexicon& lex,
                                       const ExtractionRules& rules, const std::filesystem::path& out_dir,
                                       std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(corpus_dir)) throw Error("corpus directory not found: " + corpus_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(corpus_dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end(), [&](const fs::path& a, const fs::path& b) {
    return fs::relative(a, corpus_dir).generic_string() < fs::relative(b, corpus_dir).generic_string();
  });

  struct FileResult {
    std::vector<ExplicitInstance> instances;
    RejectTally tally;
    std::size_t documents = 0;
  };
  std::vector<FileResult> results(files.size());
  parallel_for(files.size(), rules.threads, [&](std::size_t i) {
    auto& r = results[i];
    const auto rel = fs::relative(files[i], corpus_dir).generic_string();
    std::string text;
    try {
      text = read_file(files[i]);
    } catch (const Error& e) {
      log_warn(std::string("skipping unreadable file: ") + e.what());
      ++r.tally["unreadable_file"];
      return;
    }
    if (!valid_utf8(text)) {
      log_warn("skipping file with invalid UTF-8: " + rel);
      ++r.tally["unreadable_file"];
      return;
    }
    const auto docs = split_documents(text);
    r.documents = docs.size();
    for (std::size_t d = 0; d < docs.size(); ++d) {
      auto found = extract_from_document(docs[d].second, lex, rules, rel + "#" + std::to_string(d), docs[d].first, &r.tally);
      r.instances.insert(r.instances.end(), std::make_move_iterator(found.begin()), std::make_move_iterator(found.end()));
    }
  });

  ExtractionReport report;
  report.files_seen = files.size();
  std::vector<ExplicitInstance> kept;
  std::unordered_set<std::string> seen;
  std::map<std::string, std::size_t> counts;
  for (auto& r : results) {
    report.documents_seen += r.documents;
    for (const auto& [k, v] : r.tally) report.rejected_counts[k] += v;
    for (auto& x : r.instances) {
      if (!seen.insert(dedup_key(x)).second) {
        ++report.rejected_counts["duplicate"];
        continue;
      }
      if (rules.per_connective_cap && counts[x.connective] >= *rules.per_connective_cap) {
        ++report.rejected_counts["cap"];
        continue;
      }
      ++counts[x.connective];
      kept.push_back(std::move(x));
    }
  }
  Rng rng(derive_seed(seed, {0x65787472ULL}));
  shuffle(kept, rng);
  report.instances_emitted = kept.size();
  report.per_connective_counts = counts;
  nlohmann::json extra = {{"seed", seed},
                          {"instances", kept.size()},
                          {"documents_seen", report.documents_seen},
                          {"files_seen", report.files_seen},
                          {"per_connective_counts", report.per_connective_counts},
                          {"rejected_counts", report.rejected_counts}};
  report.shard_files = write_shards(out_dir, kept, rules.shard_size, extra);
  return report;
}

/// Seeded split into (train, valid); `train_ratio` is the train fraction.
/// Both halves keep the input order.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_train_valid(const std::vector<T>& instances, double train_ratio, std::uint64_t seed) {
  if (instances.empty()) throw Error("split_train_valid: empty input");
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw Error("split_train_valid: ratio must be in (0,1)");
  const std::size_t n = instances.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, {0x73706c6974ULL}));
  shuffle(idx, rng);
  std::vector<char> in_train(n, 0);
  for (std::size_t k = 0; k < n_train; ++k) in_train[idx[k]] = 1;
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? out.first : out.second).push_back(instances[i]);
  if (out.second.empty()) log_warn("split_train_valid: validation split is empty (" + std::to_string(n) + " instances)");
  if (out.first.empty()) log_warn("split_train_valid: training split is empty (" + std::to_string(n) + " instances)");
  return out;
}

}  // namespace plse
