#pragma once

// Word-level tokenizer, vocabulary, the cloze-prompt template and the two
// masking procedures used in pre-training.
//
// Template layout:  [CLS] arg1 [SEP] <slot> arg2 [SEP] [PAD]...

#include <map>
#include <optional>
#include <unordered_map>

#include "plse/common.hpp"
#include "plse/corpus_extractor.hpp"
#include "plse/lexicon.hpp"

namespace plse {

using TokenId = std::int32_t;

/// Lowercases and splits into runs of word characters (alphanumerics,
/// underscore, any non-ASCII byte) and single punctuation characters.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_word = [](unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; };
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) ++j;
      out.push_back(to_lower(text.substr(i, j - i)));
      i = j;
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kMask = 4;
  static constexpr TokenId kNumSpecial = 5;

  Vocab() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(s);
  }

  TokenId add(const std::string& tok) {
    if (auto it = index_.find(tok); it != index_.end()) return it->second;
    if (tok.empty() || split_ws(tok).size() != 1) throw Error("vocab token must be one non-empty word: '" + tok + "'");
    return push(tok);
  }

  std::optional<TokenId> find(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(const std::string& tok) const { return find(tok).value_or(kUnk); }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw Error("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }
  bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::vector<std::string> toks;
    for (auto i : ids) toks.push_back(token(i));
    return join(toks, " ");
  }

  /// `id<TAB>token`, one per line, specials first.
  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) out += std::to_string(i) + "\t" + tokens_[i] + "\n";
    return out;
  }

  static Vocab parse(std::string_view text, const std::string& where = "<vocab>") {
    Vocab v;
    std::size_t line_no = 0;
    for (const auto& raw : split_on(text, '\n')) {
      ++line_no;
      if (raw.empty()) continue;
      const auto cols = split_on(raw, '\t');
      if (cols.size() != 2) throw ParseError(where, line_no, "expected id<TAB>token");
      std::size_t id = 0;
      try {
        id = std::stoul(cols[0]);
      } catch (const std::exception&) {
        throw ParseError(where, line_no, "bad id '" + cols[0] + "'");
      }
      if (id < static_cast<std::size_t>(kNumSpecial)) {
        if (v.tokens_[id] != cols[1]) throw ParseError(where, line_no, "special token mismatch");
        continue;
      }
      if (id != v.tokens_.size()) throw ParseError(where, line_no, "ids must be dense and ascending");
      if (v.contains(cols[1])) throw ParseError(where, line_no, "duplicate token '" + cols[1] + "'");
      v.push(cols[1]);
    }
    return v;
  }

  void save(const std::filesystem::path& p) const { write_file(p, serialize()); }
  static Vocab load(const std::filesystem::path& p) { return parse(read_file(p), p.string()); }

  std::string content_hash() const { return sha256_hex(serialize()); }

 private:
  TokenId push(const std::string& tok) {
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(tok);
    index_[tok] = id;
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Builds a vocabulary from raw texts. Tokens below `min_freq` are dropped
/// (they map to [UNK]); every token in `forced` is included regardless of
/// frequency. `max_size` counts specials and forced tokens.
inline Vocab build_vocab(const std::vector<std::string>& texts, std::size_t min_freq, std::size_t max_size,
                         const std::set<std::string>& forced = {}) {
  std::map<std::string, std::size_t> freq;
  std::size_t total = 0;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t)) {
      ++freq[tok];
      ++total;
    }
  if (total == 0) throw Error("build_vocab: empty corpus");
  std::set<std::string> forced_lower;
  for (const auto& f : forced) forced_lower.insert(to_lower(f));
  if (max_size < static_cast<std::size_t>(Vocab::kNumSpecial) + forced_lower.size())
    throw Error("build_vocab: max_size " + std::to_string(max_size) + " cannot hold " + std::to_string(Vocab::kNumSpecial) +
                " specials plus " + std::to_string(forced_lower.size()) + " forced tokens");
  Vocab v;
  for (const auto& f : forced_lower) v.add(f);
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto& [tok, n] : freq)
    if (n >= min_freq && !forced_lower.count(tok)) ranked.emplace_back(tok, n);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, n] : ranked) {
    if (v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

inline Vocab build_vocab(const std::vector<ExplicitInstance>& shards, std::size_t min_freq, std::size_t max_size,
                         const std::set<std::string>& forced = {}) {
  std::vector<std::string> texts;
  texts.reserve(shards.size() * 2 + 1);
  for (const auto& x : shards) {
    texts.push_back(x.arg1);
    texts.push_back(x.arg2);
    texts.push_back(x.connective);
  }
  return build_vocab(texts, min_freq, max_size, forced);
}

// ---------------------------------------------------------------------------
// Cloze-prompt template

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

struct PromptEncoding {
  std::vector<TokenId> token_ids;
  std::size_t cmask_pos = 0;
  Span arg1_span;
  Span arg2_span;
  std::vector<std::uint8_t> attn_mask;

  std::size_t length() const { return token_ids.size(); }
  bool in_args(std::size_t i) const { return arg1_span.contains(i) || arg2_span.contains(i); }
  bool operator==(const PromptEncoding&) const = default;
};

inline constexpr std::size_t kTemplateOverhead = 4;  // CLS, SEP, slot, SEP
inline constexpr std::size_t kTemplateMinLength = kTemplateOverhead + 2;

/// Lays out token ids as [CLS] a1 [SEP] <slot> a2 [SEP], padding to `pad_to`
/// when it is larger. Over-long inputs are cut from the argument tails in
/// proportion to their lengths; specials and the slot never move.
inline PromptEncoding templatize_ids(std::vector<TokenId> a1, std::vector<TokenId> a2, std::size_t max_len,
                                     std::size_t pad_to = 0) {
  if (a1.empty() || a2.empty()) throw Error("templatize: both arguments must be non-empty");
  if (a1.size() + a2.size() + kTemplateOverhead > max_len) {
    if (max_len < kTemplateMinLength)
      throw Error("templatize: max_len " + std::to_string(max_len) + " leaves an argument with zero tokens");
    const std::size_t budget = max_len - kTemplateOverhead;
    const std::size_t n1 = a1.size(), n2 = a2.size();
    std::size_t k1 = (budget * n1) / (n1 + n2);
    k1 = std::clamp<std::size_t>(k1, 1, budget - 1);
    k1 = std::min(k1, n1);
    std::size_t k2 = std::min(n2, budget - k1);
    k1 = std::min(n1, budget - k2);
    a1.resize(k1);
    a2.resize(k2);
  }
  PromptEncoding enc;
  auto& ids = enc.token_ids;
  ids.push_back(Vocab::kCls);
  enc.arg1_span.begin = ids.size();
  ids.insert(ids.end(), a1.begin(), a1.end());
  enc.arg1_span.end = ids.size();
  ids.push_back(Vocab::kSep);
  enc.cmask_pos = ids.size();
  ids.push_back(Vocab::kMask);
  enc.arg2_span.begin = ids.size();
  ids.insert(ids.end(), a2.begin(), a2.end());
  enc.arg2_span.end = ids.size();
  ids.push_back(Vocab::kSep);
  enc.attn_mask.assign(ids.size(), 1);
  while (ids.size() < pad_to) {
    ids.push_back(Vocab::kPad);
    enc.attn_mask.push_back(0);
  }
  return enc;
}

inline PromptEncoding templatize(std::string_view arg1, std::string_view arg2, const Vocab& vocab, std::size_t max_len,
                                 std::size_t pad_to = 0) {
  return templatize_ids(vocab.encode(arg1), vocab.encode(arg2), max_len, pad_to);
}

/// Untruncated template length for a pair of texts.
inline std::size_t template_length(std::string_view arg1, std::string_view arg2) {
  return tokenize(arg1).size() + tokenize(arg2).size() + kTemplateOverhead;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskedEncoding {
  PromptEncoding base;                 // model input after masking
  std::optional<TokenId> cm_target;    // gold connective at the slot; absent for implicit data
  bool cm_masked = true;               // slot holds [MASK] (else the gold connective)
  std::vector<std::size_t> mlm_positions;
  std::vector<TokenId> mlm_targets;

  bool operator==(const MaskedEncoding&) const = default;
};

inline constexpr double kConnectiveMaskRate = 0.9;

/// Fills the slot with [MASK] with probability `mask_rate`, otherwise with
/// the gold connective. Without a gold connective the slot is always [MASK].
inline MaskedEncoding apply_connective_mask(const PromptEncoding& enc, std::optional<TokenId> gold_conn, Rng& rng,
                                            double mask_rate = kConnectiveMaskRate) {
  MaskedEncoding m;
  m.base = enc;
  m.cm_target = gold_conn;
  if (!gold_conn) {
    m.cm_masked = true;
    m.base.token_ids[enc.cmask_pos] = Vocab::kMask;
    return m;
  }
  m.cm_masked = uniform01(rng) < mask_rate;
  m.base.token_ids[enc.cmask_pos] = m.cm_masked ? Vocab::kMask : *gold_conn;
  return m;
}

struct UniversalMaskConfig {
  double select_p = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;  // remainder keeps the original token
};

/// Samples argument positions at rate `select_p`; each selected position
/// becomes [MASK], a uniformly random non-special token, or is kept.
inline MaskedEncoding apply_universal_mask(MaskedEncoding m, Rng& rng, std::size_t vocab_size,
                                           const UniversalMaskConfig& cfg = {}) {
  if (vocab_size <= static_cast<std::size_t>(Vocab::kNumSpecial)) throw Error("apply_universal_mask: vocabulary has no ordinary tokens");
  m.mlm_positions.clear();
  m.mlm_targets.clear();
  auto& ids = m.base.token_ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!m.base.in_args(i) || !m.base.attn_mask[i]) continue;
    if (!(uniform01(rng) < cfg.select_p)) continue;
    m.mlm_positions.push_back(i);
    m.mlm_targets.push_back(ids[i]);
    const double u = uniform01(rng);
    if (u < cfg.p_mask) {
      ids[i] = Vocab::kMask;
    } else if (u < cfg.p_mask + cfg.p_random) {
      ids[i] = static_cast<TokenId>(Vocab::kNumSpecial +
                                    uniform_index(rng, vocab_size - static_cast<std::size_t>(Vocab::kNumSpecial)));
    }
  }
  return m;
}

inline MaskedEncoding apply_universal_mask(const PromptEncoding& enc, Rng& rng, std::size_t vocab_size,
                                           const UniversalMaskConfig& cfg = {}) {
  MaskedEncoding m;
  m.base = enc;
  return apply_universal_mask(std::move(m), rng, vocab_size, cfg);
}

/// Maps a connective phrase onto its single canonical token.
inline std::optional<std::string> canonicalize_connective(const std::vector<std::string>& words, const ConnectiveLexicon& lex) {
  if (words.empty() || words.size() > kMaxConnectiveWords) return std::nullopt;
  std::vector<std::string> lower;
  for (const auto& w : words) lower.push_back(to_lower(w));
  if (const auto* e = lex.find(lower)) return e->canonical;
  return std::nullopt;
}

inline std::optional<std::string> canonicalize_connective(std::string_view phrase, const ConnectiveLexicon& lex) {
  return canonicalize_connective(split_ws(phrase), lex);
}

}  // namespace plse
