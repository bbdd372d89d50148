#pragma once

#include <map>
#include <optional>
#include <set>

#include "plse/common.hpp"

namespace plse {

enum class Pattern { inter_sentential, intra_sentential };

inline std::string_view pattern_name(Pattern p) {
  return p == Pattern::inter_sentential ? "inter" : "intra";
}

inline Pattern parse_pattern(std::string_view s) {
  if (s == "inter" || s == "inter_sentential") return Pattern::inter_sentential;
  if (s == "intra" || s == "intra_sentential") return Pattern::intra_sentential;
  throw Error("unknown pattern '" + std::string(s) + "'");
}

struct LexiconEntry {
  std::vector<std::string> surface;  // lowercase words, 1-2 of them
  std::string canonical;
  bool inter = false;
  bool intra = false;

  std::string phrase() const { return join(surface, " "); }
  bool allows(Pattern p) const { return p == Pattern::inter_sentential ? inter : intra; }
};

/// Raised for lexicon lines that are well formed but name a connective the
/// single-token scheme cannot represent (three or more words).
class RejectedEntryError : public ParseError {
 public:
  RejectedEntryError(const std::string& where, std::size_t line, std::string phrase)
      : ParseError(where, line, "rejected connective '" + phrase + "' (more than two words)"),
        phrase_(std::move(phrase)) {}
  const std::string& phrase() const { return phrase_; }

 private:
  std::string phrase_;
};

inline constexpr std::size_t kMaxConnectiveWords = 2;

class ConnectiveLexicon {
 public:
  /// Adds an entry after checking the lexicon invariants.
  void add(LexiconEntry e) {
    if (e.surface.empty() || e.surface.size() > kMaxConnectiveWords)
      throw Error("connective '" + e.phrase() + "' must have 1-2 words");
    for (auto& w : e.surface) w = to_lower(w);
    if (e.canonical.empty() || split_ws(e.canonical).size() != 1 || e.canonical != trim(e.canonical))
      throw Error("canonical token '" + e.canonical + "' must be a single word");
    e.canonical = to_lower(e.canonical);
    const auto key = e.phrase();
    if (index_.count(key)) throw Error("duplicate connective '" + key + "'");
    index_[key] = entries_.size();
    entries_.push_back(std::move(e));
  }

  const std::vector<LexiconEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const LexiconEntry* find(std::string_view phrase) const {
    auto it = index_.find(collapse_ws(to_lower(phrase)));
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  const LexiconEntry* find(const std::vector<std::string>& words) const {
    if (words.empty() || words.size() > kMaxConnectiveWords) return nullptr;
    return find(join(words, " "));
  }

  std::set<std::string> canonical_set() const {
    std::set<std::string> out;
    for (const auto& e : entries_) out.insert(e.canonical);
    return out;
  }

  bool is_canonical(std::string_view tok) const {
    for (const auto& e : entries_)
      if (e.canonical == tok) return true;
    return false;
  }

 private:
  std::vector<LexiconEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parses the tab-separated lexicon format:
///   surface phrase <TAB> canonical token <TAB> flags
/// where flags is a comma list of {inter, intra}. Blank lines and lines
/// starting with '#' are ignored.
inline ConnectiveLexicon parse_lexicon(std::string_view text, const std::string& where = "<lexicon>") {
  ConnectiveLexicon lex;
  std::size_t line_no = 0;
  for (const auto& raw : split_on(text, '\n')) {
    ++line_no;
    std::string_view line = raw;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty() || trim(line).front() == '#') continue;
    const auto cols = split_on(line, '\t');
    if (cols.size() != 3) throw ParseError(where, line_no, "expected 3 tab-separated fields, got " + std::to_string(cols.size()));
    LexiconEntry e;
    e.surface = split_ws(to_lower(cols[0]));
    if (e.surface.empty()) throw ParseError(where, line_no, "empty surface phrase");
    if (e.surface.size() > kMaxConnectiveWords) throw RejectedEntryError(where, line_no, join(e.surface, " "));
    e.canonical = std::string(trim(cols[1]));
    if (e.canonical.empty() || split_ws(e.canonical).size() != 1)
      throw ParseError(where, line_no, "canonical token must be a single word: '" + cols[1] + "'");
    for (const auto& f : split_on(trim(cols[2]), ',')) {
      const auto flag = trim(f);
      if (flag == "inter") e.inter = true;
      else if (flag == "intra") e.intra = true;
      else throw ParseError(where, line_no, "unknown pattern flag '" + std::string(flag) + "'");
    }
    try {
      lex.add(std::move(e));
    } catch (const ParseError&) {
      throw;
    } catch (const Error& err) {
      throw ParseError(where, line_no, err.what());
    }
  }
  return lex;
}

inline ConnectiveLexicon load_lexicon(const std::filesystem::path& path) {
  return parse_lexicon(read_file(path), path.string());
}

}  // namespace plse
