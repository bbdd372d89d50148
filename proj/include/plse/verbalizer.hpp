#pragma once

// Answer-word verbalizers mapping connectives to relation labels, and the
// label distribution obtained from slot logits.

#include <json.hpp>

#include <map>
#include <optional>

#include "plse/tensor.hpp"
#include "plse/text_codec.hpp"

namespace plse {

enum class VerbalizerScheme { pdtb_top4, pdtb_second11, conll14 };

inline VerbalizerScheme parse_scheme(std::string_view s) {
  if (s == "pdtb_top4") return VerbalizerScheme::pdtb_top4;
  if (s == "pdtb_second11") return VerbalizerScheme::pdtb_second11;
  if (s == "conll14") return VerbalizerScheme::conll14;
  throw Error("unknown verbalizer scheme '" + std::string(s) + "'");
}

class Verbalizer {
 public:
  using Table = std::vector<std::pair<std::string, std::vector<std::string>>>;

  Verbalizer() = default;

  /// Labels are stored in lexicographic order; answer sets must be
  /// non-empty and pairwise disjoint.
  explicit Verbalizer(const Table& table) {
    std::map<std::string, std::vector<std::string>> sorted;
    for (const auto& [label, words] : table) {
      if (label.empty()) throw Error("verbalizer: empty label");
      auto& dst = sorted[label];
      for (const auto& w : words) dst.push_back(to_lower(w));
    }
    for (auto& [label, words] : sorted) {
      if (words.empty()) throw Error("verbalizer: label '" + label + "' has no answer words");
      for (const auto& w : words) {
        if (auto it = token_label_.find(w); it != token_label_.end() && it->second != labels_.size())
          throw Error("verbalizer: answer word '" + w + "' maps to two labels");
        token_label_[w] = labels_.size();
      }
      labels_.push_back(label);
      answers_.push_back(words);
    }
    if (labels_.empty()) throw Error("verbalizer: no labels");
  }

  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::string>& answers(std::size_t label) const { return answers_.at(label); }
  std::size_t num_labels() const { return labels_.size(); }

  std::optional<std::size_t> label_index(std::string_view label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i] == label) return i;
    return std::nullopt;
  }

  std::optional<std::string> label_of(std::string_view token) const {
    auto it = token_label_.find(to_lower(token));
    if (it == token_label_.end()) return std::nullopt;
    return labels_[it->second];
  }

  std::vector<std::string> answer_words() const {
    std::vector<std::string> out;
    for (const auto& a : answers_) out.insert(out.end(), a.begin(), a.end());
    return out;
  }

  /// Resolves answer words against a vocabulary; every word must be present.
  void bind(const Vocab& vocab) {
    ids_.assign(labels_.size(), {});
    for (std::size_t l = 0; l < labels_.size(); ++l)
      for (const auto& w : answers_[l]) {
        auto id = vocab.find(w);
        if (!id) throw Error("verbalizer answer word '" + w + "' missing from vocabulary");
        ids_[l].push_back(*id);
      }
  }

  bool bound() const { return !ids_.empty(); }
  const std::vector<TokenId>& answer_ids(std::size_t label) const {
    if (!bound()) throw Error("verbalizer not bound to a vocabulary");
    return ids_.at(label);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t l = 0; l < labels_.size(); ++l) j[labels_[l]] = answers_[l];
    return j;
  }

  static Verbalizer from_json(const nlohmann::json& j) {
    Table t;
    for (auto it = j.begin(); it != j.end(); ++it) t.emplace_back(it.key(), it.value().get<std::vector<std::string>>());
    return Verbalizer(t);
  }

 private:
  std::vector<std::string> labels_;
  std::vector<std::vector<std::string>> answers_;
  std::map<std::string, std::size_t> token_label_;
  std::vector<std::vector<TokenId>> ids_;
};

/// Answer-word tables for the PDTB 2.0 and CoNLL16 label sets.
inline Verbalizer builtin_verbalizer(VerbalizerScheme scheme) {
  const Verbalizer::Table second = {
      {"Comparison.Concession", {"however", "although", "though"}},
      {"Comparison.Contrast", {"but"}},
      {"Contingency.Cause", {"because", "so", "thus", "consequently", "therefore"}},
      {"Contingency.Pragmatic cause", {"as", "since"}},
      {"Expansion.Alternative", {"instead", "rather"}},
      {"Expansion.Conjunction", {"and", "also", "fact", "furthermore"}},
      {"Expansion.Instantiation", {"instance", "example"}},
      {"Expansion.List", {"finally"}},
      {"Expansion.Restatement", {"specifically", "indeed", "particular"}},
      {"Temporal.Asynchronous", {"then", "after", "before"}},
      {"Temporal.Synchrony", {"meanwhile", "when"}},
  };
  switch (scheme) {
    case VerbalizerScheme::pdtb_second11:
      return Verbalizer(second);
    case VerbalizerScheme::pdtb_top4: {
      std::map<std::string, std::vector<std::string>> merged;
      for (const auto& [label, words] : second) {
        auto& dst = merged[label.substr(0, label.find('.'))];
        dst.insert(dst.end(), words.begin(), words.end());
      }
      return Verbalizer(Verbalizer::Table(merged.begin(), merged.end()));
    }
    case VerbalizerScheme::conll14:
      return Verbalizer(Verbalizer::Table{
          {"Comp.Concession", {"although", "however"}},
          {"Comp.Contrast", {"but"}},
          {"Cont.Cause.Reason", {"because"}},
          {"Cont.Cause.Result", {"so", "consequently", "thus", "therefore"}},
          {"Cont.Condition", {"if"}},
          {"Exp.Alternative", {"unless"}},
          {"Exp.Alternative.Chosen alternative", {"instead", "rather"}},
          {"Exp.Conjunction", {"and", "also", "fact", "furthermore"}},
          {"Exp.Exception", {"except"}},
          {"Exp.Instantiation", {"instance", "example"}},
          {"Exp.Restatement", {"particular", "indeed", "specifically"}},
          {"Temp.Asynchronous.Precedence", {"then", "before"}},
          {"Temp.Asynchronous.Succession", {"after"}},
          {"Temp.Synchrony", {"meanwhile", "when"}},
      });
  }
  throw Error("unreachable verbalizer scheme");
}

/// Label probabilities from slot logits: the softmax mass of each label's
/// answer words, renormalised over all answer words. Invariant to adding a
/// constant to the logits.
template <class Row>
std::vector<double> label_distribution(const Row& logits, const Verbalizer& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < v.num_labels(); ++l)
    for (auto id : v.answer_ids(l)) mx = std::max(mx, static_cast<double>(logits(id)));
  std::vector<double> mass(v.num_labels(), 0.0);
  double total = 0;
  for (std::size_t l = 0; l < v.num_labels(); ++l) {
    for (auto id : v.answer_ids(l)) mass[l] += std::exp(static_cast<double>(logits(id)) - mx);
    total += mass[l];
  }
  for (auto& m : mass) m /= total;
  return mass;
}

struct Prediction {
  std::size_t label = 0;
  std::vector<double> distribution;
};

/// Argmax of the label distribution; ties go to the lexicographically first
/// label (labels are stored sorted).
template <class Row>
Prediction predict(const Row& logits, const Verbalizer& v) {
  Prediction p;
  p.distribution = label_distribution(logits, v);
  for (std::size_t l = 1; l < p.distribution.size(); ++l)
    if (p.distribution[l] > p.distribution[p.label]) p.label = l;
  return p;
}

}  // namespace plse
