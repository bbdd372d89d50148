#pragma once

// Labeled implicit-relation data: the JSONL record format used throughout,
// plus loaders for flat PDTB 2.0 (CSV) and CoNLL16 (JSONL) exports.

#include <json.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "plse/common.hpp"

namespace plse {

struct LabeledInstance {
  std::string arg1;
  std::string arg2;
  std::vector<std::string> gold_labels;
  std::vector<std::string> gold_connectives;
  std::string source_id;

  bool operator==(const LabeledInstance&) const = default;
};

inline nlohmann::json to_json(const LabeledInstance& x) {
  nlohmann::json j = {{"arg1", x.arg1}, {"arg2", x.arg2}, {"labels", x.gold_labels}, {"conns", x.gold_connectives}};
  if (!x.source_id.empty()) j["source_id"] = x.source_id;
  return j;
}

inline LabeledInstance labeled_from_json(const nlohmann::json& j) {
  LabeledInstance x;
  x.arg1 = j.at("arg1").get<std::string>();
  x.arg2 = j.at("arg2").get<std::string>();
  x.gold_labels = j.at("labels").get<std::vector<std::string>>();
  if (j.contains("conns")) x.gold_connectives = j.at("conns").get<std::vector<std::string>>();
  if (j.contains("source_id")) x.source_id = j.at("source_id").get<std::string>();
  if (x.gold_labels.empty()) throw Error("labeled instance without labels");
  return x;
}

inline std::string write_labeled_jsonl(const std::vector<LabeledInstance>& xs) {
  std::string out;
  for (const auto& x : xs) {
    out += to_json(x).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<LabeledInstance> read_labeled_jsonl(const std::filesystem::path& p) {
  std::istringstream in(read_file(p));
  std::vector<LabeledInstance> out;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    try {
      out.push_back(labeled_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(p.string(), ln, e.what());
    }
  }
  return out;
}

/// Training rows: a multi-sense instance becomes one row per sense.
inline std::vector<LabeledInstance> expand_multi_sense(const std::vector<LabeledInstance>& xs) {
  std::vector<LabeledInstance> out;
  for (const auto& x : xs)
    for (const auto& l : x.gold_labels) {
      LabeledInstance y = x;
      y.gold_labels = {l};
      out.push_back(std::move(y));
    }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

/// RFC 4180 records: comma separated, double-quoted fields may contain
/// commas, newlines and doubled quotes.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text, const std::string& where = "<csv>") {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"') {
      if (!field.empty()) throw ParseError(where, line, "quote inside unquoted field");
      quoted = any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
      ++line;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw ParseError(where, line, "unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// PDTB 2.0

enum class Split { train, dev, test };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    default: return "test";
  }
}

/// Sections 2-20 train, 0-1 dev, 21-22 test; anything else is unused.
inline std::optional<Split> pdtb_split_of(int section) {
  if (section >= 2 && section <= 20) return Split::train;
  if (section == 0 || section == 1) return Split::dev;
  if (section == 21 || section == 22) return Split::test;
  return std::nullopt;
}

/// Truncates a dotted sense path to `level` components; nullopt when the
/// sense is annotated above that level.
inline std::optional<std::string> sense_at_level(std::string_view sense, int level) {
  auto parts = split_on(trim(sense), '.');
  if (level < 1 || static_cast<int>(parts.size()) < level) return std::nullopt;
  parts.resize(static_cast<std::size_t>(level));
  for (auto& p : parts) p = std::string(trim(p));
  return join(parts, ".");
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  for (auto& part : split_on(s, '|'))
    if (auto t = trim(part); !t.empty()) out.emplace_back(t);
  return out;
}

struct SplitStats {
  std::size_t instances = 0;  // distinct relations
  std::size_t rows = 0;       // after one-row-per-sense expansion (train only)
  std::map<std::string, std::size_t> per_label;  // relations carrying each label
};

struct PdtbDataset {
  int level = 1;
  std::vector<LabeledInstance> train;  // one row per sense
  std::vector<LabeledInstance> dev;    // full gold sets
  std::vector<LabeledInstance> test;
  std::map<std::string, SplitStats> stats;  // keyed by split name
  std::size_t dropped = 0;  // relations with no usable sense at this level
};

/// Reads every *.csv file in `csv_dir` (header: section,arg1,arg2,
/// conn_list,sense_list; lists are '|'-separated). When `allowed` is
/// non-empty, senses outside it are ignored and relations left without a
/// sense are dropped.
inline PdtbDataset load_pdtb(const std::filesystem::path& csv_dir, int level, const std::set<std::string>& allowed = {}) {
  namespace fs = std::filesystem;
  if (level != 1 && level != 2) throw Error("load_pdtb: level must be 1 or 2");
  if (!fs::is_directory(csv_dir)) throw Error("load_pdtb: not a directory: " + csv_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(csv_dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("load_pdtb: no .csv files in " + csv_dir.string());

  PdtbDataset ds;
  ds.level = level;
  std::set<int> seen_sections;
  for (const auto& f : files) {
    const auto rows = parse_csv(read_file(f), f.string());
    if (rows.empty()) continue;
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[to_lower(trim(rows[0][i]))] = i;
    for (const char* need : {"section", "arg1", "arg2", "conn_list", "sense_list"})
      if (!col.count(need)) throw ParseError(f.string(), 1, std::string("missing column '") + need + "'");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      auto get = [&](const char* name) -> const std::string& {
        const std::size_t c = col.at(name);
        if (c >= row.size()) throw ParseError(f.string(), r + 1, "row has too few fields");
        return row[c];
      };
      int section = 0;
      try {
        section = std::stoi(get("section"));
      } catch (const std::logic_error&) {
        throw ParseError(f.string(), r + 1, "bad section '" + get("section") + "'");
      }
      seen_sections.insert(section);
      auto split = pdtb_split_of(section);
      if (!split) continue;
      LabeledInstance x;
      x.arg1 = get("arg1");
      x.arg2 = get("arg2");
      x.gold_connectives = split_list(get("conn_list"));
      x.source_id = "wsj_" + std::to_string(section);
      for (const auto& s : split_list(get("sense_list"))) {
        auto l = sense_at_level(s, level);
        if (!l || (!allowed.empty() && !allowed.count(*l))) continue;
        if (std::find(x.gold_labels.begin(), x.gold_labels.end(), *l) == x.gold_labels.end()) x.gold_labels.push_back(*l);
      }
      if (x.gold_labels.empty()) {
        ++ds.dropped;
        continue;
      }
      auto& st = ds.stats[split_name(*split)];
      ++st.instances;
      for (const auto& l : x.gold_labels) ++st.per_label[l];
      if (*split == Split::train) {
        auto rows_out = expand_multi_sense({x});
        st.rows += rows_out.size();
        ds.train.insert(ds.train.end(), rows_out.begin(), rows_out.end());
      } else {
        st.rows += 1;
        (*split == Split::dev ? ds.dev : ds.test).push_back(std::move(x));
      }
    }
  }
  std::vector<std::string> missing;
  for (int s = 0; s <= 22; ++s)
    if (!seen_sections.count(s)) missing.push_back(std::to_string(s));
  if (!missing.empty()) throw Error("load_pdtb: missing sections " + join(missing, ","));
  return ds;
}

// ---------------------------------------------------------------------------
// CoNLL16

/// Abbreviates the class prefix (Comparison -> Comp, ...) to match the
/// CoNLL verbalizer label names.
inline std::string conll_label(std::string_view sense) {
  static const std::map<std::string, std::string> abbrev = {
      {"Comparison", "Comp"}, {"Contingency", "Cont"}, {"Expansion", "Exp"}, {"Temporal", "Temp"}};
  std::string s(trim(sense));
  const auto dot = s.find('.');
  const std::string head = s.substr(0, dot);
  if (auto it = abbrev.find(head); it != abbrev.end()) s = it->second + (dot == std::string::npos ? "" : s.substr(dot));
  return s;
}

struct ConllSplit {
  std::vector<LabeledInstance> instances;  // one row per sense for "train"
  std::size_t relations = 0;
  std::size_t dropped = 0;
};

/// Reads `<json_dir>/<split>.jsonl`; records carry {arg1, arg2, senses[]}
/// and optionally conns[].
inline ConllSplit load_conll(const std::filesystem::path& json_dir, const std::string& split, const std::set<std::string>& allowed = {}) {
  const auto path = json_dir / (split + ".jsonl");
  if (!std::filesystem::exists(path)) throw Error("load_conll: missing split file " + path.string());
  std::istringstream in(read_file(path));
  ConllSplit out;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (trim(line).empty()) continue;
    LabeledInstance x;
    try {
      const auto j = nlohmann::json::parse(line);
      x.arg1 = j.at("arg1").get<std::string>();
      x.arg2 = j.at("arg2").get<std::string>();
      for (const auto& s : j.at("senses")) {
        const auto l = conll_label(s.get<std::string>());
        if (!allowed.empty() && !allowed.count(l)) continue;
        if (std::find(x.gold_labels.begin(), x.gold_labels.end(), l) == x.gold_labels.end()) x.gold_labels.push_back(l);
      }
      if (j.contains("conns")) x.gold_connectives = j.at("conns").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), ln, e.what());
    }
    x.source_id = split + ":" + std::to_string(ln);
    if (x.gold_labels.empty()) {
      ++out.dropped;
      continue;
    }
    ++out.relations;
    if (split == "train") {
      auto rows = expand_multi_sense({x});
      out.instances.insert(out.instances.end(), rows.begin(), rows.end());
    } else {
      out.instances.push_back(std::move(x));
    }
  }
  return out;
}

}  // namespace plse
