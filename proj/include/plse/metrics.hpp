#pragma once

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

#include "plse/common.hpp"

namespace plse {

struct EvalReport {
  std::vector<std::string> labels;
  double accuracy = 0;
  double macro_f1 = 0;
  std::vector<double> per_class_f1;              // aligned with labels
  std::vector<std::vector<std::size_t>> confusion;  // [reference][predicted]
  std::size_t n_instances = 0;

  nlohmann::json to_json() const {
    nlohmann::json f1 = nlohmann::json::object();
    for (std::size_t i = 0; i < labels.size(); ++i) f1[labels[i]] = per_class_f1[i];
    return {{"accuracy", accuracy}, {"macro_f1", macro_f1}, {"n_instances", n_instances},
            {"labels", labels},     {"per_class_f1", f1},   {"confusion", confusion}};
  }
};

/// Accuracy counts a prediction as correct when it is any of the gold
/// labels. In the confusion matrix the reference class is the matched gold
/// when there is one, else the first listed gold. Macro-F1 averages over
/// every label in `labels`, including ones that never occur.
inline EvalReport score(const std::vector<std::string>& predictions, const std::vector<std::vector<std::string>>& golds,
                        const std::vector<std::string>& labels) {
  if (predictions.size() != golds.size())
    throw Error("score: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(golds.size()) + " gold sets");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (!index.emplace(labels[i], i).second) throw Error("score: duplicate label '" + labels[i] + "'");
  auto at = [&](const std::string& l) {
    auto it = index.find(l);
    if (it == index.end()) throw Error("score: label '" + l + "' is not in the label set");
    return it->second;
  };

  EvalReport r;
  r.labels = labels;
  r.n_instances = predictions.size();
  const std::size_t k = labels.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (golds[i].empty()) throw Error("score: instance " + std::to_string(i) + " has an empty gold set");
    const std::size_t p = at(predictions[i]);
    std::size_t ref = at(golds[i].front());
    for (const auto& g : golds[i])
      if (at(g) == p) {
        ref = p;
        break;
      }
    if (ref == p) ++correct;
    ++r.confusion[ref][p];
  }
  r.accuracy = predictions.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(predictions.size());
  r.per_class_f1.assign(k, 0.0);
  double sum = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = r.confusion[c][c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += r.confusion[o][c];
      fn += r.confusion[c][o];
    }
    const std::size_t denom = 2 * tp + fp + fn;
    r.per_class_f1[c] = denom ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
    sum += r.per_class_f1[c];
  }
  r.macro_f1 = k ? sum / static_cast<double>(k) : 0.0;
  return r;
}

}  // namespace plse
