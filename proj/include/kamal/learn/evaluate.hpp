#pragma once

#include <functional>
#include <span>
#include <vector>

#include "kamal/amalgam/scores.hpp"
#include "kamal/core/error.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/nets/network.hpp"

namespace kamal {

struct EvalReport {
  double accuracy_whole = 0.0;
  std::vector<double> accuracy_per_part;
  std::size_t param_count = 0;
};

// Images -> concatenated score vectors [B,E] in LabelMap entry order.
using Scorer = std::function<Tensor(const Tensor&)>;

inline Scorer scorer_of(const Network& net) {
  return [&net](const Tensor& x) { return scores_batched(net, x); };
}

inline Scorer scorer_of(std::span<const Network> teachers) {
  return [teachers](const Tensor& x) {
    std::vector<Tensor> per;
    for (const auto& t : teachers) per.push_back(scores_batched(t, x));
    return concat_channels(per);
  };
}

// Argmax over the concatenated, overlap-merged teacher scores.
inline std::vector<int> ensemble_predict(std::span<const Network> teachers, const Tensor& x, const LabelMap& map) {
  return predict_classes(scorer_of(teachers)(x), map);
}

// Whole-task accuracy over all classes, and per part the accuracy on that
// part's samples with the prediction restricted to the part's classes.
inline EvalReport evaluate_scores(const Tensor& scores, const LabeledSet& test, const LabelMap& map,
                                  const std::vector<std::vector<int>>& parts) {
  for (int l : test.labels) (void)map.global_index(l);
  EvalReport rep;
  const auto whole = predict_classes(scores, map);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += whole[i] == test.labels[i];
  rep.accuracy_whole = static_cast<double>(correct) / static_cast<double>(test.size());
  for (const auto& part : parts) {
    const auto restricted = predict_classes(scores, map, part);
    std::size_t n = 0, ok = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (std::find(part.begin(), part.end(), test.labels[i]) == part.end()) continue;
      ++n;
      ok += restricted[i] == test.labels[i];
    }
    rep.accuracy_per_part.push_back(n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0);
  }
  return rep;
}

inline EvalReport evaluate(const Scorer& scorer, const LabeledSet& test, const LabelMap& map,
                           const std::vector<std::vector<int>>& parts, std::size_t param_count = 0) {
  test.validate();
  auto rep = evaluate_scores(scorer(test.images), test, map, parts);
  rep.param_count = param_count;
  return rep;
}

inline EvalReport evaluate(const Network& student, const LabeledSet& test, const LabelMap& map,
                           const std::vector<std::vector<int>>& parts) {
  require<ConfigError>(student.spec.num_classes == map.width(), "student emits ", student.spec.num_classes,
                       " scores, label map has ", map.width(), " entries");
  return evaluate(scorer_of(student), test, map, parts, count_params(student));
}

inline EvalReport evaluate(std::span<const Network> teachers, const LabeledSet& test, const LabelMap& map,
                           const std::vector<std::vector<int>>& parts) {
  std::size_t n = 0;
  for (const auto& t : teachers) n += count_params(t);
  return evaluate(scorer_of(teachers), test, map, parts, n);
}

}  // namespace kamal
