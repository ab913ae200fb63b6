#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/ops.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

// Provenance of every entry of a concatenated score vector.
struct LabelMap {
  struct Entry {
    std::size_t teacher = 0;
    std::size_t local = 0;
    int global = 0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  std::vector<Entry> entries;      // concatenation order
  std::vector<int> global_classes;  // deduplicated, ascending

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

  [[nodiscard]] std::size_t width() const { return entries.size(); }

  // Built from each teacher's class list, in teacher order.
  static LabelMap from_teachers(std::span<const std::vector<int>> teacher_classes) {
    LabelMap m;
    std::set<int> g;
    for (std::size_t t = 0; t < teacher_classes.size(); ++t)
      for (std::size_t j = 0; j < teacher_classes[t].size(); ++j) {
        m.entries.push_back({t, j, teacher_classes[t][j]});
        g.insert(teacher_classes[t][j]);
      }
    m.global_classes.assign(g.begin(), g.end());
    return m;
  }

  [[nodiscard]] std::size_t teachers() const { return entries.empty() ? 0 : entries.back().teacher + 1; }

  // Column range owned by each teacher.
  [[nodiscard]] std::vector<ops::Block> blocks() const {
    std::vector<ops::Block> out(teachers());
    for (std::size_t e = 0; e < entries.size(); ++e) {
      auto& b = out[entries[e].teacher];
      if (b.width == 0) b.begin = e;
      ++b.width;
    }
    return out;
  }

  [[nodiscard]] std::size_t global_index(int cls) const {
    const auto it = std::lower_bound(global_classes.begin(), global_classes.end(), cls);
    require<ConfigError>(it != global_classes.end() && *it == cls, "class ", cls, " not in label map");
    return static_cast<std::size_t>(it - global_classes.begin());
  }

  // [E,3] tensor of (teacher, local, global) for checkpoint storage.
  [[nodiscard]] Tensor to_tensor() const {
    Tensor t({entries.size(), 3});
    for (std::size_t e = 0; e < entries.size(); ++e) {
      t.at(e, 0) = static_cast<float>(entries[e].teacher);
      t.at(e, 1) = static_cast<float>(entries[e].local);
      t.at(e, 2) = static_cast<float>(entries[e].global);
    }
    return t;
  }

  static LabelMap from_tensor(const Tensor& t) {
    require<IoError>(t.rank() == 2 && t.dim(1) == 3, "label map tensor must be [E,3]");
    std::vector<std::vector<int>> per;
    for (std::size_t e = 0; e < t.dim(0); ++e) {
      const auto teacher = static_cast<std::size_t>(t.at(e, 0));
      if (per.size() <= teacher) per.resize(teacher + 1);
      per[teacher].push_back(static_cast<int>(t.at(e, 2)));
    }
    LabelMap m = from_teachers(per);
    require<IoError>(m.to_tensor() == t, "label map tensor is not in canonical order");
    return m;
  }
};

// Concatenates raw teacher score vectors in teacher order. Overlapping
// classes keep one entry per teacher.
inline std::pair<Tensor, LabelMap> amalgamate_scores(std::span<const Tensor> score_vectors,
                                                     std::span<const std::vector<int>> teacher_classes) {
  require<ConfigError>(score_vectors.size() == teacher_classes.size(), score_vectors.size(), " score tensors vs ",
                       teacher_classes.size(), " class lists");
  for (std::size_t i = 0; i < score_vectors.size(); ++i)
    require<ShapeError>(score_vectors[i].rank() == 2 && score_vectors[i].dim(1) == teacher_classes[i].size(),
                        "teacher ", i, " scores ", shape_str(score_vectors[i].shape()), " vs ",
                        teacher_classes[i].size(), " classes");
  return {concat_channels(score_vectors), LabelMap::from_teachers(teacher_classes)};
}

// Collapses duplicate entries per global class by max; columns follow
// map.global_classes.
inline Tensor merge_overlapping_at_test(const Tensor& scores, const LabelMap& map) {
  require<ShapeError>(scores.rank() == 2 && scores.dim(1) == map.width(), "scores ", shape_str(scores.shape()),
                      " vs label map with ", map.width(), " entries");
  const std::size_t B = scores.dim(0), G = map.global_classes.size();
  Tensor out({B, G});
  std::vector<std::size_t> col(map.width());
  for (std::size_t e = 0; e < map.width(); ++e) col[e] = map.global_index(map.entries[e].global);
  for (std::size_t n = 0; n < B; ++n) {
    std::vector<bool> set(G, false);
    for (std::size_t e = 0; e < map.width(); ++e) {
      const float v = scores.at(n, e);
      if (!set[col[e]] || v > out.at(n, col[e])) {
        out.at(n, col[e]) = v;
        set[col[e]] = true;
      }
    }
  }
  return out;
}

// Global class predicted for each row (first index on ties), optionally
// restricted to `allowed` classes.
inline std::vector<int> predict_classes(const Tensor& scores, const LabelMap& map, std::span<const int> allowed = {}) {
  const Tensor merged = merge_overlapping_at_test(scores, map);
  std::vector<bool> ok(map.global_classes.size(), allowed.empty());
  for (int c : allowed) ok[map.global_index(c)] = true;
  std::vector<int> out;
  for (std::size_t n = 0; n < merged.dim(0); ++n) {
    std::size_t best = map.global_classes.size();
    for (std::size_t g = 0; g < merged.dim(1); ++g)
      if (ok[g] && (best == map.global_classes.size() || merged.at(n, g) > merged.at(n, best))) best = g;
    out.push_back(map.global_classes[best]);
  }
  return out;
}

}  // namespace kamal
