#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/rng.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

// Labelled images with values in [0,1]. class_ids lists the global classes
// this set covers; a label's local index is its position in class_ids.
struct LabeledSet {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  std::vector<int> class_ids;

  [[nodiscard]] std::size_t size() const { return labels.size(); }

  [[nodiscard]] int local_index(int global) const {
    const auto it = std::find(class_ids.begin(), class_ids.end(), global);
    require<ConfigError>(it != class_ids.end(), "class ", global, " not covered by this set");
    return static_cast<int>(it - class_ids.begin());
  }

  [[nodiscard]] std::vector<int> local_labels() const {
    std::vector<int> out;
    out.reserve(labels.size());
    for (int l : labels) out.push_back(local_index(l));
    return out;
  }

  void validate() const {
    require<ConfigError>(!labels.empty(), "labeled set is empty");
    require<ShapeError>(images.rank() == 4 && images.dim(0) == labels.size(), "images ", shape_str(images.shape()),
                        " do not match ", labels.size(), " labels");
    require<NumericError>(images.all_finite(), "labeled set contains non-finite pixels");
    for (int l : labels)
      require<ConfigError>(std::find(class_ids.begin(), class_ids.end(), l) != class_ids.end(), "label ", l,
                           " missing from class_ids");
  }

  [[nodiscard]] LabeledSet subset(std::span<const std::size_t> idx) const {
    LabeledSet s;
    s.images = images.gather(idx);
    for (auto i : idx) s.labels.push_back(labels[i]);
    s.class_ids = class_ids;
    return s;
  }
};

// Unlabelled images fed to the teachers.
struct TransferSet {
  Tensor images;  // [K,C,H,W]
  [[nodiscard]] std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
};

struct ClassSplit {
  std::vector<std::vector<int>> parts;
  bool overlap_allowed = false;

  // Sorted union of every part.
  [[nodiscard]] std::vector<int> all_classes() const {
    std::set<int> u;
    for (const auto& p : parts) u.insert(p.begin(), p.end());
    return {u.begin(), u.end()};
  }

  void validate() const {
    require<ConfigError>(!parts.empty(), "class split has no parts");
    std::set<int> seen;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      require<ConfigError>(!parts[i].empty(), "class split part ", i, " is empty");
      std::set<int> local(parts[i].begin(), parts[i].end());
      require<ConfigError>(local.size() == parts[i].size(), "class split part ", i, " repeats a class");
      for (int c : parts[i]) {
        if (!overlap_allowed) require<ConfigError>(!seen.count(c), "class ", c, " appears in more than one part");
        seen.insert(c);
      }
    }
  }
};

// Seeded shuffle of class ids cut into `n_parts` equal ranges (each sorted);
// `shared` classes are then added to every part.
inline ClassSplit make_class_split(int num_classes, std::size_t n_parts, std::uint64_t seed,
                                   const std::vector<int>& shared = {}) {
  require<ConfigError>(n_parts >= 1, "need at least one part");
  std::vector<int> pool;
  for (int c = 0; c < num_classes; ++c)
    if (std::find(shared.begin(), shared.end(), c) == shared.end()) pool.push_back(c);
  for (int c : shared) require<ConfigError>(c >= 0 && c < num_classes, "shared class ", c, " out of range");
  require<ConfigError>(pool.size() % n_parts == 0, pool.size(), " non-shared classes cannot be split into ", n_parts,
                       " equal parts");
  Rng rng(seed, 0x73706c);
  const auto perm = rng.permutation(pool.size());
  const std::size_t per = pool.size() / n_parts;
  ClassSplit split;
  split.overlap_allowed = !shared.empty();
  for (std::size_t p = 0; p < n_parts; ++p) {
    std::vector<int> part;
    for (std::size_t j = 0; j < per; ++j) part.push_back(pool[perm[p * per + j]]);
    part.insert(part.end(), shared.begin(), shared.end());
    std::sort(part.begin(), part.end());
    split.parts.push_back(std::move(part));
  }
  return split;
}

namespace detail {

struct Bump {
  float cx, cy, width;
  std::array<float, 4> amp;  // per channel (up to 4 channels used)
};

}  // namespace detail

// Class template k: base level + three seeded Gaussian bumps + a
// class-unique low-frequency sinusoid, clamped to [0,1].
inline Tensor synthetic_template(int k, int num_classes, std::array<std::size_t, 3> shape, std::uint64_t seed) {
  const std::size_t C = shape[0], H = shape[1], W = shape[2];
  Rng rng = Rng(seed, 0x74706c).split(static_cast<std::uint64_t>(k));
  std::vector<detail::Bump> bumps(3);
  for (auto& b : bumps) {
    b.cx = rng.uniform(0.15f, 0.85f) * static_cast<float>(W);
    b.cy = rng.uniform(0.15f, 0.85f) * static_cast<float>(H);
    b.width = rng.uniform(0.08f, 0.2f) * static_cast<float>(std::min(H, W));
    for (auto& a : b.amp) a = rng.uniform(-0.45f, 0.45f);
  }
  const float fx = 1.0f + static_cast<float>(k % 3);
  const float fy = 1.0f + static_cast<float>((k / 3) % 3);
  const float phase = 6.2831853f * static_cast<float>(k) / static_cast<float>(num_classes) + rng.uniform(0.0f, 0.5f);
  std::array<float, 4> sin_amp;
  for (auto& a : sin_amp) a = rng.uniform(0.05f, 0.15f);
  Tensor t({1, C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float v = 0.5f;
        for (const auto& b : bumps) {
          const float dx = static_cast<float>(x) - b.cx, dy = static_cast<float>(y) - b.cy;
          v += b.amp[c % 4] * std::exp(-(dx * dx + dy * dy) / (2.0f * b.width * b.width));
        }
        v += sin_amp[c % 4] * std::sin(6.2831853f * (fx * static_cast<float>(x) / static_cast<float>(W) +
                                                     fy * static_cast<float>(y) / static_cast<float>(H)) +
                                       phase + static_cast<float>(c));
        t.at(0, c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
  return t;
}

// Deterministic synthetic classification set. Sample s of class k uses noise
// stream (seed, k, first_sample + s), so a test set generated with
// first_sample = per_class_train shares templates but not noise.
inline LabeledSet gen_synthetic(int num_classes, std::size_t per_class, std::array<std::size_t, 3> shape,
                                float noise_sigma, std::uint64_t seed, std::size_t first_sample = 0) {
  require<ConfigError>(num_classes >= 2, "synthetic set needs >= 2 classes");
  require<ConfigError>(per_class >= 1, "synthetic set needs >= 1 sample per class");
  require<ConfigError>(noise_sigma >= 0.0f, "noise sigma must be non-negative");
  require<ConfigError>(shape[0] >= 1 && shape[1] >= 2 && shape[2] >= 2, "degenerate synthetic image shape ",
                       shape[0], "x", shape[1], "x", shape[2]);
  const std::size_t C = shape[0], H = shape[1], W = shape[2], img = C * H * W;
  LabeledSet set;
  set.images = Tensor({static_cast<std::size_t>(num_classes) * per_class, C, H, W});
  const Rng noise_root(seed, 0x6e6f6973);
  for (int k = 0; k < num_classes; ++k) {
    set.class_ids.push_back(k);
    const Tensor tmpl = synthetic_template(k, num_classes, shape, seed);
    const Rng class_noise = noise_root.split(static_cast<std::uint64_t>(k));
    for (std::size_t s = 0; s < per_class; ++s) {
      Rng r = class_noise.split(first_sample + s);
      float* dst = set.images.ptr() + (static_cast<std::size_t>(k) * per_class + s) * img;
      for (std::size_t i = 0; i < img; ++i) {
        const float n = noise_sigma > 0.0f ? noise_sigma * r.normal() : 0.0f;
        dst[i] = std::clamp(tmpl[i] + n, 0.0f, 1.0f);
      }
      set.labels.push_back(k);
    }
  }
  return set;
}

// Part i keeps exactly the samples whose label is in split.parts[i]; its
// class_ids are that part's classes (local index = position).
inline std::vector<LabeledSet> split_classes(const LabeledSet& set, const ClassSplit& split) {
  split.validate();
  for (const auto& part : split.parts)
    for (int c : part)
      require<ConfigError>(std::find(set.class_ids.begin(), set.class_ids.end(), c) != set.class_ids.end(),
                           "split names unknown class id ", c);
  std::vector<LabeledSet> out;
  for (const auto& part : split.parts) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < set.size(); ++i)
      if (std::find(part.begin(), part.end(), set.labels[i]) != part.end()) idx.push_back(i);
    require<ConfigError>(!idx.empty(), "split part has no samples");
    LabeledSet s = set.subset(idx);
    s.class_ids = part;
    out.push_back(std::move(s));
  }
  return out;
}

// Pools the images of every set, drops labels, and applies a seeded shuffle.
inline TransferSet make_transfer_set(std::span<const LabeledSet> sets, std::uint64_t seed) {
  require<ConfigError>(!sets.empty(), "transfer set needs at least one source");
  std::vector<Tensor> imgs;
  for (const auto& s : sets) {
    require<ShapeError>(s.images.rank() == 4 && s.images.shape()[1] == sets.front().images.dim(1) &&
                            s.images.dim(2) == sets.front().images.dim(2) && s.images.dim(3) == sets.front().images.dim(3),
                        "transfer set sources have mismatched image shapes");
    imgs.push_back(s.images);
  }
  const Tensor all = concat_batches(imgs);
  Rng rng(seed, 0x747266);
  const auto perm = rng.permutation(all.dim(0));
  return TransferSet{all.gather(perm)};
}

// Index lists covering [0,n) once; shuffled with stream (seed, epoch).
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                     std::size_t epoch, bool shuffle) {
  require<ConfigError>(batch_size >= 1, "batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) order = Rng(seed, 0x62746368).split(epoch).permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  return out;
}

}  // namespace kamal
