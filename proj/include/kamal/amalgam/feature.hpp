#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kamal/amalgam/autoencoder.hpp"
#include "kamal/amalgam/scores.hpp"
#include "kamal/core/error.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/nets/network.hpp"

namespace kamal {

enum class AmalgamMode { pairwise, ifa, dfa };

inline const char* to_string(AmalgamMode m) {
  switch (m) {
    case AmalgamMode::pairwise: return "pairwise";
    case AmalgamMode::ifa: return "ifa";
    case AmalgamMode::dfa: return "dfa";
  }
  return "?";
}

inline AmalgamMode parse_mode(const std::string& s) {
  if (s == "pairwise") return AmalgamMode::pairwise;
  if (s == "ifa") return AmalgamMode::ifa;
  if (s == "dfa") return AmalgamMode::dfa;
  fail<ConfigError>("unknown amalgamation mode '", s, "' (expected pairwise|ifa|dfa)");
}

// round(ratio * k * width) clamped into the open interval (width, k*width).
inline std::size_t merged_width(std::size_t width, std::size_t k, double ratio) {
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(k * width)));
  require<ConfigError>(width + 1 <= k * width - 1, "no width strictly between ", width, " and ", k * width);
  return std::clamp(target, width + 1, k * width - 1);
}

// Output widths of the amalgamation at every tapped layer.
struct AmalgamPlan {
  AmalgamMode mode = AmalgamMode::dfa;
  std::vector<std::size_t> per_layer_out;               // final F_a width per layer
  std::vector<std::vector<std::size_t>> merge_widths;  // ifa: N-1 widths per layer

  // Widths for layers 1..L-1 of `teacher` with n teachers.
  static AmalgamPlan make(AmalgamMode mode, const NetworkSpec& teacher, std::size_t n, double ratio) {
    require<ConfigError>(n >= 2, "amalgamation needs at least 2 teachers");
    require<ConfigError>(mode != AmalgamMode::pairwise || n == 2, "pairwise mode takes exactly 2 teachers, got ", n);
    AmalgamPlan p;
    p.mode = mode;
    for (std::size_t l = 1; l < teacher.depth(); ++l) {
      const std::size_t w = teacher.layer(l).out_ch;
      p.per_layer_out.push_back(merged_width(w, n, ratio));
      std::vector<std::size_t> steps;
      if (mode == AmalgamMode::ifa)
        for (std::size_t j = 2; j <= n; ++j) steps.push_back(merged_width(w, j, ratio));
      p.merge_widths.push_back(std::move(steps));
    }
    return p;
  }
};

// Trained amalgamation of one layer: a single autoencoder (pairwise/dfa) or
// a chain of N-1 autoencoders (ifa, left fold over teachers).
struct LayerAmalgam {
  AmalgamMode mode = AmalgamMode::dfa;
  std::vector<std::size_t> teacher_widths;
  std::vector<ChannelAutoencoder> steps;
  std::vector<AutoencoderResult> reports;

  [[nodiscard]] std::size_t out_width() const { return steps.back().cout; }

  // F_a from per-teacher features (teacher order).
  [[nodiscard]] Tensor encode(std::span<const Tensor> feats) const {
    require<ShapeError>(feats.size() == teacher_widths.size(), "expected ", teacher_widths.size(),
                        " teacher feature tensors, got ", feats.size());
    if (mode != AmalgamMode::ifa) return kamal::encode(steps.front(), concat_channels(feats));
    Tensor acc = feats[0];
    for (std::size_t j = 1; j < feats.size(); ++j) acc = kamal::encode(steps[j - 1], concat_channels({acc, feats[j]}));
    return acc;
  }

  // Per-teacher reconstruction of the original features from F_a.
  [[nodiscard]] std::vector<Tensor> reconstruct(const Tensor& fa) const {
    if (mode != AmalgamMode::ifa) return split_channels(kamal::decode(steps.front(), fa), teacher_widths);
    std::vector<Tensor> rev;
    Tensor acc = fa;
    for (std::size_t j = steps.size(); j-- > 0;) {
      const Tensor both = kamal::decode(steps[j], acc);
      const std::size_t prev = j == 0 ? teacher_widths[0] : steps[j - 1].cout;
      const std::vector<std::size_t> widths{prev, teacher_widths[j + 1]};
      auto parts = split_channels(both, widths);
      rev.push_back(std::move(parts[1]));
      acc = std::move(parts[0]);
    }
    rev.push_back(std::move(acc));
    return {rev.rbegin(), rev.rend()};
  }
};

// Per-sample features of all teachers, addressed by transfer-set index.
using TeacherFeatureFn = std::function<std::vector<Tensor>(std::span<const std::size_t>)>;

inline TeacherFeatureFn teacher_features_of(std::span<const Tensor> all) {
  return [all](std::span<const std::size_t> idx) {
    std::vector<Tensor> out;
    for (const auto& t : all) out.push_back(t.gather(idx));
    return out;
  };
}

// Trains the autoencoders for one layer. Step s draws its init from
// Rng(hyper.seed).split(s), so ifa and dfa coincide exactly at N=2.
inline LayerAmalgam train_layer_amalgam(const TeacherFeatureFn& feats, std::size_t count,
                                        std::vector<std::size_t> teacher_widths, AmalgamMode mode,
                                        const std::vector<std::size_t>& widths, const TrainHyper& hyper) {
  const std::size_t n = teacher_widths.size();
  require<ConfigError>(n >= 2, "amalgamation needs at least 2 teachers, got ", n);
  require<ConfigError>(mode != AmalgamMode::pairwise || n == 2, "pairwise mode takes exactly 2 teachers, got ", n);
  const std::size_t total = std::accumulate(teacher_widths.begin(), teacher_widths.end(), std::size_t{0});
  const std::size_t widest = *std::max_element(teacher_widths.begin(), teacher_widths.end());
  LayerAmalgam la;
  la.mode = mode;
  la.teacher_widths = teacher_widths;
  auto step_hyper = [&](std::size_t s) {
    TrainHyper h = hyper;
    h.seed = hyper.seed * 1000003ULL + s;
    return h;
  };
  if (mode != AmalgamMode::ifa) {
    require<ConfigError>(widths.size() == 1, "dfa/pairwise take one output width");
    const std::size_t cout = widths.front();
    require<ConfigError>(cout > widest && cout < total, to_string(mode), " output width ", cout,
                         " outside the open interval (", widest, ", ", total, ")");
    FeatureStream concat = [&feats](std::span<const std::size_t> idx) {
      const auto f = feats(idx);
      return concat_channels(f);
    };
    auto res = train_autoencoder(concat, count, total, cout, step_hyper(0));
    la.steps.push_back(res.ae);
    la.reports.push_back(std::move(res));
    return la;
  }
  require<ConfigError>(widths.size() == n - 1, "ifa needs ", n - 1, " merge widths, got ", widths.size());
  std::size_t acc_width = teacher_widths[0];
  std::size_t seen_total = teacher_widths[0];
  std::size_t seen_widest = teacher_widths[0];
  for (std::size_t j = 1; j < n; ++j) {
    seen_total += teacher_widths[j];
    seen_widest = std::max(seen_widest, teacher_widths[j]);
    const std::size_t cout = widths[j - 1];
    require<ConfigError>(cout > seen_widest && cout < seen_total && cout < acc_width + teacher_widths[j], "ifa step ",
                         j, ": width ", cout, " outside the open interval (", seen_widest, ", ",
                         std::min(seen_total, acc_width + teacher_widths[j]), ")");
    const std::vector<ChannelAutoencoder> done = la.steps;
    FeatureStream concat = [&feats, done, j](std::span<const std::size_t> idx) {
      const auto f = feats(idx);
      Tensor acc = f[0];
      for (std::size_t s = 1; s < j; ++s) acc = encode(done[s - 1], concat_channels({acc, f[s]}));
      return concat_channels({acc, f[j]});
    };
    auto res = train_autoencoder(concat, count, acc_width + teacher_widths[j], cout, step_hyper(j - 1));
    la.steps.push_back(res.ae);
    la.reports.push_back(std::move(res));
    acc_width = cout;
  }
  return la;
}

// Relative reconstruction error ||recon - F||^2 / ||F||^2 over the stream.
inline double relative_reconstruction_error(const LayerAmalgam& la, const TeacherFeatureFn& feats, std::size_t count,
                                            std::size_t chunk = 128) {
  double err = 0.0, energy = 0.0;
  for (const auto& idx : batches(count, chunk, 0, 0, false)) {
    const auto f = feats(idx);
    const Tensor orig = concat_channels(f);
    const auto parts = la.reconstruct(la.encode(f));
    const Tensor rec = concat_channels(parts);
    err += ops::l2_loss(rec, orig) * static_cast<double>(idx.size());
    energy += feature_energy(orig) * static_cast<double>(idx.size());
  }
  return energy > 0.0 ? err / energy : 0.0;
}

// Two teachers of equal width c1; cout must lie in (c1, 2*c1).
inline std::pair<LayerAmalgam, Tensor> amalgamate_pair(const Tensor& f1, const Tensor& f2, std::size_t cout,
                                                       const TrainHyper& hyper) {
  require<ShapeError>(f1.shape() == f2.shape(), "amalgamate_pair: teacher features differ in shape ",
                      shape_str(f1.shape()), " vs ", shape_str(f2.shape()));
  const std::size_t c1 = f1.dim(1);
  require<ConfigError>(cout > c1 && cout < 2 * c1, "pairwise width ", cout, " outside (", c1, ", ", 2 * c1, ")");
  const std::vector<Tensor> all{f1, f2};
  auto la = train_layer_amalgam(teacher_features_of(all), f1.dim(0), {c1, c1}, AmalgamMode::pairwise, {cout}, hyper);
  Tensor fa = la.encode(all);
  return {std::move(la), std::move(fa)};
}

inline std::pair<LayerAmalgam, Tensor> amalgamate_dfa(std::span<const Tensor> features, std::size_t cout,
                                                      const TrainHyper& hyper) {
  require<ConfigError>(features.size() >= 2, "dfa needs at least 2 teachers");
  std::vector<std::size_t> widths;
  for (const auto& f : features) widths.push_back(f.dim(1));
  auto la = train_layer_amalgam(teacher_features_of(features), features[0].dim(0), widths, AmalgamMode::dfa, {cout},
                                hyper);
  Tensor fa = la.encode(features);
  return {std::move(la), std::move(fa)};
}

inline std::pair<LayerAmalgam, Tensor> amalgamate_ifa(std::span<const Tensor> features,
                                                      const std::vector<std::size_t>& merge_widths,
                                                      const TrainHyper& hyper) {
  require<ConfigError>(features.size() >= 2, "ifa needs at least 2 teachers");
  std::vector<std::size_t> widths;
  for (const auto& f : features) widths.push_back(f.dim(1));
  auto la = train_layer_amalgam(teacher_features_of(features), features[0].dim(0), widths, AmalgamMode::ifa,
                                merge_widths, hyper);
  Tensor fa = la.encode(features);
  return {std::move(la), std::move(fa)};
}

// Read-only view of teacher responses over the transfer set. Whole layers
// of features are cached within a byte budget and recomputed per request
// beyond it; score vectors are always cached.
class FeatureBank {
 public:
  FeatureBank(std::span<const Network> teachers, const TransferSet& transfer)
      : teachers_(teachers), transfer_(&transfer) {
    require<ConfigError>(!teachers.empty(), "feature bank needs teachers");
    for (const auto& t : teachers)
      require<ConfigError>(t.spec.layers.size() == teachers[0].spec.layers.size(),
                           "teachers must share one architecture");
    for (std::size_t l = 1; l <= teachers[0].depth(); ++l) {
      const auto sh = teachers[0].spec.shapes().raw[l - 1];
      for (const auto& t : teachers)
        require<ConfigError>(t.spec.shapes().raw[l - 1] == sh, "teachers disagree on layer ", l, " feature shape");
    }
  }

  [[nodiscard]] std::size_t count() const { return transfer_->size(); }
  [[nodiscard]] std::size_t teachers() const { return teachers_.size(); }
  [[nodiscard]] const TransferSet& transfer() const { return *transfer_; }

  // raw outputs of layers 1..last for every teacher: out[teacher][l-1].
  [[nodiscard]] std::vector<std::vector<Tensor>> collect(std::span<const std::size_t> idx, std::size_t last) const {
    const Tensor x = transfer_->images.gather(idx);
    std::vector<std::vector<Tensor>> out;
    for (const auto& t : teachers_) {
      Tape tape;
      const Trace tr = forward(tape, t, tape.constant(x), last);
      std::vector<Tensor> raw;
      for (std::size_t l = 0; l < last; ++l) raw.push_back(tape.value(tr.raw[l]));
      out.push_back(std::move(raw));
    }
    return out;
  }

  // Per-teacher raw outputs of layer l for the given samples. A whole layer
  // is computed once and kept while it fits the byte budget; callers walk
  // the layers forward, so layers below l-1 are dropped first.
  [[nodiscard]] std::vector<Tensor> features(std::span<const std::size_t> idx, std::size_t l) const {
    std::vector<Tensor> out;
    if (const auto* whole = cached_layer(l)) {
      for (const auto& t : *whole) out.push_back(t.gather(idx));
    } else {
      auto all = collect(idx, l);
      for (auto& t : all) out.push_back(std::move(t[l - 1]));
    }
    return out;
  }

  [[nodiscard]] TeacherFeatureFn layer(std::size_t l) const {
    return [this, l](std::span<const std::size_t> idx) { return features(idx, l); };
  }

  // 0 disables caching.
  void set_cache_budget(std::size_t bytes) {
    cache_budget_ = bytes;
    cache_.clear();
  }

  [[nodiscard]] std::vector<std::size_t> widths(std::size_t l) const {
    std::vector<std::size_t> w;
    for (const auto& t : teachers_) w.push_back(t.spec.layer(l).out_ch);
    return w;
  }

  // Concatenated teacher score vectors over the whole transfer set, [K,E].
  [[nodiscard]] const Tensor& scores() const {
    if (score_cache_.empty()) {
      std::vector<Tensor> per;
      for (const auto& t : teachers_) per.push_back(scores_batched(t, transfer_->images));
      score_cache_ = concat_channels(per);
    }
    return score_cache_;
  }

 private:
  const std::vector<Tensor>* cached_layer(std::size_t l) const {
    if (const auto it = cache_.find(l); it != cache_.end()) return &it->second;
    std::erase_if(cache_, [l](const auto& kv) { return kv.first + 1 < l; });
    std::size_t held = 0;
    for (const auto& [k, v] : cache_)
      for (const auto& t : v) held += t.size() * sizeof(float);
    std::size_t need = 0;
    for (const auto& t : teachers_) need += shape_size(t.spec.shapes().raw[l - 1]) * count() * sizeof(float);
    if (held + need > cache_budget_) return nullptr;
    std::vector<Tensor> whole;
    constexpr std::size_t chunk = 128;
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < count(); b += chunk) {
      idx.resize(std::min(chunk, count() - b));
      std::iota(idx.begin(), idx.end(), b);
      auto part = collect(idx, l);
      for (std::size_t t = 0; t < part.size(); ++t) {
        const Tensor& f = part[t][l - 1];
        if (whole.size() <= t) {
          Shape sh = f.shape();
          sh[0] = count();
          whole.emplace_back(sh);
        }
        std::copy(f.data().begin(), f.data().end(), whole[t].data().begin() + static_cast<std::ptrdiff_t>(b * (f.size() / idx.size())));
      }
    }
    return &cache_.emplace(l, std::move(whole)).first->second;
  }

  std::span<const Network> teachers_;
  const TransferSet* transfer_;
  mutable Tensor score_cache_;
  std::size_t cache_budget_ = std::size_t{1} << 30;
  mutable std::map<std::size_t, std::vector<Tensor>> cache_;
};

}  // namespace kamal
