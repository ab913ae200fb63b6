#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/optim.hpp"
#include "kamal/core/tape.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/nets/network.hpp"

namespace kamal {

struct TrainHyper {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  SgdConfig sgd;
  float lr_decay = 1.0f;  // lr multiplier applied after every epoch
  // Extra factor on the FAM's normalised step in layer-wise stages. Larger
  // steps let the early shrink-everything gradient push FAM rows into the
  // dead side of the relu.
  float fam_lr_scale = 0.02f;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before any update
  std::string split;      // "train" / "test" / "val"
  double loss = 0.0;
  double accuracy_whole = 0.0;
  std::vector<double> accuracy_parts;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  [[nodiscard]] std::vector<EpochRecord> split(const std::string& name) const {
    std::vector<EpochRecord> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(r);
    return out;
  }
};

inline std::size_t argmax_row(const Tensor& s, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t m = 1; m < s.dim(1); ++m)
    if (s.at(row, m) > s.at(row, best)) best = m;
  return best;
}

inline void require_finite_loss(double loss, const char* what) {
  require<NumericError>(std::isfinite(loss), "non-finite ", what, " loss");
}

// Mean cross-entropy and accuracy of `net` on local labels.
inline std::pair<double, double> classifier_metrics(const Network& net, const LabeledSet& set, std::size_t chunk = 256) {
  const auto local = set.local_labels();
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const std::size_t n = std::min(chunk, set.size() - b);
    const Tensor s = scores(net, set.images.slice(b, n));
    const std::span<const int> lab(local.data() + b, n);
    loss += ops::cross_entropy(s, lab) * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) correct += static_cast<int>(argmax_row(s, i)) == lab[i];
  }
  return {loss / static_cast<double>(set.size()), static_cast<double>(correct) / static_cast<double>(set.size())};
}

// Softmax cross-entropy training on the set's local labels. Records epoch 0
// (initial) and every later epoch for both splits; `val` may be empty.
inline std::pair<Network, TrainLog> train_classifier(Network net, const LabeledSet& train, const LabeledSet& val,
                                                     const TrainHyper& hyper) {
  train.validate();
  require<ConfigError>(train.class_ids.size() == net.spec.num_classes, "training set covers ", train.class_ids.size(),
                       " classes, network outputs ", net.spec.num_classes);
  const auto local = train.local_labels();
  const bool has_val = !val.labels.empty();
  TrainLog log;
  auto record = [&](std::size_t epoch, double train_loss, double train_acc) {
    log.records.push_back({epoch, "train", train_loss, train_acc, {}});
    if (has_val) {
      const auto [vl, va] = classifier_metrics(net, val);
      log.records.push_back({epoch, "val", vl, va, {}});
    }
  };
  const auto [l0, a0] = classifier_metrics(net, train);
  record(0, l0, a0);
  SgdConfig sgd = hyper.sgd;
  auto params = net.params();
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t correct = 0;
    for (const auto& idx : batches(train.size(), hyper.batch_size, hyper.seed, epoch, true)) {
      const Tensor x = train.images.gather(idx);
      std::vector<int> y;
      for (auto i : idx) y.push_back(local[i]);
      Tape tape;
      const Trace tr = forward(tape, net, tape.constant(x));
      const double loss = tape.cross_entropy(tr.scores, y);
      require_finite_loss(loss, "classifier");
      tape.backward();
      sgd_step(params, sgd);
      sum += loss * static_cast<double>(idx.size());
      const Tensor& s = tape.value(tr.scores);
      for (std::size_t i = 0; i < idx.size(); ++i) correct += static_cast<int>(argmax_row(s, i)) == y[i];
    }
    record(epoch, sum / static_cast<double>(train.size()),
           static_cast<double>(correct) / static_cast<double>(train.size()));
    sgd.lr *= hyper.lr_decay;
  }
  return {std::move(net), std::move(log)};
}

}  // namespace kamal
