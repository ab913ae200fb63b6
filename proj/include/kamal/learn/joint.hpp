#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "kamal/amalgam/feature.hpp"
#include "kamal/amalgam/scores.hpp"
#include "kamal/core/error.hpp"
#include "kamal/core/ops.hpp"
#include "kamal/core/tape.hpp"
#include "kamal/learn/evaluate.hpp"
#include "kamal/nets/network.hpp"
#include "kamal/nets/train.hpp"

namespace kamal {

// Labelled sets used only to report accuracy while training; the student
// never sees these labels in its loss.
struct EvalContext {
  const LabeledSet* train = nullptr;  // labelled view of the transfer images
  const LabeledSet* test = nullptr;
  std::vector<std::vector<int>> parts;
};

namespace detail {

inline void log_epoch(TrainLog& log, std::size_t epoch, double train_loss, const Network& student, const LabelMap& map,
                      const EvalContext* ctx, const std::function<double(const Tensor&, const Tensor&)>& test_loss,
                      const Tensor* test_targets) {
  EpochRecord tr{epoch, "train", train_loss, 0.0, {}};
  if (ctx && ctx->train) {
    const auto rep = evaluate(student, *ctx->train, map, ctx->parts);
    tr.accuracy_whole = rep.accuracy_whole;
    tr.accuracy_parts = rep.accuracy_per_part;
  }
  log.records.push_back(tr);
  if (ctx && ctx->test) {
    const Tensor s = scores_batched(student, ctx->test->images);
    const auto rep = evaluate_scores(s, *ctx->test, map, ctx->parts);
    const double loss = test_targets ? test_loss(s, *test_targets) : 0.0;
    log.records.push_back({epoch, "test", loss, rep.accuracy_whole, rep.accuracy_per_part});
  }
}

// Generic end-to-end loop over the transfer set. `loss_fn` records the loss
// terminal for a batch of student logits against the batch targets.
template <typename LossFn>
std::pair<Network, TrainLog> fit_to_targets(Network student, const Tensor& images, const Tensor& targets,
                                            const LabelMap& map, const TrainHyper& hyper, const EvalContext* ctx,
                                            const Tensor* test_targets, LossFn&& loss_fn,
                                            const std::function<double(const Tensor&, const Tensor&)>& eval_loss) {
  TrainLog log;
  SgdConfig sgd = hyper.sgd;
  auto params = student.params();
  const std::size_t K = images.dim(0);
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    double sum = 0.0;
    for (const auto& idx : batches(K, hyper.batch_size, hyper.seed, epoch, true)) {
      const Tensor x = images.gather(idx);
      const Tensor y = targets.gather(idx);
      Tape tape;
      const Trace tr = forward(tape, student, tape.constant(x));
      const double loss = loss_fn(tape, tr.scores, y);
      require_finite_loss(loss, "joint");
      tape.backward();
      sgd_step(params, sgd);
      sum += loss * static_cast<double>(idx.size());
    }
    log_epoch(log, epoch, sum / static_cast<double>(K), student, map, ctx, eval_loss, test_targets);
    sgd.lr *= hyper.lr_decay;
  }
  return {std::move(student), std::move(log)};
}

}  // namespace detail

// End-to-end fine-tuning of every student parameter (FAM included) against
// the concatenated teacher score vectors with L_PL = 1/2 ||s - F_a^L||^2.
inline std::pair<Network, TrainLog> joint_finetune(Network student, const FeatureBank& bank, const LabelMap& map,
                                                   const TrainHyper& hyper, const EvalContext* ctx = nullptr,
                                                   const Tensor* test_targets = nullptr) {
  require<ConfigError>(student.spec.num_classes == map.width(), "label map has ", map.width(),
                       " entries but the student emits ", student.spec.num_classes, " scores");
  const Tensor& targets = bank.scores();
  require<ConfigError>(targets.dim(1) == map.width(), "teacher scores have ", targets.dim(1),
                       " entries, label map has ", map.width());
  return detail::fit_to_targets(
      std::move(student), bank.transfer().images, targets, map, hyper, ctx, test_targets,
      [](Tape& tape, Var s, const Tensor& y) { return tape.l2_loss(s, y); },
      [](const Tensor& s, const Tensor& y) { return ops::l2_loss(s, y); });
}

struct KdOptions {
  float temperature = 4.0f;
  bool raw_logits = false;  // L2 on raw concatenated logits instead of softened targets
};

// Hinton-style distillation from the concatenated teacher scores into a
// randomly initialised student (no FAM, no layer-wise phase). Targets are
// softened per teacher block; the loss is T^2-scaled cross-entropy.
inline std::pair<Network, TrainLog> kd_baseline(const NetworkSpec& student_spec, const FeatureBank& bank,
                                                const LabelMap& map, const KdOptions& kd, const TrainHyper& hyper,
                                                std::uint64_t init_seed, const EvalContext* ctx = nullptr,
                                                const Tensor* test_scores = nullptr) {
  require<ConfigError>(kd.temperature > 0.0f, "KD temperature must be positive");
  require<ConfigError>(student_spec.num_classes == map.width(), "label map has ", map.width(),
                       " entries but the student emits ", student_spec.num_classes, " scores");
  Network student = build_network(student_spec, Rng(init_seed, 0x6b64));
  const Tensor& logits = bank.scores();
  if (kd.raw_logits) return joint_finetune(std::move(student), bank, map, hyper, ctx, test_scores);
  const auto blocks = map.blocks();
  const Tensor soft = ops::block_softmax(logits, blocks, kd.temperature);
  std::optional<Tensor> soft_test;
  if (test_scores) soft_test = ops::block_softmax(*test_scores, blocks, kd.temperature);
  const float T = kd.temperature;
  return detail::fit_to_targets(
      std::move(student), bank.transfer().images, soft, map, hyper, ctx, soft_test ? &*soft_test : nullptr,
      [&blocks, T](Tape& tape, Var s, const Tensor& y) { return tape.soft_cross_entropy(s, y, blocks, T); },
      [&blocks, T](const Tensor& s, const Tensor& y) { return ops::soft_cross_entropy(s, y, blocks, T); });
}

}  // namespace kamal
