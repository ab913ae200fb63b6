#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "kamal/amalgam/autoencoder.hpp"
#include "kamal/amalgam/feature.hpp"
#include "kamal/core/error.hpp"
#include "kamal/core/tape.hpp"
#include "kamal/nets/network.hpp"
#include "kamal/nets/train.hpp"

namespace kamal {

// (input, target) batch for a stage, addressed by transfer-set index.
using StagePairFn = std::function<std::pair<Tensor, Tensor>(std::span<const std::size_t>)>;

struct StageResult {
  std::size_t layer_index = 0;
  Param weight;
  Param bias;
  std::optional<Param> fam;
  double initial_loss = 0.0;  // full pass before the first update
  double final_loss = 0.0;    // full pass after the last update
  std::vector<double> loss_curve;  // running mean L_PL per epoch
};

// Parameters one stage learns: the layer's weight/bias and, optionally, a
// FAM applied to the incoming amalgamated features.
struct StageModel {
  LayerSpec layer;
  NonParam pre;  // activation/pool of the previous layer
  Param weight;
  Param bias;
  std::optional<Param> fam;

  [[nodiscard]] std::vector<Param*> params() {
    std::vector<Param*> p{&weight, &bias};
    if (fam) p.push_back(&*fam);
    return p;
  }

  // Records conv(pool(act(FAM(x)))) on the tape; returns the pre-conv input too.
  std::pair<Var, Var> forward(Tape& tape, Var x) {
    Var h = x;
    if (fam) h = tape.conv1x1(h, tape.param(*fam));
    h = tape.nonparam(h, pre);
    Var z = layer.kind == LayerKind::conv
                ? tape.conv2d(h, tape.param(weight), tape.param(bias), layer.stride, layer.pad)
                : tape.linear(tape.flatten(h), tape.param(weight), tape.param(bias));
    return {z, h};
  }

  [[nodiscard]] std::size_t kernel_area() const { return layer.kind == LayerKind::conv ? layer.kernel * layer.kernel : 1; }
};

// max over input channels c of ||W[:,c,...]||^2. The FAM's curvature is
// roughly its input energy scaled by this.
inline double max_input_channel_norm(const StageModel& m) {
  const Tensor& w = m.weight.value;
  const std::size_t out = w.dim(0), C = m.layer.in_ch, per = w.size() / (out * C);
  double best = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t k = 0; k < per; ++k) {
        const double v = w[(o * C + c) * per + k];
        acc += v * v;
      }
    best = std::max(best, acc);
  }
  return best;
}

inline double stage_loss(StageModel& m, const StagePairFn& data, std::size_t count, std::size_t chunk = 128) {
  double sum = 0.0;
  for (const auto& idx : batches(count, chunk, 0, 0, false)) {
    const auto [x, y] = data(idx);
    Tape tape;
    const auto [z, h] = m.forward(tape, tape.constant(x));
    (void)h;
    require<ShapeError>(tape.value(z).shape() == y.shape(), "stage ", m.layer.in_ch, "->", m.layer.out_ch,
                        ": predicted features ", shape_str(tape.value(z).shape()), " vs target ",
                        shape_str(y.shape()));
    sum += ops::l2_loss(tape.value(z), y) * static_cast<double>(idx.size());
  }
  return sum / static_cast<double>(count);
}

// Learns one layer against amalgamated targets by SGD on
// L_PL = 1/2 ||conv(pool(act(FAM(F_in)))) - F_target||^2 (per-sample mean).
// Weights start from the standard init drawn from `init`; FAM starts at the
// identity. hyper.sgd.lr is a normalised step (see normalized_sgd).
inline StageResult layerwise_stage(std::size_t l, const StagePairFn& data, std::size_t count, const LayerSpec& layer,
                                   const NonParam& pre, std::size_t in_features, bool fam_on, const TrainHyper& hyper,
                                   const Rng& init) {
  require<ConfigError>(count >= 1, "stage ", l, ": empty transfer stream");
  require<ConfigError>(!(fam_on && l == 1), "stage 1 consumes raw images and takes no FAM");
  StageModel m;
  m.layer = layer;
  m.pre = pre;
  {
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(in_features)));
    Tensor w(weight_shape(layer, in_features));
    Rng r = init.split(l);
    for (auto& v : w.data()) v = r.uniform(-bound, bound);
    m.weight = Param(param_name(l, "weight"), std::move(w));
    m.bias = Param(param_name(l, "bias"), Tensor({layer.out_ch}));
  }
  if (fam_on) m.fam = Param(param_name(l, "fam"), identity_matrix(layer.in_ch));

  StageResult res;
  res.layer_index = l;
  res.initial_loss = stage_loss(m, data, count);
  require_finite_loss(res.initial_loss, "layer-wise");
  std::vector<Param*> params{&m.weight, &m.bias};
  SgdConfig sgd, fam_sgd;
  bool calibrated = false;
  float lr_scale = 1.0f;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    double sum = 0.0;
    for (const auto& idx : batches(count, hyper.batch_size, hyper.seed, epoch, true)) {
      const auto [x, y] = data(idx);
      Tape tape;
      const auto [z, h] = m.forward(tape, tape.constant(x));
      require<ShapeError>(tape.value(z).shape() == y.shape(), "stage ", l, ": predicted features ",
                          shape_str(tape.value(z).shape()), " vs target ", shape_str(y.shape()));
      if (!calibrated) {
        const double e_pos = patch_energy(tape.value(h), 1);
        sgd = normalized_sgd(hyper.sgd, positions(y), e_pos * static_cast<double>(m.kernel_area()));
        if (m.fam) {
          fam_sgd = normalized_sgd(hyper.sgd, positions(y), patch_energy(x, 1) * max_input_channel_norm(m));
          fam_sgd.lr *= hyper.fam_lr_scale;
        }
        calibrated = true;
      }
      const double loss = tape.l2_loss(z, y);
      require_finite_loss(loss, "layer-wise");
      tape.backward();
      SgdConfig step = sgd;
      step.lr *= lr_scale;
      sgd_step(params, step);
      if (m.fam) {
        SgdConfig fstep = fam_sgd;
        fstep.lr *= lr_scale;
        std::vector<Param*> fp{&*m.fam};
        sgd_step(fp, fstep);
      }
      sum += loss * static_cast<double>(idx.size());
    }
    res.loss_curve.push_back(sum / static_cast<double>(count));
    lr_scale *= hyper.lr_decay;
  }
  res.final_loss = stage_loss(m, data, count);
  res.weight = std::move(m.weight);
  res.bias = std::move(m.bias);
  res.fam = std::move(m.fam);
  return res;
}

struct LayerwiseResult {
  Network student;
  std::vector<StageResult> stages;     // layers 1..L-1
  std::vector<LayerAmalgam> amalgams;  // layers 1..L-1
};

// Layer-wise driver: for l = 1..L-1 amalgamate the teachers' layer-l
// features, then fit the student's layer l from F_a^{l-1} (raw images at
// l = 1) to F_a^l. The classifier layer keeps its random init.
inline LayerwiseResult run_layerwise(const FeatureBank& bank, const AmalgamPlan& plan, const NetworkSpec& student_spec,
                                     bool fam_on, const TrainHyper& ae_hyper, const TrainHyper& stage_hyper,
                                     std::uint64_t seed) {
  const auto shapes = student_spec.shapes();
  const std::size_t L = student_spec.depth();
  require<ConfigError>(plan.per_layer_out.size() == L - 1, "plan covers ", plan.per_layer_out.size(),
                       " layers, student has ", L - 1, " hidden layers");
  for (std::size_t l = 1; l < L; ++l)
    require<ConfigError>(plan.per_layer_out[l - 1] == student_spec.layer(l).out_ch, "plan width ",
                         plan.per_layer_out[l - 1], " at layer ", l, " does not match student width ",
                         student_spec.layer(l).out_ch);
  LayerwiseResult out;
  out.student = build_network(student_spec, Rng(seed, 0x73747564));
  const Rng stage_init(seed, 0x7374676);
  out.amalgams.reserve(L - 1);
  for (std::size_t l = 1; l < L; ++l) {
    TrainHyper ah = ae_hyper;
    ah.seed = ae_hyper.seed * 7919ULL + l;
    const auto widths = plan.mode == AmalgamMode::ifa ? plan.merge_widths[l - 1]
                                                      : std::vector<std::size_t>{plan.per_layer_out[l - 1]};
    out.amalgams.push_back(train_layer_amalgam(bank.layer(l), bank.count(), bank.widths(l), plan.mode, widths, ah));
    const LayerAmalgam* cur = &out.amalgams.back();
    const LayerAmalgam* prev = l > 1 ? &out.amalgams[l - 2] : nullptr;
    StagePairFn data = [&bank, cur, prev, l](std::span<const std::size_t> idx) {
      Tensor input = l == 1 ? bank.transfer().images.gather(idx) : prev->encode(bank.features(idx, l - 1));
      return std::make_pair(std::move(input), cur->encode(bank.features(idx, l)));
    };
    TrainHyper sh = stage_hyper;
    sh.seed = stage_hyper.seed * 104729ULL + l;
    const NonParam pre = l > 1 ? student_spec.layer(l - 1).after : NonParam{};
    StageResult sr = layerwise_stage(l, data, bank.count(), student_spec.layer(l), pre, shapes.in_features[l - 1],
                                     fam_on && l > 1, sh, stage_init);
    LayerParams& lp = out.student.layer(l);
    lp.weight = sr.weight;
    lp.bias = sr.bias;
    if (sr.fam) lp.fam = *sr.fam;
    out.stages.push_back(std::move(sr));
  }
  return out;
}

}  // namespace kamal
