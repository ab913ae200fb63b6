#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/ops.hpp"
#include "kamal/core/optim.hpp"
#include "kamal/core/rng.hpp"
#include "kamal/core/tape.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/nets/train.hpp"

namespace kamal {

// Features for a list of transfer-set sample indices, [n,C,H,W] or [n,C].
using FeatureStream = std::function<Tensor(std::span<const std::size_t>)>;

inline FeatureStream stream_of(const Tensor& all) {
  return [&all](std::span<const std::size_t> idx) { return all.gather(idx); };
}

// Spatial positions per sample (1 for feature vectors).
inline std::size_t positions(const Tensor& t) { return t.rank() == 4 ? t.dim(2) * t.dim(3) : 1; }

// Mean squared norm of the vector a weight row sees at one output position:
// channel energy per position times the kernel area.
inline double patch_energy(const Tensor& x, std::size_t kernel_area) {
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  return acc * static_cast<double>(kernel_area) / static_cast<double>(x.dim(0) * positions(x));
}

// Normalised step for the feature-regression stages: the configured lr is
// divided by (output positions x input patch energy), so one lr value is
// stable across layers whose feature scales differ by orders of magnitude.
inline SgdConfig normalized_sgd(const SgdConfig& base, std::size_t out_positions, double energy) {
  SgdConfig s = base;
  const double scale = static_cast<double>(out_positions) * std::max(energy, 1e-8);
  s.lr = static_cast<float>(base.lr / scale);
  return s;
}

// Linear 1x1-conv autoencoder: enc [cout,cin], dec [cin,cout], no bias and
// no nonlinearity.
struct ChannelAutoencoder {
  Param enc;
  Param dec;
  std::size_t cin = 0;
  std::size_t cout = 0;

  static ChannelAutoencoder make(std::size_t cin, std::size_t cout, const Rng& rng) {
    require<ConfigError>(cout >= 1 && cout < cin, "autoencoder needs 1 <= cout < cin for compression, got cin=", cin,
                         " cout=", cout);
    ChannelAutoencoder ae;
    ae.cin = cin;
    ae.cout = cout;
    Tensor e({cout, cin}), d({cin, cout});
    Rng re = rng.split(1), rd = rng.split(2);
    const float be = static_cast<float>(std::sqrt(3.0 / static_cast<double>(cin)));
    const float bd = static_cast<float>(std::sqrt(3.0 / static_cast<double>(cout)));
    for (auto& v : e.data()) v = re.uniform(-be, be);
    for (auto& v : d.data()) v = rd.uniform(-bd, bd);
    ae.enc = Param("enc", std::move(e));
    ae.dec = Param("dec", std::move(d));
    return ae;
  }

  [[nodiscard]] std::vector<Param*> params() { return {&enc, &dec}; }
};

inline Tensor encode(const ChannelAutoencoder& ae, const Tensor& f) {
  require<ShapeError>(f.rank() >= 2 && f.dim(1) == ae.cin, "encode: input ", shape_str(f.shape()), " has ",
                      f.rank() >= 2 ? f.dim(1) : 0, " channels, autoencoder expects ", ae.cin);
  return ops::conv1x1(f, ae.enc.value);
}

inline Tensor decode(const ChannelAutoencoder& ae, const Tensor& fa) {
  require<ShapeError>(fa.rank() >= 2 && fa.dim(1) == ae.cout, "decode: input ", shape_str(fa.shape()),
                      " does not have ", ae.cout, " channels");
  return ops::conv1x1(fa, ae.dec.value);
}

// 1/2 ||F||^2 per sample.
inline double feature_energy(const Tensor& f) {
  double acc = 0.0;
  for (float v : f.data()) acc += static_cast<double>(v) * v;
  return 0.5 * acc / static_cast<double>(f.dim(0));
}

struct AutoencoderResult {
  ChannelAutoencoder ae;
  double initial_loss = 0.0;  // full pass before training
  double final_loss = 0.0;    // full pass after training
  double energy = 0.0;        // 1/2 ||F||^2 per sample over the stream
  std::vector<double> curve;  // running mean loss per epoch
};

// Reconstruction loss and energy of `ae` over the whole stream.
inline std::pair<double, double> reconstruction_loss(const ChannelAutoencoder& ae, const FeatureStream& stream,
                                                     std::size_t count, std::size_t chunk = 128) {
  double loss = 0.0, energy = 0.0;
  for (const auto& idx : batches(count, chunk, 0, 0, false)) {
    const Tensor f = stream(idx);
    const double n = static_cast<double>(idx.size());
    loss += ops::l2_loss(decode(ae, encode(ae, f)), f) * n;
    energy += feature_energy(f) * n;
  }
  return {loss / static_cast<double>(count), energy / static_cast<double>(count)};
}

// Minimises 1/2 ||dec(enc(F)) - F||^2 (per-sample mean) by SGD over the
// stream. hyper.sgd.lr is a normalised step (see normalized_sgd).
inline AutoencoderResult train_autoencoder(const FeatureStream& stream, std::size_t count, std::size_t cin,
                                           std::size_t cout, const TrainHyper& hyper) {
  require<ConfigError>(count >= 1, "autoencoder stream is empty");
  require<ConfigError>(cout < cin, "autoencoder cout ", cout, " must be < cin ", cin, " (compression)");
  AutoencoderResult res{ChannelAutoencoder::make(cin, cout, Rng(hyper.seed, 0x6165)), 0, 0, 0, {}};
  std::tie(res.initial_loss, res.energy) = reconstruction_loss(res.ae, stream, count);
  auto params = res.ae.params();
  SgdConfig sgd;
  bool calibrated = false;
  float lr_scale = 1.0f;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    double sum = 0.0;
    for (const auto& idx : batches(count, hyper.batch_size, hyper.seed, epoch, true)) {
      const Tensor f = stream(idx);
      require<ShapeError>(f.dim(1) == cin, "autoencoder stream yields ", f.dim(1), " channels, expected ", cin);
      if (!calibrated) {
        sgd = normalized_sgd(hyper.sgd, positions(f), patch_energy(f, 1));
        calibrated = true;
      }
      Tape tape;
      const Var x = tape.constant(f);
      const Var z = tape.conv1x1(x, tape.param(res.ae.enc));
      const Var r = tape.conv1x1(z, tape.param(res.ae.dec));
      const double loss = tape.l2_loss(r, f);
      require_finite_loss(loss, "autoencoder");
      tape.backward();
      SgdConfig step = sgd;
      step.lr *= lr_scale;
      sgd_step(params, step);
      sum += loss * static_cast<double>(idx.size());
    }
    res.curve.push_back(sum / static_cast<double>(count));
    lr_scale *= hyper.lr_decay;
  }
  res.final_loss = reconstruction_loss(res.ae, stream, count).first;
  return res;
}

}  // namespace kamal
