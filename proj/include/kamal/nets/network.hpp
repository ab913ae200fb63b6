#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/optim.hpp"
#include "kamal/core/rng.hpp"
#include "kamal/core/tape.hpp"
#include "kamal/nets/spec.hpp"

namespace kamal {

struct LayerParams {
  Param weight;  // conv: [out,in,k,k]; fc: [out,in_features]
  Param bias;    // [out]
  // Feature adaption: square 1x1 map applied to this layer's input before
  // the previous layer's activation/pool. Never present on layer 1.
  std::optional<Param> fam;
};

// Instantiated network. Layers are 1-based in the public API.
struct Network {
  NetworkSpec spec;
  std::vector<LayerParams> layers;

  [[nodiscard]] std::size_t depth() const { return layers.size(); }
  [[nodiscard]] LayerParams& layer(std::size_t l) { return layers.at(l - 1); }
  [[nodiscard]] const LayerParams& layer(std::size_t l) const { return layers.at(l - 1); }

  [[nodiscard]] bool has_fam() const {
    for (const auto& lp : layers)
      if (lp.fam) return true;
    return false;
  }

  // Stable order: per layer weight, bias, fam.
  [[nodiscard]] std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& lp : layers) {
      out.push_back(&lp.weight);
      out.push_back(&lp.bias);
      if (lp.fam) out.push_back(&*lp.fam);
    }
    return out;
  }
  [[nodiscard]] std::vector<const Param*> params() const {
    std::vector<const Param*> out;
    for (const auto& lp : layers) {
      out.push_back(&lp.weight);
      out.push_back(&lp.bias);
      if (lp.fam) out.push_back(&*lp.fam);
    }
    return out;
  }

  // Bitwise equality of spec and every parameter value.
  [[nodiscard]] bool same_values(const Network& o) const {
    if (!(spec == o.spec) || layers.size() != o.layers.size()) return false;
    const auto a = params();
    const auto b = o.params();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i]->name != b[i]->name || !(a[i]->value == b[i]->value)) return false;
    return true;
  }
};

inline std::string param_name(std::size_t layer, const char* what) {
  return "layer" + std::to_string(layer) + "." + what;
}

inline Shape weight_shape(const LayerSpec& ls, std::size_t in_features) {
  if (ls.kind == LayerKind::conv) return {ls.out_ch, ls.in_ch, ls.kernel, ls.kernel};
  return {ls.out_ch, in_features};
}

// Weights uniform in +-sqrt(6/fan_in), biases zero; layer l draws from
// rng.split(l) so layers are independent of each other's sizes.
inline Network build_network(const NetworkSpec& spec, const Rng& rng) {
  const auto shapes = spec.shapes();
  Network net;
  net.spec = spec;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& ls = spec.layers[i];
    const std::size_t l = i + 1;
    const std::size_t fan_in = shapes.in_features[i];
    const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
    Tensor w(weight_shape(ls, fan_in));
    Rng r = rng.split(l);
    for (auto& v : w.data()) v = r.uniform(-bound, bound);
    net.layers.push_back(LayerParams{Param(param_name(l, "weight"), std::move(w)),
                                     Param(param_name(l, "bias"), Tensor({ls.out_ch})), std::nullopt});
  }
  return net;
}

inline Tensor identity_matrix(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

// Inserts identity-initialised FAM modules in front of layers 2..L-1
// (every layer that a layer-wise stage learns, except the first).
inline void add_fam(Network& net) {
  for (std::size_t l = 2; l + 1 <= net.depth(); ++l) {
    const std::size_t ch = net.spec.layer(l).in_ch;
    net.layer(l).fam = Param(param_name(l, "fam"), identity_matrix(ch));
  }
}

// Closed form: conv out*in*k^2 + out, fc out*in_features + out, FAM in_ch^2.
inline std::size_t count_params(const NetworkSpec& spec, bool with_fam) {
  const auto shapes = spec.shapes();
  std::size_t n = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& ls = spec.layers[i];
    n += ls.out_ch * shapes.in_features[i] + ls.out_ch;
    if (with_fam && i >= 1 && i + 1 < spec.layers.size()) n += ls.in_ch * ls.in_ch;
  }
  return n;
}

inline std::size_t count_params(const Network& net) {
  std::size_t n = 0;
  for (const Param* p : net.params()) n += p->value.size();
  return n;
}

// Outputs of one recorded forward pass.
struct Trace {
  std::vector<Var> raw;  // raw[l-1]: layer l output before activation/pool
  Var scores;
};

namespace detail {

template <typename Bind>
Trace forward_impl(Tape& tape, const NetworkSpec& spec, std::span<const LayerParams> layers, Var x,
                   std::size_t last_layer, Bind&& bind) {
  Trace tr;
  Var h = x;
  const std::size_t L = spec.depth();
  for (std::size_t l = 1; l <= last_layer; ++l) {
    const LayerSpec& ls = spec.layer(l);
    const LayerParams& lp = layers[l - 1];
    Var z;
    if (ls.kind == LayerKind::conv) {
      z = tape.conv2d(h, bind(lp.weight), bind(lp.bias), ls.stride, ls.pad);
    } else {
      z = tape.linear(tape.flatten(h), bind(lp.weight), bind(lp.bias));
    }
    tr.raw.push_back(z);
    if (l == L) {
      tr.scores = z;
      break;
    }
    Var a = z;
    if (l < L && layers[l].fam) a = tape.conv1x1(a, bind(*layers[l].fam));
    h = tape.nonparam(a, ls.after);
  }
  return tr;
}

}  // namespace detail

// Trainable pass: parameters become gradient-receiving tape leaves.
inline Trace forward(Tape& tape, Network& net, Var x, std::size_t last_layer = 0) {
  if (last_layer == 0) last_layer = net.depth();
  return detail::forward_impl(tape, net.spec, net.layers, x, last_layer,
                              [&tape](const Param& p) { return tape.param(const_cast<Param&>(p)); });
}

// Frozen pass: parameters enter the tape as constants.
inline Trace forward(Tape& tape, const Network& net, Var x, std::size_t last_layer = 0) {
  if (last_layer == 0) last_layer = net.depth();
  return detail::forward_impl(tape, net.spec, net.layers, x, last_layer,
                              [&tape](const Param& p) { return tape.constant(p.value); });
}

inline void check_input(const Network& net, const Tensor& x) {
  const auto& in = net.spec.input;
  require<ShapeError>(x.rank() == 4 && x.dim(1) == in[0] && x.dim(2) == in[1] && x.dim(3) == in[2],
                      "network input ", shape_str(x.shape()), " does not match spec [B,", in[0], ",", in[1], ",",
                      in[2], "]");
}

struct Collected {
  std::map<std::size_t, Tensor> features;  // layer -> raw conv/fc output
  Tensor scores;                           // [B, num_classes], no softmax
};

// Runs the whole network, returning the requested raw layer outputs and
// the score vectors. Never mutates the network.
inline Collected forward_collect(const Network& net, const Tensor& x, std::span<const std::size_t> taps = {}) {
  check_input(net, x);
  for (auto l : taps)
    require<ShapeError>(l >= 1 && l <= net.depth(), "feature tap ", l, " outside [1,", net.depth(), "]");
  Tape tape;
  const Trace tr = forward(tape, net, tape.constant(x));
  Collected out;
  for (auto l : taps) out.features[l] = tape.value(tr.raw[l - 1]);
  out.scores = tape.value(tr.scores);
  return out;
}

// Raw output of layer `layer` only, stopping the pass there.
inline Tensor layer_output(const Network& net, const Tensor& x, std::size_t layer) {
  check_input(net, x);
  require<ShapeError>(layer >= 1 && layer <= net.depth(), "feature tap ", layer, " outside [1,", net.depth(), "]");
  Tape tape;
  const Trace tr = forward(tape, net, tape.constant(x), layer);
  return tape.value(tr.raw[layer - 1]);
}

inline Tensor scores(const Network& net, const Tensor& x) { return forward_collect(net, x).scores; }

// Scores over a large set, evaluated in chunks.
inline Tensor scores_batched(const Network& net, const Tensor& x, std::size_t chunk = 256) {
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < x.dim(0); b += chunk) parts.push_back(scores(net, x.slice(b, std::min(chunk, x.dim(0) - b))));
  return concat_batches(parts);
}

}  // namespace kamal
