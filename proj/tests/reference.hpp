#pragma once

// Naive double-precision forward implementations, written independently of
// the library kernels. Used as the finite-difference oracle and to check
// forward results.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "kamal/core/ops.hpp"
#include "kamal/core/tensor.hpp"
#include "kamal/nets/network.hpp"

namespace kamal::ref {

struct D {
  Shape shape;
  std::vector<double> v;

  D() = default;
  explicit D(Shape s) : shape(std::move(s)), v(shape_size(shape), 0.0) {}
  explicit D(const Tensor& t) : shape(t.shape()), v(t.data().begin(), t.data().end()) {}
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape.at(i); }
  double& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return v[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  [[nodiscard]] double at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return v[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
};

inline D conv2d(const D& x, const D& w, const D& b, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  D y({B, Co, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.v[co];
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t q = 0; q < k; ++q) {
                const long hi = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long wi = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (hi < 0 || wi < 0 || hi >= static_cast<long>(H) || wi >= static_cast<long>(W)) continue;
                acc += w.at(co, ci, u, q) * x.at(n, ci, static_cast<std::size_t>(hi), static_cast<std::size_t>(wi));
              }
          y.at(n, co, i, j) = acc;
        }
  return y;
}

// w [Co,Ci]; x rank 2 or 4.
inline D conv1x1(const D& x, const D& w) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  const std::size_t hw = x.shape.size() == 4 ? x.dim(2) * x.dim(3) : 1;
  Shape s = x.shape;
  s[1] = Co;
  D y(s);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < Co; ++c)
      for (std::size_t p = 0; p < hw; ++p) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < Ci; ++ci) acc += w.v[c * Ci + ci] * x.v[(n * Ci + ci) * hw + p];
        y.v[(n * Co + c) * hw + p] = acc;
      }
  return y;
}

inline D linear(const D& x, const D& w, const D& b) {
  const std::size_t B = x.dim(0), Din = x.v.size() / B, M = w.dim(0);
  D y({B, M});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t m = 0; m < M; ++m) {
      double acc = b.v[m];
      for (std::size_t d = 0; d < Din; ++d) acc += w.v[m * Din + d] * x.v[n * Din + d];
      y.v[n * M + m] = acc;
    }
  return y;
}

inline D relu(D x) {
  for (auto& e : x.v) e = std::max(e, 0.0);
  return x;
}

inline D maxpool(const D& x, std::size_t k, std::size_t s) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
  D y({B, C, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double m = -HUGE_VAL;
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t q = 0; q < k; ++q) m = std::max(m, x.at(n, c, i * s + u, j * s + q));
          y.at(n, c, i, j) = m;
        }
  return y;
}

inline D nonparam(D x, const NonParam& np) {
  if (np.activation == Activation::relu) x = relu(std::move(x));
  if (np.pools()) x = maxpool(x, np.pool_kernel, np.pool_stride);
  return x;
}

inline D softmax(const D& x, double T) {
  const std::size_t B = x.dim(0), M = x.dim(1);
  D y(x.shape);
  for (std::size_t n = 0; n < B; ++n) {
    double mx = -HUGE_VAL, sum = 0.0;
    for (std::size_t m = 0; m < M; ++m) mx = std::max(mx, x.v[n * M + m] / T);
    for (std::size_t m = 0; m < M; ++m) sum += std::exp(x.v[n * M + m] / T - mx);
    for (std::size_t m = 0; m < M; ++m) y.v[n * M + m] = std::exp(x.v[n * M + m] / T - mx) / sum;
  }
  return y;
}

inline double l2(const D& a, const D& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) acc += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  return 0.5 * acc / static_cast<double>(a.dim(0));
}

inline double cross_entropy(const D& z, std::span<const int> labels) {
  const D p = softmax(z, 1.0);
  const std::size_t M = z.dim(1);
  double acc = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) acc -= std::log(p.v[n * M + static_cast<std::size_t>(labels[n])]);
  return acc / static_cast<double>(labels.size());
}

inline double soft_cross_entropy(const D& z, const D& q, std::span<const ops::Block> blocks, double T) {
  const std::size_t B = z.dim(0), M = z.dim(1);
  double acc = 0.0;
  for (const auto& blk : blocks) {
    D zb({B, blk.width});
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m) zb.v[n * blk.width + m] = z.v[n * M + blk.begin + m];
    const D p = softmax(zb, T);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m)
        acc -= T * T * q.v[n * M + blk.begin + m] * std::log(p.v[n * blk.width + m]);
  }
  return acc / static_cast<double>(B);
}

// Whole-network forward following the layer semantics: layer, then the
// next layer's FAM (if any), then activation/pool.
inline D forward(const Network& net, const Tensor& x) {
  D h(x);
  const std::size_t L = net.depth();
  for (std::size_t l = 1; l <= L; ++l) {
    const LayerSpec& ls = net.spec.layer(l);
    const LayerParams& lp = net.layer(l);
    D z = ls.kind == LayerKind::conv
              ? conv2d(h, D(lp.weight.value), D(lp.bias.value), ls.stride, ls.pad)
              : linear(h, D(lp.weight.value), D(lp.bias.value));
    if (l == L) return z;
    if (net.layer(l + 1).fam) z = conv1x1(z, D(net.layer(l + 1).fam->value));
    h = nonparam(std::move(z), ls.after);
  }
  return h;
}

}  // namespace kamal::ref
