#pragma once

// Forward kernels and their analytic transposes. Every backward function
// accumulates (+=) into the gradient buffers it is handed, so callers may
// sum contributions from several uses of one tensor.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

enum class Activation { none, relu };

// Parameter-free stage that follows a layer: activation, then pooling.
struct NonParam {
  Activation activation = Activation::none;
  std::size_t pool_kernel = 0;  // 0 disables pooling
  std::size_t pool_stride = 0;

  [[nodiscard]] bool pools() const { return pool_kernel > 0; }
  [[nodiscard]] bool identity() const { return activation == Activation::none && !pools(); }
  friend bool operator==(const NonParam&, const NonParam&) = default;
};

namespace ops {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

namespace detail {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  [[nodiscard]] std::size_t patch() const { return cin * k * k; }
  [[nodiscard]] std::size_t out_hw() const { return ho * wo; }
  [[nodiscard]] bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeom conv_geom(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  require<ShapeError>(x.rank() == 4, "conv2d input must be rank 4 [B,C,H,W], got ", shape_str(x.shape()));
  require<ShapeError>(w.rank() == 4 && w.dim(2) == w.dim(3),
                      "conv2d weight must be [Cout,Cin,k,k], got ", shape_str(w.shape()));
  require<ShapeError>(w.dim(1) == x.dim(1), "conv2d channel mismatch: input ", shape_str(x.shape()),
                      " has ", x.dim(1), " channels, weight ", shape_str(w.shape()), " expects ", w.dim(1));
  require<ShapeError>(stride >= 1, "conv2d stride must be >= 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  g.ho = conv_out_extent(g.h, g.k, stride, pad);
  g.wo = conv_out_extent(g.w, g.k, stride, pad);
  require<ShapeError>(g.ho >= 1 && g.wo >= 1, "conv2d output extent is non-positive for input ",
                      shape_str(x.shape()), ", kernel ", g.k, ", stride ", stride, ", pad ", pad);
  return g;
}

// cols[(c*k+u)*k+v, i*wo+j] = x[c, i*s+u-pad, j*s+v-pad] (zero outside).
inline void im2col(const float* x, const ConvGeom& g, float* cols) {
  const auto ho = g.ho, wo = g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        float* row = cols + ((c * g.k + u) * g.k + v) * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
          const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t j = 0; j < wo; ++j) {
            const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = hi >= 0 && wi >= 0 && hi < static_cast<std::ptrdiff_t>(g.h) &&
                                wi < static_cast<std::ptrdiff_t>(g.w);
            row[i * wo + j] = inside ? x[(c * g.h + static_cast<std::size_t>(hi)) * g.w + static_cast<std::size_t>(wi)] : 0.0f;
          }
        }
      }
}

inline void col2im_add(const float* cols, const ConvGeom& g, float* dx) {
  const auto ho = g.ho, wo = g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t u = 0; u < g.k; ++u)
      for (std::size_t v = 0; v < g.k; ++v) {
        const float* row = cols + ((c * g.k + u) * g.k + v) * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
          const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
          if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t j = 0; j < wo; ++j) {
            const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
            if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(hi)) * g.w + static_cast<std::size_t>(wi)] += row[i * wo + j];
          }
        }
      }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  require<ShapeError>(a.shape() == b.shape(), what, ": shape mismatch ", shape_str(a.shape()), " vs ",
                      shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- conv2d

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const auto g = detail::conv_geom(x, w, stride, pad);
  require<ShapeError>(b.rank() == 1 && b.dim(0) == g.cout, "conv2d bias must be [", g.cout, "], got ",
                      shape_str(b.shape()));
  Tensor y({g.batch, g.cout, g.ho, g.wo});
  std::vector<float> cols(g.pointwise() ? 0 : g.patch() * g.out_hw());
  const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
  for (std::size_t n = 0; n < g.batch; ++n) {
    const float* xn = x.ptr() + n * g.cin * g.h * g.w;
    if (!g.pointwise()) detail::im2col(xn, g, cols.data());
    const ConstMatMap cm(g.pointwise() ? xn : cols.data(), static_cast<Eigen::Index>(g.patch()),
                         static_cast<Eigen::Index>(g.out_hw()));
    MatMap ym(y.ptr() + n * g.cout * g.out_hw(), static_cast<Eigen::Index>(g.cout),
              static_cast<Eigen::Index>(g.out_hw()));
    ym.noalias() = wm * cm;
    for (std::size_t co = 0; co < g.cout; ++co) {
      float* row = ym.data() + co * g.out_hw();
      for (std::size_t i = 0; i < g.out_hw(); ++i) row[i] += b[co];
    }
  }
  return y;
}

// Any of dx/dw/db may be null when that gradient is not needed.
inline void conv2d_backward(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                            const Tensor& dy, Tensor* dx, Tensor* dw, Tensor* db) {
  const auto g = detail::conv_geom(x, w, stride, pad);
  require<ShapeError>(dy.shape() == Shape({g.batch, g.cout, g.ho, g.wo}), "conv2d_backward: dy shape ",
                      shape_str(dy.shape()));
  std::vector<float> cols(g.pointwise() ? 0 : g.patch() * g.out_hw());
  std::vector<float> dcols(g.patch() * g.out_hw());
  const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
  for (std::size_t n = 0; n < g.batch; ++n) {
    const float* xn = x.ptr() + n * g.cin * g.h * g.w;
    const ConstMatMap dym(dy.ptr() + n * g.cout * g.out_hw(), static_cast<Eigen::Index>(g.cout),
                          static_cast<Eigen::Index>(g.out_hw()));
    if (dw) {
      if (!g.pointwise()) detail::im2col(xn, g, cols.data());
      const ConstMatMap cm(g.pointwise() ? xn : cols.data(), static_cast<Eigen::Index>(g.patch()),
                           static_cast<Eigen::Index>(g.out_hw()));
      MatMap dwm(dw->ptr(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
      dwm.noalias() += dym * cm.transpose();
    }
    if (db) {
      for (std::size_t co = 0; co < g.cout; ++co) {
        float acc = 0.0f;
        const float* row = dym.data() + co * g.out_hw();
        for (std::size_t i = 0; i < g.out_hw(); ++i) acc += row[i];
        (*db)[co] += acc;
      }
    }
    if (dx) {
      float* dxn = dx->ptr() + n * g.cin * g.h * g.w;
      if (g.pointwise()) {
        MatMap dxm(dxn, static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(g.out_hw()));
        dxm.noalias() += wm.transpose() * dym;
      } else {
        MatMap dcm(dcols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.out_hw()));
        dcm.noalias() = wm.transpose() * dym;
        detail::col2im_add(dcols.data(), g, dxn);
      }
    }
  }
}

// --------------------------------------------------------------- conv1x1

// Channel mixing y[b,c,...] = sum_c' w[c,c'] x[b,c',...]. Accepts rank-4
// feature maps or rank-2 [B,C] feature vectors.
inline Tensor conv1x1(const Tensor& x, const Tensor& w) {
  require<ShapeError>(x.rank() == 4 || x.rank() == 2, "conv1x1 input must be rank 2 or 4, got ",
                      shape_str(x.shape()));
  require<ShapeError>(w.rank() == 2 && w.dim(1) == x.dim(1), "conv1x1 channel mismatch: input ",
                      shape_str(x.shape()), " vs weight ", shape_str(w.shape()));
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  Shape s = x.shape();
  s[1] = cout;
  Tensor y(s);
  const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
  for (std::size_t n = 0; n < batch; ++n) {
    const ConstMatMap xm(x.ptr() + n * cin * hw, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw));
    MatMap ym(y.ptr() + n * cout * hw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    ym.noalias() = wm * xm;
  }
  return y;
}

inline void conv1x1_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
  for (std::size_t n = 0; n < batch; ++n) {
    const ConstMatMap dym(dy.ptr() + n * cout * hw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    if (dw) {
      const ConstMatMap xm(x.ptr() + n * cin * hw, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw));
      MatMap dwm(dw->ptr(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
      dwm.noalias() += dym * xm.transpose();
    }
    if (dx) {
      MatMap dxm(dx->ptr() + n * cin * hw, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(hw));
      dxm.noalias() += wm.transpose() * dym;
    }
  }
}

// ---------------------------------------------------------------- linear

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require<ShapeError>(x.rank() == 2, "linear input must be rank 2 [B,D], got ", shape_str(x.shape()));
  require<ShapeError>(w.rank() == 2 && w.dim(1) == x.dim(1), "linear shape mismatch: input ",
                      shape_str(x.shape()), " vs weight ", shape_str(w.shape()));
  require<ShapeError>(b.rank() == 1 && b.dim(0) == w.dim(0), "linear bias must be [", w.dim(0), "], got ",
                      shape_str(b.shape()));
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({batch, out});
  const ConstMatMap xm(x.ptr(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in));
  const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  MatMap ym(y.ptr(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out));
  ym.noalias() = xm * wm.transpose();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t m = 0; m < out; ++m) y.at(n, m) += b[m];
  return y;
}

inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw,
                            Tensor* db) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  const ConstMatMap dym(dy.ptr(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out));
  if (dw) {
    const ConstMatMap xm(x.ptr(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in));
    MatMap dwm(dw->ptr(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    dwm.noalias() += dym.transpose() * xm;
  }
  if (db) {
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t m = 0; m < out; ++m) (*db)[m] += dy.at(n, m);
  }
  if (dx) {
    const ConstMatMap wm(w.ptr(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    MatMap dxm(dx->ptr(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(in));
    dxm.noalias() += dym * wm;
  }
}

// ------------------------------------------------------- relu / maxpool

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return y;
}

inline void relu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0f) dx[i] += dy[i];
}

struct PoolResult {
  Tensor y;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Windows do not pad; ties resolve to the first maximal element in row-major order.
inline PoolResult maxpool(const Tensor& x, std::size_t k, std::size_t s) {
  require<ShapeError>(x.rank() == 4, "maxpool input must be rank 4, got ", shape_str(x.shape()));
  require<ShapeError>(k >= 1 && s >= 1, "maxpool kernel/stride must be >= 1");
  require<ShapeError>(k <= x.dim(2) && k <= x.dim(3), "maxpool window ", k, "x", k,
                      " larger than input ", shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t ho = (H - k) / s + 1, wo = (W - k) / s + 1;
  PoolResult r{Tensor({B, C, ho, wo}), std::vector<std::size_t>(B * C * ho * wo)};
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j, ++o) {
        std::size_t best = base + (i * s) * W + j * s;
        float bv = x[best];
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const std::size_t idx = base + (i * s + u) * W + (j * s + v);
            if (x[idx] > bv) {
              bv = x[idx];
              best = idx;
            }
          }
        r.y[o] = bv;
        r.argmax[o] = best;
      }
  }
  return r;
}

inline void maxpool_backward(const std::vector<std::size_t>& argmax, const Tensor& dy, Tensor& dx) {
  for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
}

inline Shape nonparam_shape(const Shape& in, const NonParam& np) {
  if (!np.pools()) return in;
  require<ShapeError>(in.size() == 4, "pooling needs a rank-4 input, got ", shape_str(in));
  require<ShapeError>(np.pool_kernel <= in[2] && np.pool_kernel <= in[3], "maxpool window ",
                      np.pool_kernel, " larger than input ", shape_str(in));
  return {in[0], in[1], (in[2] - np.pool_kernel) / np.pool_stride + 1, (in[3] - np.pool_kernel) / np.pool_stride + 1};
}

// Activation first, then pooling.
inline Tensor nonparam(const Tensor& x, const NonParam& np) {
  Tensor a = np.activation == Activation::relu ? relu(x) : x;
  if (!np.pools()) return a;
  return maxpool(a, np.pool_kernel, np.pool_stride).y;
}

// ---------------------------------------------------------------- softmax

inline Tensor softmax(const Tensor& x, float temperature = 1.0f) {
  require<ConfigError>(temperature > 0.0f, "softmax temperature must be positive");
  require<ShapeError>(x.rank() == 2, "softmax expects [B,M], got ", shape_str(x.shape()));
  require<NumericError>(x.all_finite(), "softmax input contains a non-finite element");
  const std::size_t B = x.dim(0), M = x.dim(1);
  Tensor y(x.shape());
  for (std::size_t n = 0; n < B; ++n) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t m = 0; m < M; ++m) mx = std::max(mx, x.at(n, m) / temperature);
    double sum = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const float e = std::exp(x.at(n, m) / temperature - mx);
      y.at(n, m) = e;
      sum += e;
    }
    for (std::size_t m = 0; m < M; ++m) y.at(n, m) = static_cast<float>(y.at(n, m) / sum);
  }
  return y;
}

// dx = (1/T) * y * (dy - <dy, y>) row-wise.
inline void softmax_backward(const Tensor& y, float temperature, const Tensor& dy, Tensor& dx) {
  const std::size_t B = y.dim(0), M = y.dim(1);
  for (std::size_t n = 0; n < B; ++n) {
    double dot = 0.0;
    for (std::size_t m = 0; m < M; ++m) dot += static_cast<double>(dy.at(n, m)) * y.at(n, m);
    for (std::size_t m = 0; m < M; ++m)
      dx.at(n, m) += static_cast<float>(y.at(n, m) * (dy.at(n, m) - dot) / temperature);
  }
}

// ------------------------------------------------------------------ losses

// Per-sample mean of 1/2 ||a - b||^2 (divided by the leading extent only).
inline double l2_loss(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "l2_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return 0.5 * acc / static_cast<double>(a.dim(0));
}

inline void l2_loss_backward(const Tensor& a, const Tensor& b, float seed, Tensor& da) {
  const float scale = seed / static_cast<float>(a.dim(0));
  for (std::size_t i = 0; i < a.size(); ++i) da[i] += scale * (a[i] - b[i]);
}

// Mean softmax cross-entropy against integer labels; optionally writes the
// logits gradient (softmax - onehot) / B scaled by seed.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits = nullptr,
                            float seed = 1.0f) {
  require<ShapeError>(logits.rank() == 2 && logits.dim(0) == labels.size(),
                      "cross_entropy: logits ", shape_str(logits.shape()), " vs ", labels.size(), " labels");
  const std::size_t B = logits.dim(0), M = logits.dim(1);
  const Tensor p = softmax(logits, 1.0f);
  double loss = 0.0;
  for (std::size_t n = 0; n < B; ++n) {
    require<ConfigError>(labels[n] >= 0 && static_cast<std::size_t>(labels[n]) < M, "label ", labels[n],
                         " outside [0,", M, ")");
    loss -= std::log(std::max(static_cast<double>(p.at(n, static_cast<std::size_t>(labels[n]))), 1e-30));
  }
  if (dlogits) {
    const float scale = seed / static_cast<float>(B);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < M; ++m)
        dlogits->at(n, m) += scale * (p.at(n, m) - (static_cast<std::size_t>(labels[n]) == m ? 1.0f : 0.0f));
  }
  return loss / static_cast<double>(B);
}

// Contiguous column range [begin, begin+width) of a score vector.
struct Block {
  std::size_t begin = 0;
  std::size_t width = 0;
};

// Blockwise softened cross-entropy, T^2 * sum_blocks CE(softmax(z_blk/T), q_blk),
// averaged over the batch. `targets` already hold per-block probabilities.
inline double soft_cross_entropy(const Tensor& logits, const Tensor& targets, std::span<const Block> blocks,
                                 float temperature, Tensor* dlogits = nullptr, float seed = 1.0f) {
  detail::require_same_shape(logits, targets, "soft_cross_entropy");
  require<ConfigError>(temperature > 0.0f, "temperature must be positive");
  const std::size_t B = logits.dim(0);
  const double t2 = static_cast<double>(temperature) * temperature;
  double loss = 0.0;
  for (const auto& blk : blocks) {
    Tensor z({B, blk.width});
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m) z.at(n, m) = logits.at(n, blk.begin + m);
    const Tensor p = softmax(z, temperature);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m) {
        const double q = targets.at(n, blk.begin + m);
        if (q > 0.0) loss -= t2 * q * std::log(std::max(static_cast<double>(p.at(n, m)), 1e-30));
      }
    if (dlogits) {
      // d/dz [-T^2 sum q log softmax(z/T)] = T (p - q)
      const float scale = seed * temperature / static_cast<float>(B);
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t m = 0; m < blk.width; ++m)
          dlogits->at(n, blk.begin + m) += scale * (p.at(n, m) - targets.at(n, blk.begin + m));
    }
  }
  return loss / static_cast<double>(B);
}

// Softmax applied independently inside each block.
inline Tensor block_softmax(const Tensor& logits, std::span<const Block> blocks, float temperature) {
  Tensor out(logits.shape());
  const std::size_t B = logits.dim(0);
  for (const auto& blk : blocks) {
    Tensor z({B, blk.width});
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m) z.at(n, m) = logits.at(n, blk.begin + m);
    const Tensor p = softmax(z, temperature);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t m = 0; m < blk.width; ++m) out.at(n, blk.begin + m) = p.at(n, m);
  }
  return out;
}

}  // namespace ops
}  // namespace kamal
