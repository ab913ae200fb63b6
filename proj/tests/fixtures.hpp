#pragma once

// Crafted IDX byte streams and the closed-form least-squares oracle, shared
// by the unit tests and the acceptance run.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/tensor.hpp"
#include "reference.hpp"

namespace kamal::test {

inline void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

inline std::vector<unsigned char> idx_images(std::uint32_t magic, std::uint32_t n, std::vector<unsigned char> pixels) {
  std::vector<unsigned char> b;
  be32(b, magic);
  be32(b, n);
  be32(b, 2);
  be32(b, 2);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

inline std::vector<unsigned char> idx_labels(std::uint32_t n, std::vector<unsigned char> labels) {
  std::vector<unsigned char> b;
  be32(b, 0x801);
  be32(b, n);
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

inline std::string io_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e.what();
  }
  return "";
}

// Minimum of 1/2 ||conv3x3(H) - Y||^2 per sample over all weights and biases,
// from the normal equations on the explicit patch design matrix (double).
inline double least_squares_optimum(const ref::D& h, const Tensor& y) {
  const std::size_t N = h.shape[0], C = h.shape[1], H = h.shape[2], W = h.shape[3], Co = y.dim(1);
  const std::size_t cols = C * 9 + 1, rows = N * H * W;
  Eigen::MatrixXd A(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Eigen::MatrixXd T(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(Co));
  std::size_t r = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j, ++r) {
        std::size_t c = 0;
        for (std::size_t ch = 0; ch < C; ++ch)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj, ++c) {
              const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
              const bool in = ii >= 0 && jj >= 0 && ii < static_cast<long>(H) && jj < static_cast<long>(W);
              A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                  in ? h.at(n, ch, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) : 0.0;
            }
        A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = 1.0;
        for (std::size_t o = 0; o < Co; ++o) T(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(o)) = y.at(n, o, i, j);
      }
  const Eigen::MatrixXd coef = (A.transpose() * A).ldlt().solve(A.transpose() * T);
  return 0.5 * (A * coef - T).squaredNorm() / static_cast<double>(N);
}

}  // namespace kamal::test
