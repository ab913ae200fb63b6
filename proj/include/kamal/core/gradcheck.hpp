#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/optim.hpp"
#include "kamal/core/rng.hpp"

namespace kamal {

struct GradCheckOptions {
  float eps = 1e-3f;
  std::size_t max_coords = 256;  // sampled per parameter
  std::uint64_t seed = 0;
  // Coordinates whose one-sided differences disagree by more than this
  // fraction straddle a relu/maxpool kink; the central difference is not a
  // valid oracle there and the coordinate is skipped (and counted).
  double kink_tolerance = 0.1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;  // "param[index]"
};

// |g - g~| / max(|g|, |g~|, 1e-4)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

// `loss(with_grad)` evaluates the scalar loss at the current parameter
// values; with_grad=true must also backpropagate into Param::grad.
inline GradCheckReport grad_check(std::span<Param* const> params, const std::function<double(bool)>& loss,
                                  const GradCheckOptions& opt = {}) {
  zero_grads(params);
  const double f0 = loss(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);
  zero_grads(params);

  const double again = loss(false);
  require(again == f0, "grad_check: loss is not deterministic (", f0, " vs ", again, ")");

  GradCheckReport rep;
  Rng rng(opt.seed, 0x67636b);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords = rng.permutation(n);
    coords.resize(std::min(n, opt.max_coords));
    std::sort(coords.begin(), coords.end());
    for (std::size_t i : coords) {
      const float orig = p.value[i];
      p.value[i] = orig + opt.eps;
      const double fp = loss(false);
      p.value[i] = orig - opt.eps;
      const double fm = loss(false);
      p.value[i] = orig;
      // Use the actually representable step.
      const double h_plus = static_cast<double>(orig + opt.eps) - orig;
      const double h_minus = static_cast<double>(orig) - static_cast<double>(orig - opt.eps);
      const double fwd = (fp - f0) / h_plus;
      const double bwd = (f0 - fm) / h_minus;
      if (std::abs(fwd - bwd) > opt.kink_tolerance * std::max({std::abs(fwd), std::abs(bwd), 1e-2})) {
        ++rep.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (h_plus + h_minus);
      const double err = relative_error(analytic[pi][i], numeric);
      ++rep.checked;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace kamal
