#pragma once

// Central finite-difference oracle used across the test suites. Kept
// independent of the tape: it only re-evaluates a black-box scalar function.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "iclgd/tensor.hpp"

namespace fd {

// d loss / d param via central differences, re-evaluating `loss` after each
// in-place perturbation of `param`.
inline iclgd::Tensor gradient(iclgd::Tensor& param,
                              const std::function<double()>& loss,
                              double h = 1e-6) {
  iclgd::Tensor g = iclgd::Tensor::zeros(param.shape);
  for (std::size_t i = 0; i < param.size(); ++i) {
    double orig = param.data[i];
    param.data[i] = orig + h;
    double up = loss();
    param.data[i] = orig - h;
    double down = loss();
    param.data[i] = orig;
    g.data[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b) {
  double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

inline double max_rel_err(const iclgd::Tensor& a, const iclgd::Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, rel_err(a.data[i], b.data[i]));
  return worst;
}

}  // namespace fd
