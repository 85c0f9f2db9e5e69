#pragma once

#include <torch/torch.h>

#include <cmath>

// c10 logging defines its own CHECK
#undef CHECK
#include "doctest.h"

namespace toast::test {

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().max().item<double>();
}

inline double rel_err(const torch::Tensor& a, const torch::Tensor& b) {
  const double denom = std::max(b.abs().max().item<double>(), 1e-12);
  return max_abs_diff(a, b) / denom;
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) { return torch::equal(a, b); }

}  // namespace toast::test
