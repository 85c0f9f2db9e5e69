#pragma once

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cstdint>

namespace toast {

/// CPU generator seeded deterministically; every stochastic op takes one of
/// these explicitly so runs are reproducible.
inline torch::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace toast
