#pragma once

// Adam/AdamW moment buffers in and out of a TensorArchive, addressed by
// parameter position so a rebuilt optimizer over the same parameter list
// resumes exactly.

#include <torch/torch.h>

#include <string>

#include "toast/archive.hpp"
#include "toast/errors.hpp"

namespace toast {

template <typename Optim, typename State>
void save_adam_state(Optim& opt, TensorArchive& ar, const std::string& prefix) {
  auto& states = opt.state();
  std::size_t i = 0;
  nlohmann::json steps = nlohmann::json::array();
  for (auto& group : opt.param_groups()) {
    for (auto& p : group.params()) {
      auto it = states.find(p.unsafeGetTensorImpl());
      if (it == states.end()) {
        steps.push_back(0);
      } else {
        auto& s = static_cast<State&>(*it->second);
        steps.push_back(s.step());
        ar.add(prefix + "." + std::to_string(i) + ".exp_avg", s.exp_avg());
        ar.add(prefix + "." + std::to_string(i) + ".exp_avg_sq", s.exp_avg_sq());
      }
      ++i;
    }
  }
  ar.meta[prefix + ".steps"] = steps;
  nlohmann::json lrs = nlohmann::json::array();
  for (auto& group : opt.param_groups()) lrs.push_back(group.options().get_lr());
  ar.meta[prefix + ".lr"] = lrs;
}

template <typename Optim, typename State>
void load_adam_state(Optim& opt, const TensorArchive& ar, const std::string& prefix) {
  if (!ar.meta.contains(prefix + ".steps")) throw FormatError("missing optimizer state " + prefix);
  const auto& steps = ar.meta.at(prefix + ".steps");
  auto& states = opt.state();
  std::size_t i = 0;
  for (auto& group : opt.param_groups()) {
    for (auto& p : group.params()) {
      if (i >= steps.size()) throw FormatError("optimizer state " + prefix + " has too few entries");
      const auto step = steps.at(i).get<std::int64_t>();
      if (step > 0) {
        auto s = std::make_unique<State>();
        s->step(step);
        s->exp_avg(ar.get(prefix + "." + std::to_string(i) + ".exp_avg").clone());
        s->exp_avg_sq(ar.get(prefix + "." + std::to_string(i) + ".exp_avg_sq").clone());
        states[p.unsafeGetTensorImpl()] = std::move(s);
      } else {
        states.erase(p.unsafeGetTensorImpl());
      }
      ++i;
    }
  }
  if (i != steps.size()) throw FormatError("optimizer state " + prefix + " has extra entries");
  const auto& lrs = ar.meta.at(prefix + ".lr");
  std::size_t g = 0;
  for (auto& group : opt.param_groups()) group.options().set_lr(lrs.at(g++).get<double>());
}

/// Parameters in registration order, keyed "prefix.name".
inline void save_module(const torch::nn::Module& m, TensorArchive& ar, const std::string& prefix) {
  for (const auto& item : m.named_parameters(true)) ar.add(prefix + "." + item.key(), item.value());
  for (const auto& item : m.named_buffers(true)) ar.add(prefix + "." + item.key(), item.value());
}

inline void load_module(torch::nn::Module& m, const TensorArchive& ar, const std::string& prefix) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = ar.get(prefix + "." + key);
    if (src.sizes() != dst.sizes()) {
      throw FormatError("shape mismatch for " + prefix + "." + key);
    }
    dst.copy_(src);
  };
  for (auto& item : m.named_parameters(true)) copy(item.key(), item.value());
  for (auto& item : m.named_buffers(true)) copy(item.key(), item.value());
}

}  // namespace toast
