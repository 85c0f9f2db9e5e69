#pragma once

// Two-state, two-action MDP with a delayed payoff. In s0, action 0 stays
// (reward 0) and action 1 moves to s1 (reward 0). In s1, action 0 stays
// (reward 1) and action 1 moves back to s0 (reward 0).

#include <array>
#include <cmath>
#include <cstdint>

#include "toast/random.hpp"
#include "toast/rl.hpp"

namespace toast::test {

struct ToyMdp {
  static constexpr int kStates = 2;
  static constexpr int kActions = 2;

  static int next(int s, int a) { return a == 0 ? s : 1 - s; }
  static double reward(int s, int a) { return (s == 1 && a == 0) ? 1.0 : 0.0; }
  static rl::AgentState encode(int s) {
    const double v = s == 0 ? 0.0 : 1.0;
    return {v, v, v, v, v};
  }
};

using QTable = std::array<std::array<double, 2>, 2>;

inline QTable value_iteration(double gamma, int sweeps = 100000, double tol = 1e-12) {
  QTable q{};
  for (int it = 0; it < sweeps; ++it) {
    QTable nq{};
    double diff = 0.0;
    for (int s = 0; s < 2; ++s) {
      for (int a = 0; a < 2; ++a) {
        const int s2 = ToyMdp::next(s, a);
        nq[s][a] = ToyMdp::reward(s, a) + gamma * std::max(q[s2][0], q[s2][1]);
        diff = std::max(diff, std::abs(nq[s][a] - q[s][a]));
      }
    }
    q = nq;
    if (diff < tol) break;
  }
  return q;
}

inline std::array<int, 2> greedy(const QTable& q) {
  return {q[0][1] > q[0][0] ? 1 : 0, q[1][1] > q[1][0] ? 1 : 0};
}

struct ToyRun {
  std::array<int, 2> policy{};
  QTable q{};
  std::int64_t updates = 0;
};

/// Online DQN on the toy MDP with epsilon-greedy exploration, prioritized
/// replay and a Polyak target.
inline ToyRun train_toy_dqn(std::int64_t updates, std::uint64_t seed, double gamma = 0.99,
                            double tau = 0.005, double lr = 1e-3, std::int64_t batch = 32) {
  auto gen = make_generator(seed);
  rl::QNetworkConfig cfg;
  cfg.actions = 2;
  rl::QNetwork qnet(cfg), target(cfg);
  {
    torch::NoGradGuard g;
    auto src = qnet->parameters();
    auto dst = target->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  }
  torch::optim::Adam opt(qnet->parameters(), torch::optim::AdamOptions(lr));
  rl::ReplayBuffer buffer(10000, 0.6, 1e-3);
  rl::EpsilonSchedule eps{1.0, 0.05, updates / 2};

  ToyRun run;
  int s = 0;
  std::int64_t step = 0;
  while (run.updates < updates) {
    const double e = eps.at(step++);
    std::int64_t a = 0;
    if (torch::rand({1}, gen, torch::kFloat64).item<double>() < e) {
      a = torch::randint(0, 2, {1}, gen).item<std::int64_t>();
    } else {
      torch::NoGradGuard g;
      a = heads::predict(qnet->forward(ToyMdp::encode(s).to_tensor()))[0].item<std::int64_t>();
    }
    const int s2 = ToyMdp::next(s, static_cast<int>(a));
    buffer.push({ToyMdp::encode(s), a, ToyMdp::reward(s, static_cast<int>(a)), ToyMdp::encode(s2)});
    s = s2;
    if (buffer.size() < static_cast<std::size_t>(batch)) continue;
    auto sample = buffer.sample(static_cast<std::size_t>(batch), gen);
    auto res = rl::dqn_update(sample.transitions, *qnet, *target, opt, gamma);
    buffer.update_priorities(sample.indices, res.td_errors);
    rl::polyak_update(*qnet, *target, tau);
    ++run.updates;
  }
  torch::NoGradGuard g;
  for (int st = 0; st < 2; ++st) {
    auto q = qnet->forward(ToyMdp::encode(st).to_tensor());
    run.q[st][0] = q[0][0].item<double>();
    run.q[st][1] = q[0][1].item<double>();
  }
  run.policy = greedy(run.q);
  return run;
}

}  // namespace toast::test
