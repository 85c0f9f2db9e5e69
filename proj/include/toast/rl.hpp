#pragma once

// DQN loss-weight scheduler: state construction, epsilon-greedy action
// selection over a lambda_recon grid, shaped reward, prioritized replay,
// TD updates and Polyak-averaged target network.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <string_view>
#include <vector>

#include "toast/archive.hpp"
#include "toast/heads.hpp"

namespace toast::rl {

using heads::WeightPair;

constexpr std::int64_t kStateDim = 5;
constexpr double kSnrMax = 30.0;

struct AgentState {
  double snr_norm = 0.0;
  double recon_loss_norm = 0.0;
  double acc_cls = 0.0;
  double epoch_progress = 0.0;
  double prev_lambda_recon = 0.5;

  std::array<float, kStateDim> values() const;
  torch::Tensor to_tensor() const;
};

/// Every component clipped to [0, 1]. Throws ConfigError for ema <= 0 or
/// total_epochs < 1. `epoch` may be fractional.
AgentState build_state(double snr_db, double recon_loss, double recon_loss_ema, double acc,
                       double epoch, std::int64_t total_epochs, double prev_lambda,
                       double snr_max = kSnrMax);

struct QNetworkConfig {
  std::vector<std::int64_t> hidden{64, 32};
  double negative_slope = 0.01;
  std::int64_t actions = 21;

  void validate() const;
};

/// Linear/LeakyReLU stack with a Softplus output, one Q value per action.
class QNetworkImpl : public torch::nn::Module {
 public:
  explicit QNetworkImpl(const QNetworkConfig& cfg, std::int64_t state_dim = kStateDim);
  torch::Tensor forward(const torch::Tensor& s);
  const QNetworkConfig& config() const { return cfg_; }

  std::vector<torch::nn::Linear> layers;

 private:
  QNetworkConfig cfg_;
};
TORCH_MODULE(QNetwork);

/// Grid point a / (A - 1).
double action_to_lambda(std::int64_t action, std::int64_t actions);
std::int64_t nearest_action(double lambda_recon, std::int64_t actions);

struct ExplorationMix {
  double uniform_weight = 0.7;
  double beta_a = 0.5;  // symmetric Beta(a, a)
};

/// One continuous lambda_recon from the exploration mixture.
double sample_exploration_lambda(torch::Generator& gen, const ExplorationMix& mix = {});

struct ActionChoice {
  WeightPair weights;
  std::int64_t action = 0;
  bool explored = false;
};

/// Greedy with probability 1 - epsilon, otherwise a mixture draw snapped to
/// the grid. Greedy ties go to the lowest action.
ActionChoice select_action(const AgentState& state, QNetworkImpl& qnet, double epsilon,
                           torch::Generator& gen, const ExplorationMix& mix = {});

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.05;
  std::int64_t decay_steps = 50000;

  double at(std::int64_t step) const;
};

double epsilon_at(std::int64_t step);

struct RewardConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.5;
  double delta = 0.1;
  double threshold = 0.05;
  std::int64_t window = 50;
  std::int64_t bins = 10;

  void validate() const;
};

struct RewardTerms {
  double loss_gain = 0.0;  // (prev - new) / prev
  double acc_gain = 0.0;
  double significant = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

/// Shannon entropy (natural log) of the histogram of values over equal bins
/// on [0, 1]; the last bin is closed. Empty input has entropy 0.
double lambda_entropy(const std::vector<double>& lambdas, std::int64_t bins);

/// Throws ConfigError for prev_loss <= 0 or more recent values than the window.
RewardTerms compute_reward(double prev_loss, double new_loss, double prev_acc, double new_acc,
                           const std::vector<double>& recent_lambdas, const RewardConfig& cfg = {});

struct Transition {
  AgentState s;
  std::int64_t action = 0;
  double reward = 0.0;
  AgentState s_next;
  double priority = 1.0;
};

struct ReplaySample {
  std::vector<std::size_t> indices;
  std::vector<Transition> transitions;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 10000, double omega = 0.6, double floor = 1e-3);

  /// New entries get the largest priority currently stored (1 when empty).
  void push(const Transition& t);
  /// Explicit priority, clamped below by the floor.
  void push(const Transition& t, double priority);
  /// Draws with replacement, P(i) proportional to priority_i^omega. Throws
  /// DegenerateInputError when empty or smaller than the batch.
  ReplaySample sample(std::size_t batch, torch::Generator& gen) const;
  /// priority = max(|td|, floor).
  void update_priorities(const std::vector<std::size_t>& indices, const std::vector<double>& td);

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return items_.at(i); }
  double omega() const { return omega_; }

  void save(TensorArchive& ar, const std::string& prefix) const;
  void load(const TensorArchive& ar, const std::string& prefix);

 private:
  std::size_t capacity_;
  double omega_;
  double floor_;
  std::vector<Transition> items_;
  std::size_t next_ = 0;  // slot overwritten next once full
};

struct DqnResult {
  double loss = 0.0;
  std::vector<double> td_errors;  // |target - Q(s, a)| per transition
};

/// One gradient step on the mean squared TD error against
/// r + gamma * max_a' Q_target(s', a').
DqnResult dqn_update(const std::vector<Transition>& batch, QNetworkImpl& qnet,
                     QNetworkImpl& target, torch::optim::Optimizer& opt, double gamma = 0.99);

/// target <- tau * policy + (1 - tau) * target for every parameter.
void polyak_update(QNetworkImpl& qnet, QNetworkImpl& target, double tau = 0.005);

struct AgentConfig {
  QNetworkConfig qnet{};
  RewardConfig reward{};
  EpsilonSchedule epsilon{};
  ExplorationMix exploration{};
  double discount = 0.99;
  double tau = 0.005;
  double lr = 1e-3;
  std::int64_t batch_size = 32;
  std::size_t buffer_capacity = 10000;
  double omega = 0.6;
  double priority_floor = 1e-3;
  double ema_decay = 0.99;
  double snr_max = kSnrMax;

  void validate() const;
};

struct TrajectoryPoint {
  std::int64_t step = 0;
  double epoch = 0.0;
  double snr_db = 0.0;
  double lambda_recon = 0.0;
  double epsilon = 0.0;
  double reward = 0.0;  // filled in by observe(); 0 when no reward could be computed
  bool explored = false;
};

/// Per-batch scheduler. decide() picks the weights for the coming batch;
/// observe() reports that batch's recon loss and accuracy, which pays the
/// reward for the action and, at the next decide(), completes its transition.
class Agent {
 public:
  Agent(const AgentConfig& cfg, std::uint64_t seed);

  WeightPair decide(double snr_db, double epoch, std::int64_t total_epochs);
  void observe(double recon_loss, double acc);

  const std::vector<TrajectoryPoint>& trajectory() const { return trajectory_; }
  std::int64_t steps() const { return step_; }
  std::int64_t updates() const { return updates_; }
  double loss_ema() const { return ema_; }
  const AgentConfig& config() const { return cfg_; }
  const ReplayBuffer& buffer() const { return buffer_; }

  void save(TensorArchive& ar, const std::string& prefix) const;
  void load(const TensorArchive& ar, const std::string& prefix);

  QNetwork qnet{nullptr};
  QNetwork target{nullptr};

 private:
  void learn();

  AgentConfig cfg_;
  torch::Generator gen_;
  std::unique_ptr<torch::optim::Adam> opt_;
  ReplayBuffer buffer_;
  std::deque<double> recent_;
  std::int64_t step_ = 0;
  std::int64_t updates_ = 0;
  double ema_ = 0.0;
  bool have_metrics_ = false;
  double last_loss_ = 0.0;
  double last_acc_ = 0.0;
  double prev_lambda_ = 0.5;
  struct Pending {
    AgentState s;
    std::int64_t action = 0;
    double reward = 0.0;
    bool rewarded = false;
  };
  std::optional<Pending> pending_;
  std::vector<TrajectoryPoint> trajectory_;
};

}  // namespace toast::rl
