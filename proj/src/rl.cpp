#include "toast/rl.hpp"

#include <algorithm>
#include <cmath>

#include "toast/errors.hpp"
#include "toast/optim_io.hpp"
#include "toast/random.hpp"

namespace toast::rl {

namespace {

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

double uniform(torch::Generator& gen) {
  return torch::rand({1}, gen, torch::kFloat64).item<double>();
}

torch::Tensor stack_states(const std::vector<Transition>& batch, bool next) {
  auto out = torch::empty({static_cast<std::int64_t>(batch.size()), kStateDim});
  auto acc = out.accessor<float, 2>();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto v = (next ? batch[i].s_next : batch[i].s).values();
    for (std::int64_t j = 0; j < kStateDim; ++j) acc[i][j] = v[j];
  }
  return out;
}

AgentState state_from(const double* v) { return {v[0], v[1], v[2], v[3], v[4]}; }

}  // namespace

std::array<float, kStateDim> AgentState::values() const {
  return {static_cast<float>(snr_norm), static_cast<float>(recon_loss_norm),
          static_cast<float>(acc_cls), static_cast<float>(epoch_progress),
          static_cast<float>(prev_lambda_recon)};
}

torch::Tensor AgentState::to_tensor() const {
  const auto v = values();
  return torch::tensor(std::vector<float>(v.begin(), v.end())).view({1, kStateDim});
}

AgentState build_state(double snr_db, double recon_loss, double recon_loss_ema, double acc,
                       double epoch, std::int64_t total_epochs, double prev_lambda,
                       double snr_max) {
  if (recon_loss_ema <= 0.0) throw ConfigError("build_state: loss EMA must be positive");
  if (total_epochs < 1) throw ConfigError("build_state: total_epochs must be >= 1");
  if (snr_max <= 0.0) throw ConfigError("build_state: snr_max must be positive");
  return {clip01(snr_db / snr_max), clip01(recon_loss / recon_loss_ema), clip01(acc),
          clip01(epoch / static_cast<double>(total_epochs)), clip01(prev_lambda)};
}

void QNetworkConfig::validate() const {
  if (actions < 2) throw ConfigError("Q-network needs at least 2 actions");
  for (auto h : hidden) {
    if (h < 1) throw ConfigError("Q-network hidden widths must be positive");
  }
  if (negative_slope < 0.0) throw ConfigError("LeakyReLU slope must be >= 0");
}

QNetworkImpl::QNetworkImpl(const QNetworkConfig& cfg, std::int64_t state_dim) : cfg_(cfg) {
  cfg_.validate();
  std::int64_t in = state_dim;
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
    layers.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(in, cfg_.hidden[i])));
    in = cfg_.hidden[i];
  }
  layers.push_back(register_module("out", torch::nn::Linear(in, cfg_.actions)));
}

torch::Tensor QNetworkImpl::forward(const torch::Tensor& s) {
  auto h = s;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    h = torch::leaky_relu(layers[i](h), cfg_.negative_slope);
  }
  return torch::softplus(layers.back()(h));
}

double action_to_lambda(std::int64_t action, std::int64_t actions) {
  if (actions < 2 || action < 0 || action >= actions) {
    throw ConfigError("action index out of range");
  }
  return static_cast<double>(action) / static_cast<double>(actions - 1);
}

std::int64_t nearest_action(double lambda_recon, std::int64_t actions) {
  const double pos = clip01(lambda_recon) * static_cast<double>(actions - 1);
  return std::clamp<std::int64_t>(std::llround(pos), 0, actions - 1);
}

double sample_exploration_lambda(torch::Generator& gen, const ExplorationMix& mix) {
  if (uniform(gen) < mix.uniform_weight) return uniform(gen);
  auto a = torch::full({1}, mix.beta_a, torch::kFloat64);
  auto x = at::_standard_gamma(a, gen).item<double>();
  auto y = at::_standard_gamma(a, gen).item<double>();
  return x + y > 0.0 ? x / (x + y) : 0.5;
}

ActionChoice select_action(const AgentState& state, QNetworkImpl& qnet, double epsilon,
                           torch::Generator& gen, const ExplorationMix& mix) {
  const auto actions = qnet.config().actions;
  ActionChoice out;
  if (epsilon > 0.0 && uniform(gen) < epsilon) {
    out.action = nearest_action(sample_exploration_lambda(gen, mix), actions);
    out.explored = true;
  } else {
    torch::NoGradGuard g;
    out.action = heads::predict(qnet.forward(state.to_tensor()))[0].item<std::int64_t>();
  }
  out.weights = WeightPair::from_recon(action_to_lambda(out.action, actions));
  return out;
}

double EpsilonSchedule::at(std::int64_t step) const {
  if (step <= 0) return start;
  if (step >= decay_steps) return end;
  const double frac = static_cast<double>(step) / static_cast<double>(decay_steps);
  return start + frac * (end - start);
}

double epsilon_at(std::int64_t step) { return EpsilonSchedule{}.at(step); }

void RewardConfig::validate() const {
  if (threshold <= 0.0) throw ConfigError("reward threshold must be positive");
  if (window < 1) throw ConfigError("reward window must be >= 1");
  if (bins < 1) throw ConfigError("reward bins must be >= 1");
}

double lambda_entropy(const std::vector<double>& lambdas, std::int64_t bins) {
  if (lambdas.empty()) return 0.0;
  std::vector<std::int64_t> counts(bins, 0);
  for (double v : lambdas) {
    auto b = static_cast<std::int64_t>(std::floor(clip01(v) * static_cast<double>(bins) + 1e-9));
    counts[std::min(b, bins - 1)] += 1;
  }
  double h = 0.0;
  const double n = static_cast<double>(lambdas.size());
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

RewardTerms compute_reward(double prev_loss, double new_loss, double prev_acc, double new_acc,
                           const std::vector<double>& recent_lambdas, const RewardConfig& cfg) {
  cfg.validate();
  if (prev_loss <= 0.0) throw ConfigError("compute_reward: previous loss must be positive");
  if (static_cast<std::int64_t>(recent_lambdas.size()) > cfg.window) {
    throw ConfigError("compute_reward: more recent actions than the window");
  }
  RewardTerms r;
  r.loss_gain = (prev_loss - new_loss) / prev_loss;
  r.acc_gain = new_acc - prev_acc;
  r.significant = (r.loss_gain > cfg.threshold || r.acc_gain > cfg.threshold) ? 1.0 : 0.0;
  r.entropy = lambda_entropy(recent_lambdas, cfg.bins);
  r.total = cfg.alpha * r.loss_gain + cfg.beta * r.acc_gain + cfg.gamma * r.significant +
            cfg.delta * r.entropy;
  return r;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, double omega, double floor)
    : capacity_(capacity), omega_(omega), floor_(floor) {
  if (capacity == 0) throw ConfigError("replay capacity must be positive");
  if (omega < 0.0) throw ConfigError("replay omega must be >= 0");
  if (floor <= 0.0) throw ConfigError("replay priority floor must be positive");
  items_.reserve(std::min<std::size_t>(capacity, 1 << 14));
}

void ReplayBuffer::push(const Transition& t) {
  double p = 1.0;
  if (!items_.empty()) {
    p = std::max_element(items_.begin(), items_.end(), [](const auto& a, const auto& b) {
          return a.priority < b.priority;
        })->priority;
  }
  push(t, p);
}

void ReplayBuffer::push(const Transition& t, double priority) {
  Transition item = t;
  item.priority = std::max(priority, floor_);
  if (items_.size() < capacity_) {
    items_.push_back(item);
  } else {
    items_[next_] = item;
    next_ = (next_ + 1) % capacity_;
  }
}

ReplaySample ReplayBuffer::sample(std::size_t batch, torch::Generator& gen) const {
  if (items_.empty()) throw DegenerateInputError("cannot sample from an empty replay buffer");
  if (items_.size() < batch) {
    throw DegenerateInputError("replay buffer holds " + std::to_string(items_.size()) +
                               " transitions, batch needs " + std::to_string(batch));
  }
  auto w = torch::empty({static_cast<std::int64_t>(items_.size())}, torch::kFloat64);
  auto acc = w.accessor<double, 1>();
  for (std::size_t i = 0; i < items_.size(); ++i) acc[i] = std::pow(items_[i].priority, omega_);
  auto idx = torch::multinomial(w, static_cast<std::int64_t>(batch), true, gen);
  ReplaySample out;
  auto ia = idx.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < idx.size(0); ++i) {
    out.indices.push_back(static_cast<std::size_t>(ia[i]));
    out.transitions.push_back(items_[ia[i]]);
  }
  return out;
}

void ReplayBuffer::update_priorities(const std::vector<std::size_t>& indices,
                                     const std::vector<double>& td) {
  if (indices.size() != td.size()) throw ShapeError("update_priorities: size mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    items_.at(indices[i]).priority = std::max(std::abs(td[i]), floor_);
  }
}

void ReplayBuffer::save(TensorArchive& ar, const std::string& prefix) const {
  const auto n = static_cast<std::int64_t>(items_.size());
  auto s = torch::empty({n, kStateDim}, torch::kFloat64);
  auto s2 = torch::empty({n, kStateDim}, torch::kFloat64);
  auto a = torch::empty({n}, torch::kLong);
  auto r = torch::empty({n}, torch::kFloat64);
  auto p = torch::empty({n}, torch::kFloat64);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& t = items_[i];
    const double sv[] = {t.s.snr_norm, t.s.recon_loss_norm, t.s.acc_cls, t.s.epoch_progress,
                         t.s.prev_lambda_recon};
    const double nv[] = {t.s_next.snr_norm, t.s_next.recon_loss_norm, t.s_next.acc_cls,
                         t.s_next.epoch_progress, t.s_next.prev_lambda_recon};
    for (std::int64_t j = 0; j < kStateDim; ++j) {
      s[i][j] = sv[j];
      s2[i][j] = nv[j];
    }
    a[i] = t.action;
    r[i] = t.reward;
    p[i] = t.priority;
  }
  ar.add(prefix + ".s", s);
  ar.add(prefix + ".s_next", s2);
  ar.add(prefix + ".action", a);
  ar.add(prefix + ".reward", r);
  ar.add(prefix + ".priority", p);
  ar.meta[prefix + ".next"] = next_;
}

void ReplayBuffer::load(const TensorArchive& ar, const std::string& prefix) {
  auto s = ar.get(prefix + ".s").contiguous();
  auto s2 = ar.get(prefix + ".s_next").contiguous();
  auto a = ar.get(prefix + ".action").contiguous();
  auto r = ar.get(prefix + ".reward").contiguous();
  auto p = ar.get(prefix + ".priority").contiguous();
  const auto n = s.size(0);
  if (static_cast<std::size_t>(n) > capacity_) throw FormatError("replay buffer larger than capacity");
  items_.clear();
  for (std::int64_t i = 0; i < n; ++i) {
    Transition t;
    t.s = state_from(s[i].data_ptr<double>());
    t.s_next = state_from(s2[i].data_ptr<double>());
    t.action = a[i].item<std::int64_t>();
    t.reward = r[i].item<double>();
    t.priority = p[i].item<double>();
    items_.push_back(t);
  }
  next_ = ar.meta.at(prefix + ".next").get<std::size_t>();
}

DqnResult dqn_update(const std::vector<Transition>& batch, QNetworkImpl& qnet,
                     QNetworkImpl& target, torch::optim::Optimizer& opt, double gamma) {
  if (batch.empty()) throw DegenerateInputError("dqn_update: empty batch");
  auto s = stack_states(batch, false);
  auto s_next = stack_states(batch, true);
  std::vector<std::int64_t> actions;
  std::vector<float> rewards;
  for (const auto& t : batch) {
    actions.push_back(t.action);
    rewards.push_back(static_cast<float>(t.reward));
  }
  auto a = torch::tensor(actions, torch::kLong).view({-1, 1});
  auto r = torch::tensor(rewards);

  torch::Tensor y;
  {
    torch::NoGradGuard g;
    y = r;
    if (gamma != 0.0) y = r + gamma * std::get<0>(target.forward(s_next).max(1));
  }
  auto q = qnet.forward(s).gather(1, a).squeeze(1);
  auto td = y - q;
  auto loss = td.pow(2).mean();
  opt.zero_grad();
  loss.backward();
  opt.step();

  DqnResult out;
  out.loss = loss.item<double>();
  auto td_abs = td.detach().abs().to(torch::kFloat64).contiguous();
  out.td_errors.assign(td_abs.data_ptr<double>(), td_abs.data_ptr<double>() + td_abs.numel());
  return out;
}

void polyak_update(QNetworkImpl& qnet, QNetworkImpl& target, double tau) {
  torch::NoGradGuard g;
  auto src = qnet.parameters();
  auto dst = target.parameters();
  if (src.size() != dst.size()) throw ShapeError("polyak_update: networks differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].mul_(1.0 - tau).add_(src[i], tau);
  }
}

void AgentConfig::validate() const {
  qnet.validate();
  reward.validate();
  if (discount < 0.0 || discount > 1.0) throw ConfigError("discount must be in [0, 1]");
  if (tau < 0.0 || tau > 1.0) throw ConfigError("tau must be in [0, 1]");
  if (batch_size < 1) throw ConfigError("agent batch size must be >= 1");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("ema decay must be in [0, 1)");
  if (epsilon.end < 0.05 - 1e-12 || epsilon.start > 1.0 || epsilon.end > epsilon.start) {
    throw ConfigError("epsilon schedule must stay within [0.05, 1]");
  }
}

Agent::Agent(const AgentConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      gen_(make_generator(seed)),
      buffer_(cfg.buffer_capacity, cfg.omega, cfg.priority_floor) {
  cfg_.validate();
  qnet = QNetwork(cfg_.qnet);
  target = QNetwork(cfg_.qnet);
  {
    torch::NoGradGuard g;
    for (auto& layer : qnet->layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(layer->weight.size(1)));
      layer->weight.copy_((torch::rand(layer->weight.sizes(), gen_) * 2.0 - 1.0) * bound);
      layer->bias.copy_((torch::rand(layer->bias.sizes(), gen_) * 2.0 - 1.0) * bound);
    }
    auto src = qnet->parameters();
    auto dst = target->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  }
  for (auto& p : target->parameters()) p.set_requires_grad(false);
  opt_ = std::make_unique<torch::optim::Adam>(qnet->parameters(), torch::optim::AdamOptions(cfg_.lr));
}

WeightPair Agent::decide(double snr_db, double epoch, std::int64_t total_epochs) {
  const double loss = have_metrics_ ? last_loss_ : 1.0;
  const double ema = have_metrics_ && ema_ > 0.0 ? ema_ : 1.0;
  const auto s = build_state(snr_db, loss, ema, have_metrics_ ? last_acc_ : 0.0, epoch,
                             total_epochs, prev_lambda_, cfg_.snr_max);
  if (pending_ && pending_->rewarded) {
    buffer_.push({pending_->s, pending_->action, pending_->reward, s, 1.0});
    learn();
  }
  const double eps = cfg_.epsilon.at(step_);
  auto choice = select_action(s, *qnet, eps, gen_, cfg_.exploration);
  const double lambda = choice.weights.lambda_recon;
  recent_.push_back(lambda);
  while (static_cast<std::int64_t>(recent_.size()) > cfg_.reward.window) recent_.pop_front();
  pending_ = Pending{s, choice.action, 0.0, false};
  trajectory_.push_back({step_, epoch, snr_db, lambda, eps, 0.0, choice.explored});
  ++step_;
  prev_lambda_ = lambda;
  return choice.weights;
}

void Agent::observe(double recon_loss, double acc) {
  if (pending_ && have_metrics_ && last_loss_ > 0.0) {
    const std::vector<double> recent(recent_.begin(), recent_.end());
    const auto r = compute_reward(last_loss_, recon_loss, last_acc_, acc, recent, cfg_.reward);
    pending_->reward = r.total;
    pending_->rewarded = true;
    trajectory_.back().reward = r.total;
  }
  ema_ = have_metrics_ ? cfg_.ema_decay * ema_ + (1.0 - cfg_.ema_decay) * recon_loss : recon_loss;
  last_loss_ = recon_loss;
  last_acc_ = acc;
  have_metrics_ = true;
}

void Agent::learn() {
  if (buffer_.size() < static_cast<std::size_t>(cfg_.batch_size)) return;
  auto sample = buffer_.sample(static_cast<std::size_t>(cfg_.batch_size), gen_);
  auto res = dqn_update(sample.transitions, *qnet, *target, *opt_, cfg_.discount);
  buffer_.update_priorities(sample.indices, res.td_errors);
  polyak_update(*qnet, *target, cfg_.tau);
  ++updates_;
}

void Agent::save(TensorArchive& ar, const std::string& prefix) const {
  save_module(*qnet, ar, prefix + ".qnet");
  save_module(*target, ar, prefix + ".target");
  save_adam_state<torch::optim::Adam, torch::optim::AdamParamState>(*opt_, ar, prefix + ".opt");
  buffer_.save(ar, prefix + ".replay");
  ar.add(prefix + ".rng", gen_.get_state());
  ar.add(prefix + ".recent", torch::tensor(std::vector<double>(recent_.begin(), recent_.end()),
                                           torch::kFloat64));
  const auto n = static_cast<std::int64_t>(trajectory_.size());
  auto traj = torch::empty({n, 7}, torch::kFloat64);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& t = trajectory_[i];
    const double row[] = {static_cast<double>(t.step), t.epoch, t.snr_db, t.lambda_recon,
                          t.epsilon, t.reward, t.explored ? 1.0 : 0.0};
    for (int j = 0; j < 7; ++j) traj[i][j] = row[j];
  }
  ar.add(prefix + ".trajectory", traj);
  auto& m = ar.meta[prefix];
  m["step"] = step_;
  m["updates"] = updates_;
  m["ema"] = ema_;
  m["have_metrics"] = have_metrics_;
  m["last_loss"] = last_loss_;
  m["last_acc"] = last_acc_;
  m["prev_lambda"] = prev_lambda_;
  if (pending_) {
    const auto& p = *pending_;
    m["pending"] = {{"s",
                     {p.s.snr_norm, p.s.recon_loss_norm, p.s.acc_cls, p.s.epoch_progress,
                      p.s.prev_lambda_recon}},
                    {"action", p.action},
                    {"reward", p.reward},
                    {"rewarded", p.rewarded}};
  }
}

void Agent::load(const TensorArchive& ar, const std::string& prefix) {
  load_module(*qnet, ar, prefix + ".qnet");
  load_module(*target, ar, prefix + ".target");
  load_adam_state<torch::optim::Adam, torch::optim::AdamParamState>(*opt_, ar, prefix + ".opt");
  buffer_.load(ar, prefix + ".replay");
  gen_.set_state(ar.get(prefix + ".rng"));
  auto recent = ar.get(prefix + ".recent").contiguous();
  recent_.assign(recent.data_ptr<double>(), recent.data_ptr<double>() + recent.numel());
  auto traj = ar.get(prefix + ".trajectory").contiguous();
  trajectory_.clear();
  for (std::int64_t i = 0; i < traj.size(0); ++i) {
    const double* row = traj[i].data_ptr<double>();
    trajectory_.push_back({static_cast<std::int64_t>(row[0]), row[1], row[2], row[3], row[4], row[5],
                           row[6] != 0.0});
  }
  const auto& m = ar.meta.at(prefix);
  step_ = m.at("step").get<std::int64_t>();
  updates_ = m.at("updates").get<std::int64_t>();
  ema_ = m.at("ema").get<double>();
  have_metrics_ = m.at("have_metrics").get<bool>();
  last_loss_ = m.at("last_loss").get<double>();
  last_acc_ = m.at("last_acc").get<double>();
  prev_lambda_ = m.at("prev_lambda").get<double>();
  pending_.reset();
  if (m.contains("pending")) {
    const auto& p = m.at("pending");
    const auto sv = p.at("s").get<std::vector<double>>();
    pending_ = Pending{state_from(sv.data()), p.at("action").get<std::int64_t>(),
                       p.at("reward").get<double>(), p.at("rewarded").get<bool>()};
  }
}

}  // namespace toast::rl
