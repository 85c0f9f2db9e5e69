#include "toast/edm.hpp"

#include <cmath>
#include <string>

#include "toast/errors.hpp"
#include "toast/random.hpp"

namespace toast::edm {

namespace F = torch::nn::functional;

void NoiseSchedule::validate() const {
  if (!(beta_min > 0.0) || !(beta_max > beta_min)) {
    throw ConfigError("noise schedule needs 0 < beta_min < beta_max");
  }
}

double NoiseSchedule::beta_integral(double t) const {
  return beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
}

double NoiseSchedule::signal_scale(double t) const { return std::exp(-0.5 * beta_integral(t)); }

double NoiseSchedule::sigma(double t) const {
  return std::sqrt(-std::expm1(-beta_integral(t)));
}

torch::Tensor forward_diffuse(const torch::Tensor& z, double t, const NoiseSchedule& schedule,
                              torch::Generator& gen) {
  schedule.validate();
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("forward_diffuse: t must lie in [0, 1], got " + std::to_string(t));
  }
  if (t == 0.0) return z;
  auto eps = torch::randn(z.sizes(), gen, z.options().requires_grad(false));
  return z * schedule.signal_scale(t) + eps * schedule.sigma(t);
}

Preconditioning precondition(double sigma, double sigma_data) {
  if (sigma < 0.0) throw ConfigError("precondition: sigma must be >= 0");
  const double s2 = sigma * sigma;
  const double d2 = sigma_data * sigma_data;
  const double root = std::sqrt(s2 + d2);
  return {1.0 / root, std::log(sigma + kLogEps) / 4.0, d2 / (s2 + d2), sigma * sigma_data / root};
}

// --- network ---------------------------------------------------------------

void ScoreNetConfig::validate() const {
  if (channels < 1 || width < 1 || blocks < 1) {
    throw ConfigError("score net: channels, width and blocks must be >= 1");
  }
  if (groups < 1 || width % groups != 0) {
    throw ConfigError("score net: width " + std::to_string(width) +
                      " is not divisible by groups " + std::to_string(groups));
  }
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("score net: time_dim must be even");
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t width, std::int64_t time_dim,
                                     std::int64_t groups) {
  conv1 = register_module("conv1", lora::AdaptableConv(width, width, 3, 1));
  norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, width)));
  time_proj = register_module(
      "time_proj", lora::AdaptableLinear(time_dim, width, true, lora::LayerKind::time_embed));
  conv2 = register_module("conv2", lora::AdaptableConv(width, width, 3, 1));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = torch::silu(norm(conv1(x)));
  auto t = time_proj(temb).unsqueeze(-1).unsqueeze(-1);
  auto y = conv2->base_forward(h + t);
  if (auto d = conv2->adapter_delta(h); d.defined()) y = y + d;
  return y + x;
}

ScoreNetImpl::ScoreNetImpl(const ScoreNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  conv_in = register_module(
      "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.channels, cfg_.width, 3).padding(1)));
  time_fc1 = register_module("time_fc1", torch::nn::Linear(cfg_.time_dim, cfg_.time_dim));
  time_fc2 = register_module("time_fc2", torch::nn::Linear(cfg_.time_dim, cfg_.time_dim));
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    blocks.push_back(register_module("block" + std::to_string(b),
                                     ResidualBlock(cfg_.width, cfg_.time_dim, cfg_.groups)));
  }
  norm_out = register_module(
      "norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(cfg_.groups, cfg_.width)));
  conv_out = register_module(
      "conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.width, cfg_.channels, 3).padding(1)));
}

torch::Tensor ScoreNetImpl::time_embedding(const torch::Tensor& c_noise) {
  const auto half = cfg_.time_dim / 2;
  auto freqs = torch::exp(torch::arange(half, c_noise.options()) *
                          (-std::log(10000.0) / static_cast<double>(half)));
  auto args = c_noise.unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  return torch::silu(time_fc2(torch::silu(time_fc1(emb))));
}

torch::Tensor ScoreNetImpl::forward(const torch::Tensor& x, const torch::Tensor& c_noise) {
  if (x.dim() != 4 || x.size(1) != cfg_.channels) {
    throw ShapeError("score net: expected [B, " + std::to_string(cfg_.channels) + ", H, W]");
  }
  auto temb = time_embedding(c_noise);
  auto h = conv_in(x);
  for (auto& block : blocks) h = block(h, temb);
  return conv_out(torch::silu(norm_out(h)));
}

lora::LayerRegistry ScoreNetImpl::layers() {
  lora::LayerRegistry reg;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto prefix = "denoiser.block" + std::to_string(b);
    auto& blk = *blocks[b];
    reg.push_back({prefix + ".conv1", lora::Role::denoiser, lora::LayerKind::conv, nullptr,
                   blk.conv1.get()});
    reg.push_back({prefix + ".conv2", lora::Role::denoiser, lora::LayerKind::conv, nullptr,
                   blk.conv2.get()});
    reg.push_back({prefix + ".time_proj", lora::Role::denoiser, lora::LayerKind::time_embed,
                   blk.time_proj.get(), nullptr});
  }
  return reg;
}

// --- denoiser --------------------------------------------------------------

DenoiserImpl::DenoiserImpl(const ScoreNetConfig& net_cfg, channel::LatentShape shape,
                           double sigma_data)
    : shape_(shape), sigma_data_(sigma_data) {
  if (net_cfg.channels != shape.channels) {
    throw ConfigError("denoiser: score net channels must equal the latent channel count");
  }
  if (!(sigma_data > 0.0)) throw ConfigError("denoiser: sigma_data must be > 0");
  net = register_module("net", ScoreNet(net_cfg));
}

torch::Tensor DenoiserImpl::denoise_estimate(const torch::Tensor& z, const torch::Tensor& sigma) {
  if (z.dim() != 2 || z.size(1) != shape_.size()) {
    throw ShapeError("denoiser: expected latents [B, " + std::to_string(shape_.size()) + "]");
  }
  const auto b = z.size(0);
  auto s = sigma.to(z.dtype()).reshape({-1});
  if (s.numel() == 1) s = s.expand({b});
  const double d2 = sigma_data_ * sigma_data_;
  auto s2 = s * s;
  auto c_in = (s2 + d2).rsqrt();
  auto c_skip = d2 / (s2 + d2);
  auto c_out = s * sigma_data_ * c_in;
  auto c_noise = (s + kLogEps).log() / 4.0;

  auto spatial = z.view({b, shape_.height, shape_.width, shape_.channels}).permute({0, 3, 1, 2});
  auto f = net(spatial * c_in.view({b, 1, 1, 1}), c_noise);
  auto f_flat = f.permute({0, 2, 3, 1}).reshape({b, -1});
  return z * c_skip.unsqueeze(1) + f_flat * c_out.unsqueeze(1);
}

torch::Tensor DenoiserImpl::denoise_estimate(const torch::Tensor& z, double sigma) {
  return denoise_estimate(z, torch::tensor(sigma, z.options().requires_grad(false)));
}

torch::Tensor DenoiserImpl::score(const torch::Tensor& z, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("score is undefined at sigma = 0");
  if (literal_score) {
    const auto p = precondition(sigma, sigma_data_);
    const auto b = z.size(0);
    auto spatial = z.view({b, shape_.height, shape_.width, shape_.channels}).permute({0, 3, 1, 2});
    auto c_noise = torch::full({b}, p.c_noise, z.options().requires_grad(false));
    auto f = net(spatial * p.c_in, c_noise).permute({0, 2, 3, 1}).reshape({b, -1});
    return f / sigma;
  }
  return (denoise_estimate(z, sigma) - z) / (sigma * sigma);
}

// --- sampling --------------------------------------------------------------

std::vector<double> sigma_grid(double sigma_max, std::int64_t steps, double sigma_min) {
  if (steps < 1) throw ConfigError("sigma grid needs at least one step");
  if (sigma_max < 0.0 || !std::isfinite(sigma_max)) {
    throw ConfigError("sigma grid: sigma_max must be finite and >= 0");
  }
  if (!(sigma_min > 0.0)) throw ConfigError("sigma grid: sigma_min must be > 0");
  std::vector<double> grid;
  if (sigma_max <= sigma_min || steps == 1) {
    grid = {sigma_max, 0.0};
    return grid;
  }
  const double ratio = std::log(sigma_min / sigma_max);
  for (std::int64_t i = 0; i < steps; ++i) {
    grid.push_back(sigma_max * std::exp(ratio * static_cast<double>(i) / (steps - 1)));
  }
  grid.back() = sigma_min;
  grid.push_back(0.0);
  return grid;
}

std::string_view to_string(SamplerMode mode) {
  switch (mode) {
    case SamplerMode::alg1: return "alg1";
    case SamplerMode::alg1_verbatim: return "alg1_verbatim";
    case SamplerMode::heun: return "heun";
    case SamplerMode::probability_flow: return "probability_flow";
  }
  return "unknown";
}

SamplerMode parse_sampler_mode(std::string_view name) {
  for (auto m : {SamplerMode::alg1, SamplerMode::alg1_verbatim, SamplerMode::heun,
                 SamplerMode::probability_flow}) {
    if (to_string(m) == name) return m;
  }
  if (name == "pf") return SamplerMode::probability_flow;
  throw ConfigError("unknown sampler mode '" + std::string(name) + "'");
}

torch::Tensor denoise(const torch::Tensor& z_ch, double sigma_max, const ScoreFn& score,
                      const DenoiseOptions& opts) {
  if (sigma_max == 0.0) return z_ch;
  const auto grid = sigma_grid(sigma_max, opts.steps, opts.sigma_min);
  auto z = z_ch;
  switch (opts.mode) {
    case SamplerMode::alg1:
      for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double s = grid[i];
        const double next = grid[i + 1];
        z = z + score(z, s) * (s * s - next * next);
      }
      return z;
    case SamplerMode::alg1_verbatim:
      for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double s = grid[i];
        z = z - score(z, s) * (s * s);
      }
      return z;
    case SamplerMode::heun:
      // Heun steps in v = sigma^2, where dz/dv = -score.
      for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double s = grid[i];
        const double next = grid[i + 1];
        const double dv = next * next - s * s;
        auto d = score(z, s) * -1.0;
        if (next == 0.0) {
          z = z + d * dv;
          break;
        }
        auto euler = z + d * dv;
        z = z + (d - score(euler, next)) * (0.5 * dv);
      }
      return z;
    case SamplerMode::probability_flow: {
      auto slope = [&](const torch::Tensor& x, double s) { return score(x, s) * -s; };
      for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
        const double s = grid[i];
        const double next = grid[i + 1];
        if (next == 0.0) {
          z = z + score(z, s) * (s * s);
          break;
        }
        auto d = slope(z, s);
        auto euler = z + d * (next - s);
        z = z + (d + slope(euler, next)) * (0.5 * (next - s));
      }
      return z;
    }
  }
  throw ConfigError("denoise: unknown sampler mode");
}

torch::Tensor denoise(const torch::Tensor& z_ch, double sigma_max, DenoiserImpl& net,
                      const DenoiseOptions& opts) {
  return denoise(
      z_ch, sigma_max, [&net](const torch::Tensor& z, double s) { return net.score(z, s); }, opts);
}

// --- training --------------------------------------------------------------

torch::Tensor dsm_loss(DenoiserImpl& net, const torch::Tensor& z, torch::Generator& gen,
                       const DsmOptions& opts) {
  const auto b = z.size(0);
  const auto opt = z.options().requires_grad(false);
  auto sigma = (torch::randn({b}, gen, opt) * opts.p_std + opts.p_mean).exp();
  auto noisy = z + torch::randn(z.sizes(), gen, opt) * sigma.unsqueeze(1);
  auto per_sample = (net.denoise_estimate(noisy, sigma) - z).pow(2).mean(1);
  if (opts.edm_weighting) {
    const double d = net.sigma_data();
    per_sample = per_sample * (sigma * sigma + d * d) / (sigma * d).pow(2);
  }
  return per_sample.mean();
}

TrainDenoiserResult train_denoiser(DenoiserImpl& net, const torch::Tensor& latents,
                                   const TrainDenoiserOptions& opts, torch::Generator& gen) {
  if (!latents.defined() || latents.dim() != 2 || latents.size(0) == 0) {
    throw DataError("train_denoiser: empty latent set");
  }
  if (opts.epochs < 1 || opts.batch_size < 1) {
    throw ConfigError("train_denoiser: epochs and batch_size must be >= 1");
  }
  const auto n = latents.size(0);
  auto data = latents.detach();
  auto order = torch::randperm(n, gen, torch::kLong);
  const auto n_hold = (n >= 10) ? static_cast<std::int64_t>(std::floor(n * opts.holdout)) : 0;
  auto hold = data.index_select(0, order.slice(0, 0, n_hold));
  auto train = data.index_select(0, order.slice(0, n_hold, n));

  std::vector<torch::Tensor> params;
  for (auto& p : net.parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  torch::optim::AdamW optim(params, torch::optim::AdamWOptions(opts.lr).weight_decay(0.0));

  TrainDenoiserResult result;
  const auto m = train.size(0);
  for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    auto perm = torch::randperm(m, gen, torch::kLong);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < m; start += opts.batch_size) {
      auto idx = perm.slice(0, start, std::min(m, start + opts.batch_size));
      optim.zero_grad();
      auto loss = dsm_loss(net, train.index_select(0, idx), gen, opts.dsm);
      loss.backward();
      optim.step();
      total += loss.item<double>();
      ++batches;
    }
    result.train_loss.push_back(total / static_cast<double>(batches));
    if (n_hold > 0) {
      torch::NoGradGuard no_grad;
      auto hold_gen = make_generator(0x5eed);
      result.holdout_loss.push_back(dsm_loss(net, hold, hold_gen, opts.dsm).item<double>());
    }
  }
  return result;
}

}  // namespace toast::edm
