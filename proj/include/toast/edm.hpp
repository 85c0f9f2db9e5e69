#pragma once

// Latent denoiser: a preconditioned residual conv network D(z; sigma) that
// predicts the clean latent, the score (D - z) / sigma^2 derived from it, and
// deterministic few-step samplers over a geometric sigma grid.

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "toast/channel.hpp"
#include "toast/lora.hpp"

namespace toast::edm {

/// Variance-preserving process with a linear beta schedule on t in [0, 1].
struct NoiseSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;

  void validate() const;
  double beta(double t) const { return beta_min + t * (beta_max - beta_min); }
  /// Integral of beta from 0 to t.
  double beta_integral(double t) const;
  /// Signal scale s(t) = exp(-B(t) / 2).
  double signal_scale(double t) const;
  /// Marginal noise std sqrt(1 - exp(-B(t))).
  double sigma(double t) const;
};

/// s(t) z + sigma(t) eps. Throws ConfigError for t outside [0, 1].
torch::Tensor forward_diffuse(const torch::Tensor& z, double t, const NoiseSchedule& schedule,
                              torch::Generator& gen);

constexpr double kSigmaData = 0.5;
constexpr double kLogEps = 1e-8;

struct Preconditioning {
  double c_in;
  double c_noise;
  double c_skip;
  double c_out;
};

/// c_in = 1/sqrt(sigma^2 + sd^2), c_noise = ln(sigma + eps)/4,
/// c_skip = sd^2/(sigma^2 + sd^2), c_out = sigma sd/sqrt(sigma^2 + sd^2).
Preconditioning precondition(double sigma, double sigma_data = kSigmaData);

struct ScoreNetConfig {
  std::int64_t channels = 16;  // latent c_lat
  std::int64_t width = 32;
  std::int64_t blocks = 2;
  std::int64_t time_dim = 64;
  std::int64_t groups = 8;

  void validate() const;
};

/// h = SiLU(GN(Conv1 x + dW1 x)); y = Conv2(h + proj(t) + dWt(t)) + dW2(h) + x
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t width, std::int64_t time_dim, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

  lora::AdaptableConv conv1{nullptr}, conv2{nullptr};
  torch::nn::GroupNorm norm{nullptr};
  lora::AdaptableLinear time_proj{nullptr};
};
TORCH_MODULE(ResidualBlock);

class ScoreNetImpl : public torch::nn::Module {
 public:
  explicit ScoreNetImpl(const ScoreNetConfig& cfg);
  /// x [B, C, H, W], c_noise [B] -> [B, C, H, W]
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& c_noise);
  torch::Tensor time_embedding(const torch::Tensor& c_noise);

  lora::LayerRegistry layers();
  const ScoreNetConfig& config() const { return cfg_; }

  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  std::vector<ResidualBlock> blocks;

 private:
  ScoreNetConfig cfg_;
};
TORCH_MODULE(ScoreNet);

/// D(z; sigma) over flat latents [B, L] with a spatial shape for the network.
class DenoiserImpl : public torch::nn::Module {
 public:
  DenoiserImpl(const ScoreNetConfig& net_cfg, channel::LatentShape shape,
               double sigma_data = kSigmaData);

  /// sigma is a scalar or one value per row.
  torch::Tensor denoise_estimate(const torch::Tensor& z, const torch::Tensor& sigma);
  torch::Tensor denoise_estimate(const torch::Tensor& z, double sigma);
  /// (D - z) / sigma^2, or the unscaled form F(c_in z; c_noise) / sigma when
  /// literal_score is set. Throws ConfigError for sigma <= 0.
  torch::Tensor score(const torch::Tensor& z, double sigma);

  lora::LayerRegistry layers() { return net->layers(); }
  channel::LatentShape shape() const { return shape_; }
  double sigma_data() const { return sigma_data_; }

  bool literal_score = false;
  ScoreNet net{nullptr};

 private:
  channel::LatentShape shape_;
  double sigma_data_;
};
TORCH_MODULE(Denoiser);

/// sigma_max ... sigma_min geometric over `steps` points, then 0. When
/// sigma_max <= sigma_min the grid is {sigma_max, 0}.
std::vector<double> sigma_grid(double sigma_max, std::int64_t steps, double sigma_min = 0.002);

enum class SamplerMode {
  alg1,              // z += (s_t^2 - s_{t-1}^2) score
  alg1_verbatim,     // z -= s_t^2 score
  heun,              // dz/d(sigma^2) = -score, Heun corrector in sigma^2
  probability_flow,  // dz/dsigma = -sigma score, Heun corrector
};

std::string_view to_string(SamplerMode mode);
SamplerMode parse_sampler_mode(std::string_view name);

using ScoreFn = std::function<torch::Tensor(const torch::Tensor& z, double sigma)>;

struct DenoiseOptions {
  std::int64_t steps = 18;
  SamplerMode mode = SamplerMode::heun;
  double sigma_min = 0.002;
};

/// Integrates from sigma_max to 0. The step onto sigma = 0 is always
/// z + sigma^2 score, i.e. the denoiser's estimate. sigma_max = 0 returns z.
torch::Tensor denoise(const torch::Tensor& z_ch, double sigma_max, const ScoreFn& score,
                      const DenoiseOptions& opts);
torch::Tensor denoise(const torch::Tensor& z_ch, double sigma_max, DenoiserImpl& net,
                      const DenoiseOptions& opts);

struct DsmOptions {
  double p_mean = -1.2;  // log-normal sigma sampling
  double p_std = 1.2;
  bool edm_weighting = true;
};

/// Denoising score-matching loss on a batch of clean latents.
torch::Tensor dsm_loss(DenoiserImpl& net, const torch::Tensor& z, torch::Generator& gen,
                       const DsmOptions& opts = {});

struct TrainDenoiserOptions {
  std::int64_t epochs = 10;
  std::int64_t batch_size = 64;
  double lr = 1e-3;
  DsmOptions dsm{};
  /// Fraction of latents held out for the per-epoch validation loss.
  double holdout = 0.1;
};

struct TrainDenoiserResult {
  std::vector<double> train_loss;
  std::vector<double> holdout_loss;
};

/// Fits D on clean latents [N, L]. Throws DataError on an empty set.
TrainDenoiserResult train_denoiser(DenoiserImpl& net, const torch::Tensor& latents,
                                   const TrainDenoiserOptions& opts, torch::Generator& gen);

}  // namespace toast::edm
