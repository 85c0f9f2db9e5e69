#pragma once

// Stochastic wireless channels applied to power-normalized latent codes.
//
// Latents are real tensors whose last dimension is the code length L. Fading
// and phase-noise channels read consecutive real pairs (z[2k], z[2k+1]) as one
// complex symbol; AWGN and impulse channels act per real component. All noise
// is specified in the latent domain, so after normalize_power the per-real-
// component SNR equals the configured value for every channel kind.

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace toast::channel {

enum class ChannelKind { awgn, rayleigh, rician, phase_noise, impulse };

std::string_view to_string(ChannelKind kind);
ChannelKind parse_channel_kind(std::string_view name);

/// True for the kinds that multiply complex symbols (pairs of reals).
bool uses_complex_symbols(ChannelKind kind);

struct LatentShape {
  std::int64_t height = 12;
  std::int64_t width = 12;
  std::int64_t channels = 16;

  std::int64_t size() const { return height * width * channels; }
  bool operator==(const LatentShape&) const = default;
};

/// A transmitted semantic representation: flat values plus the spatial shape
/// the denoiser sees. The flat order is (height, width, channels).
struct LatentCode {
  torch::Tensor values;  // [L] or [B, L]
  LatentShape shape;

  /// Throws ShapeError / DegenerateInputError if the invariants do not hold.
  void validate() const;
  std::int64_t length() const { return shape.size(); }
};

struct ChannelConfig {
  ChannelKind kind = ChannelKind::awgn;
  double snr_db = 10.0;
  double rician_k = 2.0;
  double impulse_prob = 0.01;
  double impulse_var_mult = 100.0;
  double phase_sigma = 0.1;  // radians
  /// Rayleigh/Rician: the receiver knows the fading phase and derotates, so
  /// the effective channel is |h| z + n. Off: h z + n with h unknown.
  bool coherent = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One sampled channel use. `h` is complex ([..., L/2]) for fading and phase
/// channels, a real tensor of ones for AWGN/impulse. `n` holds the full
/// additive term in the latent domain (impulses included).
struct ChannelRealization {
  torch::Tensor h;
  torch::Tensor gain;          // coefficient actually applied: h, or |h| when coherent
  torch::Tensor n;
  torch::Tensor impulse_mask;  // bool [..., L]; defined only for impulse
  torch::Tensor transmitted;   // z_norm, kept for oracle noise estimation
  double sigma_n = 0.0;        // snr_to_sigma(snr_db)
};

struct ChannelOutput {
  torch::Tensor received;
  ChannelRealization realization;
};

/// z * sqrt(L) / ||z||_2 along the last dimension (mean square 1 per row).
torch::Tensor normalize_power(const torch::Tensor& z);

/// sigma with sigma^2 = 10^(-snr_db/10); +inf dB maps to 0.
double snr_to_sigma(double snr_db);

/// z_ch = h (.) z_norm + n. Differentiable with respect to z_norm.
ChannelOutput apply_channel(const torch::Tensor& z_norm, const ChannelConfig& cfg,
                            torch::Generator& gen);

/// Either the oracle realization (training) or an SNR estimate (inference).
struct NoiseLevelSource {
  const ChannelRealization* realization = nullptr;
  std::optional<double> snr_db;
};

/// Per-component RMS of z_ch - z_norm in oracle mode, snr_to_sigma otherwise.
double estimate_sigma_max(const torch::Tensor& z_ch, const NoiseLevelSource& source);

}  // namespace toast::channel
