#include "toast/channel.hpp"

#include <cmath>
#include <limits>

#include "toast/errors.hpp"

namespace toast::channel {

namespace {

struct ComplexParts {
  torch::Tensor re;
  torch::Tensor im;
};

ComplexParts complex_normal(torch::IntArrayRef shape, torch::Generator& gen) {
  // CN(0, 1): each part has variance 1/2.
  const double s = std::sqrt(0.5);
  auto re = torch::randn(shape, gen, torch::kFloat32) * s;
  auto im = torch::randn(shape, gen, torch::kFloat32) * s;
  return {re, im};
}

ComplexParts sample_fading(const ChannelConfig& cfg, torch::IntArrayRef shape,
                           torch::Generator& gen, torch::Dtype dtype) {
  switch (cfg.kind) {
    case ChannelKind::rayleigh:
      return complex_normal(shape, gen);
    case ChannelKind::rician: {
      const double los = std::sqrt(cfg.rician_k / (cfg.rician_k + 1.0));
      const double scatter = std::sqrt(1.0 / (cfg.rician_k + 1.0));
      auto [re, im] = complex_normal(shape, gen);
      return {re * scatter + los, im * scatter};
    }
    case ChannelKind::phase_noise: {
      auto theta = (torch::randn(shape, gen, torch::kFloat32) * cfg.phase_sigma).to(dtype);
      return {torch::cos(theta), torch::sin(theta)};
    }
    default:
      throw ConfigError("sample_fading: channel kind has no complex gain");
  }
}

}  // namespace

std::string_view to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::awgn: return "awgn";
    case ChannelKind::rayleigh: return "rayleigh";
    case ChannelKind::rician: return "rician";
    case ChannelKind::phase_noise: return "phase_noise";
    case ChannelKind::impulse: return "impulse";
  }
  return "unknown";
}

ChannelKind parse_channel_kind(std::string_view name) {
  std::string lower(name);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "awgn") return ChannelKind::awgn;
  if (lower == "rayleigh") return ChannelKind::rayleigh;
  if (lower == "rician") return ChannelKind::rician;
  if (lower == "phase_noise" || lower == "phasenoise" || lower == "phase") {
    return ChannelKind::phase_noise;
  }
  if (lower == "impulse") return ChannelKind::impulse;
  throw ConfigError("unknown channel kind '" + std::string(name) + "'");
}

bool uses_complex_symbols(ChannelKind kind) {
  return kind == ChannelKind::rayleigh || kind == ChannelKind::rician ||
         kind == ChannelKind::phase_noise;
}

void LatentCode::validate() const {
  if (shape.height <= 0 || shape.width <= 0 || shape.channels <= 0) {
    throw ShapeError("latent spatial shape must be positive");
  }
  if (!values.defined() || values.dim() < 1 || values.size(-1) != shape.size()) {
    throw ShapeError("latent length does not match spatial shape product " +
                     std::to_string(shape.size()));
  }
  if (!torch::isfinite(values).all().item<bool>()) {
    throw DegenerateInputError("latent contains non-finite values");
  }
}

void ChannelConfig::validate() const {
  if (std::isnan(snr_db)) throw ConfigError("snr_db is NaN");
  if (rician_k < 0.0) throw ConfigError("rician_k must be >= 0");
  if (impulse_prob < 0.0 || impulse_prob > 1.0) throw ConfigError("impulse_prob must lie in [0, 1]");
  if (impulse_var_mult <= 0.0) throw ConfigError("impulse_var_mult must be > 0");
  if (phase_sigma < 0.0) throw ConfigError("phase_sigma must be >= 0");
}

torch::Tensor normalize_power(const torch::Tensor& z) {
  if (!z.defined() || z.dim() < 1 || z.size(-1) == 0) {
    throw ShapeError("normalize_power: empty latent");
  }
  auto norm = z.norm(2, -1, /*keepdim=*/true);
  if ((norm == 0).any().item<bool>()) {
    throw DegenerateInputError("normalize_power: all-zero latent has no direction");
  }
  const double scale = std::sqrt(static_cast<double>(z.size(-1)));
  return z * scale / norm;
}

double snr_to_sigma(double snr_db) {
  if (std::isinf(snr_db) && snr_db > 0) return 0.0;
  return std::sqrt(std::pow(10.0, -snr_db / 10.0));
}

ChannelOutput apply_channel(const torch::Tensor& z_norm, const ChannelConfig& cfg,
                            torch::Generator& gen) {
  cfg.validate();
  const auto length = z_norm.size(-1);
  const bool complex_kind = uses_complex_symbols(cfg.kind);
  if (complex_kind && length % 2 != 0) {
    throw ConfigError("channel '" + std::string(to_string(cfg.kind)) +
                      "' pairs reals into complex symbols and needs an even latent length, got " +
                      std::to_string(length));
  }

  const double sigma = snr_to_sigma(cfg.snr_db);
  const auto opts = z_norm.options().requires_grad(false);

  ChannelRealization real;
  real.sigma_n = sigma;
  real.transmitted = z_norm.detach();

  torch::Tensor faded;
  if (complex_kind) {
    auto sym_shape = z_norm.sizes().vec();
    sym_shape.back() = length / 2;
    auto [h_re, h_im] = sample_fading(cfg, sym_shape, gen, z_norm.scalar_type());
    h_re = h_re.to(opts.dtype());
    h_im = h_im.to(opts.dtype());
    real.h = torch::complex(h_re, h_im);
    if (cfg.coherent && cfg.kind != ChannelKind::phase_noise) {
      // derotating circular noise leaves its law unchanged, so n is drawn in
      // the derotated frame below
      h_re = (h_re * h_re + h_im * h_im).sqrt();
      h_im = torch::zeros_like(h_re);
    }
    real.gain = torch::complex(h_re, h_im);
    sym_shape.push_back(2);
    auto pairs = z_norm.reshape(sym_shape);
    auto x_re = pairs.select(-1, 0);
    auto x_im = pairs.select(-1, 1);
    auto y_re = h_re * x_re - h_im * x_im;
    auto y_im = h_re * x_im + h_im * x_re;
    faded = torch::stack({y_re, y_im}, -1).reshape(z_norm.sizes());
  } else {
    faded = z_norm;
    real.h = torch::ones_like(z_norm, opts);
    real.gain = real.h;
  }

  if (sigma == 0.0) {
    real.n = torch::zeros_like(z_norm, opts);
    if (cfg.kind == ChannelKind::impulse) {
      real.impulse_mask = torch::zeros(z_norm.sizes(), opts.dtype(torch::kBool));
    }
    return {faded, std::move(real)};
  }

  if (cfg.kind == ChannelKind::impulse) {
    // Background Gaussian plus sparse impulses with m times its variance; the
    // background is scaled so the total additive power still equals sigma^2.
    const double bg = sigma / std::sqrt(1.0 + cfg.impulse_prob * cfg.impulse_var_mult);
    auto background = torch::randn(z_norm.sizes(), gen, opts) * bg;
    auto mask = torch::rand(z_norm.sizes(), gen, opts) < cfg.impulse_prob;
    auto amplitude = torch::randn(z_norm.sizes(), gen, opts) * (bg * std::sqrt(cfg.impulse_var_mult));
    real.n = background + amplitude * mask.to(opts.dtype());
    real.impulse_mask = mask;
  } else {
    real.n = torch::randn(z_norm.sizes(), gen, opts) * sigma;
  }
  auto received = faded + real.n;
  return {received, std::move(real)};
}

double estimate_sigma_max(const torch::Tensor& z_ch, const NoiseLevelSource& source) {
  if (source.realization != nullptr) {
    const auto& ref = source.realization->transmitted;
    if (!ref.defined() || ref.sizes() != z_ch.sizes()) {
      throw ShapeError("estimate_sigma_max: oracle realization does not match received latent");
    }
    auto diff = (z_ch.detach() - ref).to(torch::kFloat64);
    return std::sqrt(diff.pow(2).mean().item<double>());
  }
  if (source.snr_db) return snr_to_sigma(*source.snr_db);
  throw ConfigError("estimate_sigma_max: need an oracle realization or an SNR estimate");
}

}  // namespace toast::channel
