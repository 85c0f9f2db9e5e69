#include <cmath>

#include "support.hpp"
#include "toast/channel.hpp"
#include "toast/errors.hpp"
#include "toast/random.hpp"

using namespace toast;
using namespace toast::channel;

namespace {

double to_db(double x) { return 10.0 * std::log10(x); }

torch::Tensor random_normalized(std::int64_t n, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return normalize_power(torch::randn({n}, gen, torch::kFloat64).to(torch::kFloat32));
}

// gain (.) x recomputed from the realization, independent of the channel code.
torch::Tensor faded_reference(const torch::Tensor& x, const ChannelRealization& r) {
  if (!r.gain.is_complex()) return x;
  auto xc = torch::view_as_complex(x.to(torch::kFloat64).reshape({-1, 2}).contiguous());
  auto y = r.gain.to(torch::kComplexDouble).reshape({-1}) * xc;
  return torch::view_as_real(y).reshape(x.sizes());
}

}  // namespace

TEST_CASE("normalize_power hand example") {
  auto z = normalize_power(torch::tensor({3.0, 4.0}, torch::kFloat64));
  // sqrt(2)/5 * [3, 4]
  CHECK(z[0].item<double>() == doctest::Approx(3.0 * std::sqrt(2.0) / 5.0).epsilon(1e-12));
  CHECK(z[1].item<double>() == doctest::Approx(4.0 * std::sqrt(2.0) / 5.0).epsilon(1e-12));
  CHECK(z[0].item<double>() == doctest::Approx(0.8485).epsilon(1e-4));
  CHECK(z[1].item<double>() == doctest::Approx(1.1314).epsilon(1e-4));
  CHECK(z.pow(2).mean().item<double>() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalize_power is idempotent and rejects zero") {
  auto z = random_normalized(2304, 3);
  CHECK(test::max_abs_diff(normalize_power(z), z) < 1e-5);
  CHECK_THROWS_AS(normalize_power(torch::zeros({2})), DegenerateInputError);
}

TEST_CASE("normalize_power property: unit mean power") {
  auto gen = make_generator(11);
  for (int i = 0; i < 50; ++i) {
    const auto n = 2 + i * 37;
    auto z = torch::randn({n}, gen, torch::kFloat64) * (0.01 + i);
    CHECK(std::abs(normalize_power(z).pow(2).mean().item<double>() - 1.0) < 1e-6);
  }
  auto batch = torch::randn({4, 100}, gen) * 5.0;
  auto p = normalize_power(batch).pow(2).mean(-1);
  CHECK(test::max_abs_diff(p, torch::ones({4})) < 1e-5);
}

TEST_CASE("snr_to_sigma definition") {
  CHECK(std::pow(snr_to_sigma(10.0), 2) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(std::pow(snr_to_sigma(0.0), 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::pow(snr_to_sigma(20.0), 2) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(snr_to_sigma(INFINITY) == 0.0);
}

TEST_CASE("empirical SNR matches configuration for every channel kind") {
  const std::int64_t n = 200000;
  auto x = random_normalized(n, 5);
  for (auto kind : {ChannelKind::awgn, ChannelKind::rayleigh, ChannelKind::rician,
                    ChannelKind::phase_noise, ChannelKind::impulse}) {
    for (double snr : {0.0, 10.0, 25.0}) {
      CAPTURE(to_string(kind));
      CAPTURE(snr);
      ChannelConfig cfg;
      cfg.kind = kind;
      cfg.snr_db = snr;
      auto gen = make_generator(100 + static_cast<int>(kind));
      auto out = apply_channel(x, cfg, gen);
      auto noise = out.received.to(torch::kFloat64) - faded_reference(x, out.realization);
      const double measured = to_db(x.to(torch::kFloat64).pow(2).mean().item<double>() /
                                    noise.pow(2).mean().item<double>());
      CHECK(std::abs(measured - snr) < 0.5);
    }
  }
}

TEST_CASE("rayleigh gains have unit mean power") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::rayleigh;
  auto gen = make_generator(9);
  auto out = apply_channel(random_normalized(200000, 1), cfg, gen);
  CHECK(out.realization.h.numel() == 100000);
  const double p = out.realization.h.abs().pow(2).mean().item<double>();
  CHECK(std::abs(p - 1.0) < 0.02);
}

TEST_CASE("rician line-of-sight mean") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::rician;
  cfg.rician_k = 2.0;
  auto gen = make_generator(10);
  auto out = apply_channel(random_normalized(200000, 2), cfg, gen);
  auto h = out.realization.h;
  CHECK(torch::real(h).mean().item<double>() == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(0.01));
  CHECK(std::abs(h.abs().pow(2).mean().item<double>() - 1.0) < 0.02);
}

TEST_CASE("noiseless AWGN is the identity") {
  ChannelConfig cfg;
  cfg.snr_db = INFINITY;
  auto gen = make_generator(1);
  auto x = random_normalized(64, 4);
  auto out = apply_channel(x, cfg, gen);
  CHECK(test::bit_equal(out.received, x));
}

TEST_CASE("impulse fraction") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::impulse;
  cfg.impulse_prob = 0.01;
  auto gen = make_generator(12);
  auto out = apply_channel(random_normalized(1000000, 6), cfg, gen);
  const double frac = out.realization.impulse_mask.to(torch::kFloat64).mean().item<double>();
  CHECK(frac >= 0.008);
  CHECK(frac <= 0.012);
}

TEST_CASE("phase noise preserves symbol magnitude") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::phase_noise;
  cfg.phase_sigma = 0.3;
  cfg.snr_db = INFINITY;
  auto gen = make_generator(13);
  auto x = random_normalized(1000, 7).to(torch::kFloat64);
  auto out = apply_channel(x, cfg, gen);
  auto mag_in = x.reshape({-1, 2}).pow(2).sum(-1).sqrt();
  auto mag_out = out.received.reshape({-1, 2}).pow(2).sum(-1).sqrt();
  CHECK(test::max_abs_diff(mag_in, mag_out) < 1e-12);
}

TEST_CASE("coherent fading keeps the symbol phase") {
  auto x = random_normalized(2000, 21).to(torch::kFloat64);
  for (auto kind : {ChannelKind::rayleigh, ChannelKind::rician}) {
    CAPTURE(to_string(kind));
    ChannelConfig cfg;
    cfg.kind = kind;
    cfg.snr_db = INFINITY;
    auto g1 = make_generator(3), g2 = make_generator(3);
    auto coh = apply_channel(x, cfg, g1);
    cfg.coherent = false;
    auto raw = apply_channel(x, cfg, g2);
    CHECK(test::bit_equal(coh.realization.h, raw.realization.h));
    auto xc = torch::view_as_complex(x.reshape({-1, 2}).contiguous());
    auto yc = torch::view_as_complex(coh.received.reshape({-1, 2}).contiguous());
    auto hc = coh.realization.h.to(torch::kComplexDouble);
    CHECK(test::max_abs_diff(torch::view_as_real(yc), torch::view_as_real(xc * hc.abs())) < 1e-12);
    auto yr = torch::view_as_complex(raw.received.reshape({-1, 2}).contiguous());
    CHECK(test::max_abs_diff(torch::view_as_real(yr), torch::view_as_real(xc * hc)) < 1e-12);
  }
}

TEST_CASE("complex channels reject odd length") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::rayleigh;
  auto gen = make_generator(1);
  CHECK_THROWS_AS(apply_channel(torch::ones({5}), cfg, gen), ConfigError);
}

TEST_CASE("same seed gives bit-identical realizations") {
  auto x = random_normalized(2304, 8);
  for (auto kind : {ChannelKind::awgn, ChannelKind::rician, ChannelKind::impulse}) {
    ChannelConfig cfg;
    cfg.kind = kind;
    auto g1 = make_generator(77);
    auto g2 = make_generator(77);
    auto a = apply_channel(x, cfg, g1);
    auto b = apply_channel(x, cfg, g2);
    CHECK(test::bit_equal(a.received, b.received));
    CHECK(test::bit_equal(a.realization.n, b.realization.n));
  }
}

TEST_CASE("channel is differentiable w.r.t. the latent") {
  ChannelConfig cfg;
  cfg.kind = ChannelKind::rician;
  auto gen = make_generator(3);
  auto x = random_normalized(64, 9).requires_grad_(true);
  auto out = apply_channel(x, cfg, gen);
  out.received.sum().backward();
  CHECK(x.grad().defined());
  CHECK(torch::isfinite(x.grad()).all().item<bool>());
}

TEST_CASE("estimate_sigma_max modes") {
  auto x = random_normalized(10000, 10);
  ChannelRealization clean;
  clean.transmitted = x;
  CHECK(estimate_sigma_max(x, {&clean, std::nullopt}) == 0.0);

  auto gen = make_generator(14);
  auto noisy = x + torch::randn({10000}, gen) * 0.3;
  CHECK(std::abs(estimate_sigma_max(noisy, {&clean, std::nullopt}) - 0.3) < 0.01);

  CHECK(estimate_sigma_max(x, {nullptr, 10.0}) == doctest::Approx(std::sqrt(0.1)));
  CHECK_THROWS_AS(estimate_sigma_max(x, {nullptr, std::nullopt}), ConfigError);
}

TEST_CASE("config validation") {
  ChannelConfig cfg;
  cfg.impulse_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.rician_k = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_channel_kind("Rayleigh") == ChannelKind::rayleigh);
  CHECK_THROWS_AS(parse_channel_kind("wifi"), ConfigError);
}

TEST_CASE("latent code validation") {
  LatentCode code{torch::zeros({2304}), {}};
  CHECK_NOTHROW(code.validate());
  code.values = torch::zeros({2300});
  CHECK_THROWS_AS(code.validate(), ShapeError);
  code.values = torch::full({2304}, NAN);
  CHECK_THROWS_AS(code.validate(), DegenerateInputError);
}
