#include <cmath>

#include "support.hpp"
#include "toast/errors.hpp"
#include "toast/random.hpp"
#include "toast/swin.hpp"

using namespace toast;
using namespace toast::swin;

namespace {

void set_linear(lora::AdaptableLinearImpl& l, const torch::Tensor& w) {
  torch::NoGradGuard g;
  l.linear->weight.copy_(w);
  l.linear->bias.zero_();
}

CodecConfig small_config() {
  CodecConfig cfg;
  cfg.image_height = cfg.image_width = 16;
  cfg.image_channels = 3;
  cfg.dims = {8, 16};
  cfg.heads = {2, 2};
  cfg.depths = {2, 2};
  cfg.window = 2;
  cfg.mlp_ratio = 2.0;
  cfg.latent = {2, 2, 4};
  return cfg;
}

}  // namespace

TEST_CASE("uniform attention averages V over the window") {
  WindowAttention attn(4, 1, 2);
  set_linear(*attn->q, torch::zeros({4, 4}));
  set_linear(*attn->k, torch::zeros({4, 4}));
  set_linear(*attn->v, torch::eye(4));
  set_linear(*attn->out, torch::eye(4));
  {
    torch::NoGradGuard g;
    attn->bias_table.zero_();
  }
  auto x = torch::randn({1, 2, 2, 4});
  auto y = attn(x, 0);
  auto mean = x.reshape({4, 4}).mean(0);
  for (int i = 0; i < 4; ++i) CHECK(test::max_abs_diff(y.reshape({4, 4})[i], mean) < 1e-6);
}

TEST_CASE("constant input is unaffected by the shift") {
  WindowAttention attn(8, 2, 4);
  auto x = torch::ones({2, 8, 8, 8}) * 0.7;
  CHECK(test::max_abs_diff(attn(x, 0), attn(x, 2)) < 1e-6);
}

TEST_CASE("two-token window against hand softmax") {
  // A 1x2 map padded to one 2x2 window; padded keys are masked, so the two
  // real tokens form a two-token window.
  WindowAttention attn(2, 1, 2);
  set_linear(*attn->q, torch::eye(2));
  set_linear(*attn->k, torch::eye(2) * 2.0);
  set_linear(*attn->v, torch::eye(2));
  set_linear(*attn->out, torch::eye(2));
  const double b01 = 0.5;   // query (0,0), key (0,1): offset dy=0, dx=-1
  const double b10 = -0.3;  // query (0,1), key (0,0): offset dy=0, dx=+1
  {
    torch::NoGradGuard g;
    attn->bias_table.zero_();
    attn->bias_table[1 * 3 + 0][0] = b01;
    attn->bias_table[1 * 3 + 2][0] = b10;
  }
  auto x = torch::tensor({1.0f, 0.0f, 0.0f, 1.0f}).view({1, 1, 2, 2});
  auto y = attn(x, 0).view({2, 2});
  const double s = 2.0 / std::sqrt(2.0);
  const double w00 = std::exp(s) / (std::exp(s) + std::exp(b01));
  const double w11 = std::exp(s) / (std::exp(s) + std::exp(b10));
  CHECK(y[0][0].item<double>() == doctest::Approx(w00).epsilon(1e-6));
  CHECK(y[0][1].item<double>() == doctest::Approx(1 - w00).epsilon(1e-6));
  CHECK(y[1][0].item<double>() == doctest::Approx(1 - w11).epsilon(1e-6));
  CHECK(y[1][1].item<double>() == doctest::Approx(w11).epsilon(1e-6));
}

TEST_CASE("shifted windows give exactly zero weight across regions") {
  const std::int64_t m = 2, shift = 1, side = 4;
  WindowAttention attn(4, 2, m);
  auto [y, weights] = attn->forward_with_weights(torch::randn({1, side, side, 4}), shift);
  REQUIRE(weights.sizes() == torch::IntArrayRef({1, 4, 2, 4, 4}));
  // Original coordinates of each token in each rolled window.
  auto original = [&](std::int64_t win, std::int64_t t) {
    const auto ry = (win / (side / m)) * m + t / m;
    const auto rx = (win % (side / m)) * m + t % m;
    return std::pair{(ry + shift) % side, (rx + shift) % side};
  };
  int zeros = 0;
  for (std::int64_t win = 0; win < 4; ++win) {
    for (std::int64_t i = 0; i < 4; ++i) {
      for (std::int64_t j = 0; j < 4; ++j) {
        auto [yi, xi] = original(win, i);
        auto [yj, xj] = original(win, j);
        const bool contiguous = std::abs(yi - yj) < m && std::abs(xi - xj) < m;
        for (std::int64_t h = 0; h < 2; ++h) {
          const auto w = weights[0][win][h][i][j].item<float>();
          if (contiguous) {
            CHECK(w > 0.0f);
          } else {
            CHECK(w == 0.0f);
            ++zeros;
          }
        }
      }
    }
  }
  CHECK(zeros > 0);
}

TEST_CASE("softmax rows sum to one, padded and shifted") {
  WindowAttention attn(6, 3, 4);
  for (auto shift : {0, 2}) {
    auto [y, w] = attn->forward_with_weights(torch::randn({2, 7, 10, 6}), shift);
    CHECK(y.sizes() == torch::IntArrayRef({2, 7, 10, 6}));
    CHECK(test::max_abs_diff(w.sum(-1), torch::ones_like(w.sum(-1))) < 1e-6);
    CHECK(torch::isfinite(y).all().item<bool>());
  }
}

TEST_CASE("attention cost grows linearly with the number of windows") {
  WindowAttention attn(8, 2, 4);
  attn->score_macs = 0;
  attn(torch::randn({1, 8, 8, 8}), 0);
  const auto small = attn->score_macs;
  attn->score_macs = 0;
  attn(torch::randn({1, 16, 16, 8}), 0);
  const auto large = attn->score_macs;
  // 4 windows vs 16 windows of M^2 = 16 tokens: 2 * windows * M^4 * d
  CHECK(small == 2 * 4 * 16 * 16 * 8);
  CHECK(large == 4 * small);
}

TEST_CASE("attention configuration errors") {
  CHECK_THROWS_AS(WindowAttention(10, 3, 4), ConfigError);
  WindowAttention attn(8, 2, 4);
  CHECK_THROWS_AS(attn(torch::randn({1, 4, 4, 8}), 4), ConfigError);
  CHECK_THROWS_AS(attn(torch::randn({1, 4, 4, 6}), 0), ShapeError);
}

TEST_CASE("patch merge and expand shapes and parameters") {
  PatchMerge merge(6, 10);
  auto x = torch::randn({2, 4, 4, 6});
  auto y = merge(x);
  CHECK(y.sizes() == torch::IntArrayRef({2, 2, 2, 10}));
  CHECK(merge->reduction->weight.numel() == (4 * 6) * 10);
  CHECK_THROWS_AS(merge(torch::randn({1, 3, 4, 6})), ShapeError);

  PatchExpand expand(10, 6);
  auto z = expand(y);
  CHECK(z.sizes() == x.sizes());
  CHECK(expand->expansion->weight.numel() == 10 * (4 * 6));

  PatchMerge ident(3, 3);
  {
    torch::NoGradGuard g;
    ident->reduction->weight.zero_();
    ident->reduction->weight.narrow(1, 0, 3).copy_(torch::eye(3));
  }
  auto c = ident(torch::full({1, 4, 4, 3}, 0.25));
  CHECK(test::max_abs_diff(c, torch::full({1, 2, 2, 3}, 0.25)) < 1e-7);
}

TEST_CASE("patchify round trip") {
  auto img = torch::rand({2, 3, 8, 8});
  auto p = patchify(img, 2);
  CHECK(p.sizes() == torch::IntArrayRef({2, 4, 4, 12}));
  CHECK(test::bit_equal(unpatchify(p, 2, 3), img));
}

TEST_CASE("default codec: 32x32x3 to 2304 and back") {
  CodecConfig cfg;
  SwinEncoder enc(cfg);
  SwinDecoder dec(cfg);
  torch::NoGradGuard g;
  auto x = torch::rand({3, 3, 32, 32});
  auto z = enc(x);
  CHECK(z.sizes() == torch::IntArrayRef({3, 2304}));
  auto xh = dec(z);
  CHECK(xh.sizes() == x.sizes());
  CHECK(xh.min().item<float>() >= 0.0f);
  CHECK(xh.max().item<float>() <= 1.0f);

  auto perm = torch::tensor({2, 0, 1}, torch::kLong);
  CHECK(test::max_abs_diff(enc(x.index_select(0, perm)), z.index_select(0, perm)) < 1e-5);
  CHECK_THROWS_AS(enc(torch::rand({1, 1, 32, 32})), ShapeError);
  CHECK_THROWS_AS(dec(torch::rand({1, 100})), ShapeError);
}

TEST_CASE("grayscale 28x28 codec pads its windows") {
  CodecConfig cfg;
  cfg.image_height = cfg.image_width = 28;
  cfg.image_channels = 1;
  SwinEncoder enc(cfg);
  SwinDecoder dec(cfg);
  torch::NoGradGuard g;
  auto x = torch::rand({2, 1, 28, 28});
  auto z = enc(x);
  CHECK(z.size(1) == 2304);
  CHECK(dec(z).sizes() == x.sizes());
  CHECK(torch::isfinite(dec(z)).all().item<bool>());
}

TEST_CASE("codec gradient matches finite differences") {
  auto cfg = small_config();
  SwinEncoder enc(cfg);
  SwinDecoder dec(cfg);
  enc->to(torch::kFloat64);
  dec->to(torch::kFloat64);
  auto gen = make_generator(3);
  auto x = torch::rand({2, 3, 16, 16}, gen, torch::kFloat64);
  auto loss_fn = [&] { return (dec(enc(x)) - x).pow(2).mean(); };

  std::vector<torch::Tensor> probes = {enc->stages[0][1]->attn->q->linear->weight,
                                       enc->stages[1][0]->fc1->linear->weight,
                                       enc->projection->linear->weight,
                                       dec->stages[0][1]->attn->bias_table,
                                       dec->pixel_head->weight};
  auto loss = loss_fn();
  loss.backward();
  for (auto& w : probes) {
    auto flat = w.view({-1});
    const auto i = flat.numel() / 3;
    const double analytic = w.grad().view({-1})[i].item<double>();
    const double h = 1e-6;
    double plus, minus;
    {
      torch::NoGradGuard g;
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      plus = loss_fn().item<double>();
      flat[i] = orig - h;
      minus = loss_fn().item<double>();
      flat[i] = orig;
    }
    const double numeric = (plus - minus) / (2 * h);
    CAPTURE(analytic);
    CAPTURE(numeric);
    CHECK(std::abs(analytic - numeric) <= 1e-4 * std::max(std::abs(numeric), 1e-8));
  }
}

TEST_CASE("gradients are finite after a training step") {
  auto cfg = small_config();
  SwinEncoder enc(cfg);
  SwinDecoder dec(cfg);
  std::vector<torch::Tensor> params = enc->parameters();
  for (auto& p : dec->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(1e-3));
  auto x = torch::rand({4, 3, 16, 16});
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    (dec(enc(x)) - x).pow(2).mean().backward();
    for (auto& p : params) {
      REQUIRE(p.grad().defined());
      CHECK(torch::isfinite(p.grad()).all().item<bool>());
    }
    opt.step();
  }
}

TEST_CASE("codec config validation") {
  CodecConfig cfg;
  cfg.heads = {5, 6};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.depths = {2};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.image_height = 30;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
