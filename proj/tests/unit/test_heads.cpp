#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "support.hpp"
#include "toast/errors.hpp"
#include "toast/heads.hpp"
#include "toast/random.hpp"

using namespace toast;
using namespace toast::heads;

namespace {

// Plain-loop SSIM for one single-channel image, valid region.
double ssim_loops(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                  int win, double sigma) {
  std::vector<double> g(win);
  double gs = 0.0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int h = static_cast<int>(a.size()), w = static_cast<int>(a[0].size());
  double total = 0.0;
  int count = 0;
  for (int i = 0; i + win <= h; ++i) {
    for (int j = 0; j + win <= w; ++j) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int u = 0; u < win; ++u) {
        for (int v = 0; v < win; ++v) {
          const double k = g[u] * g[v];
          const double x = a[i + u][j + v], y = b[i + u][j + v];
          ma += k * x;
          mb += k * y;
          saa += k * x * x;
          sbb += k * y * y;
          sab += k * x * y;
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cv = sab - ma * mb;
      total += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / count;
}

std::vector<std::vector<double>> to_grid(const torch::Tensor& img) {
  auto t = img.to(torch::kFloat64).contiguous();
  std::vector<std::vector<double>> out(t.size(0), std::vector<double>(t.size(1)));
  auto acc = t.accessor<double, 2>();
  for (int64_t i = 0; i < t.size(0); ++i)
    for (int64_t j = 0; j < t.size(1); ++j) out[i][j] = acc[i][j];
  return out;
}

}  // namespace

TEST_CASE("zero weights give equal logits and argmax picks the lowest index") {
  Classifier clf(ClassifierConfig{8, {16}, 5});
  torch::NoGradGuard g;
  for (auto& p : clf->parameters()) p.zero_();
  auto logits = clf->forward(torch::randn({3, 8}));
  CHECK(torch::all(logits == 0).item<bool>());
  CHECK(torch::all(predict(logits) == 0).item<bool>());

  auto tied = torch::tensor({{0.0, 2.0, 2.0, 1.0}, {3.0, 3.0, 3.0, 3.0}, {1.0, 0.0, 5.0, 5.0}});
  auto p = predict(tied);
  CHECK(p[0].item<int64_t>() == 1);
  CHECK(p[1].item<int64_t>() == 0);
  CHECK(p[2].item<int64_t>() == 2);
}

TEST_CASE("zero-init classifier adapter leaves logits unchanged") {
  Classifier clf(ClassifierConfig{8, {16}, 5});
  auto x = torch::randn({4, 8});
  auto base = clf->forward(x);
  auto spec = lora::default_specs().at(lora::Role::classifier);
  auto gen = make_generator(7);
  auto set = lora::build_adapter_set(clf->layers(), {{lora::Role::classifier, spec}}, "awgn", 0, gen);
  set.attach(clf->layers());
  CHECK(clf->head->adapter());
  CHECK(test::bit_equal(clf->forward(x), base));
}

TEST_CASE("permuting final-layer rows permutes logits") {
  Classifier clf(ClassifierConfig{8, {16}, 5});
  auto x = torch::randn({4, 8});
  auto base = clf->forward(x);
  auto perm = torch::tensor({3, 0, 4, 1, 2}, torch::kLong);
  {
    torch::NoGradGuard g;
    auto& lin = clf->head->linear;
    lin->weight.copy_(lin->weight.index_select(0, perm));
    lin->bias.copy_(lin->bias.index_select(0, perm));
  }
  CHECK(test::bit_equal(clf->forward(x), base.index_select(1, perm)));
}

TEST_CASE("classifier logits do not depend on batch order") {
  Classifier clf(ClassifierConfig{8, {16}, 5});
  auto x = torch::randn({6, 8});
  auto perm = torch::tensor({5, 2, 0, 1, 4, 3}, torch::kLong);
  auto a = clf->forward(x).index_select(0, perm);
  auto b = clf->forward(x.index_select(0, perm));
  CHECK(test::max_abs_diff(a, b) < 1e-6);
}

TEST_CASE("classifier config and shape errors") {
  CHECK_THROWS_AS(Classifier(ClassifierConfig{8, {16}, 1}), ConfigError);
  Classifier clf(ClassifierConfig{8, {16}, 3});
  CHECK_THROWS_AS(clf->forward(torch::randn({2, 7})), ShapeError);
  CHECK_THROWS_AS(clf->forward(torch::randn({8})), ShapeError);
}

TEST_CASE("total loss hand arithmetic") {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto x = torch::full({2, 1, 4, 4}, 0.3, opts);
  auto x_hat = x + 0.2;  // MSE 0.04
  // two classes, target 0: CE = ln(1 + e^a) = 2 when a = ln(e^2 - 1)
  const double a = std::log(std::exp(2.0) - 1.0);
  auto logits = torch::tensor({{0.0, a}, {0.0, a}}, opts);
  auto y = torch::zeros({2}, torch::kLong);

  auto half = total_loss(x, x_hat, y, logits, WeightPair{0.5, 0.5});
  CHECK(half.recon.item<double>() == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(half.cls.item<double>() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(half.total.item<double>() == doctest::Approx(1.02).epsilon(1e-12));

  auto recon_only = total_loss(x, x_hat, y, logits, WeightPair{1.0, 0.0});
  CHECK(recon_only.total.item<double>() == recon_only.recon.item<double>());

  auto exact = total_loss(x, x, y, torch::tensor({{50.0, -50.0}, {50.0, -50.0}}, opts), {0.5, 0.5});
  CHECK(exact.total.item<double>() < 1e-12);
}

TEST_CASE("total loss is linear in the weights") {
  auto x = torch::rand({3, 1, 5, 5});
  auto x_hat = torch::rand({3, 1, 5, 5});
  auto logits = torch::randn({3, 4});
  auto y = torch::tensor({0, 3, 1}, torch::kLong);
  auto l0 = total_loss(x, x_hat, y, logits, WeightPair::from_recon(0.0)).total.item<double>();
  auto l1 = total_loss(x, x_hat, y, logits, WeightPair::from_recon(1.0)).total.item<double>();
  for (double lam : {0.1, 0.35, 0.8}) {
    auto l = total_loss(x, x_hat, y, logits, WeightPair::from_recon(lam)).total.item<double>();
    CHECK(l == doctest::Approx(lam * l1 + (1 - lam) * l0).epsilon(1e-6));
  }
}

TEST_CASE("off-simplex weights are rejected") {
  auto x = torch::rand({1, 1, 4, 4});
  auto logits = torch::randn({1, 3});
  auto y = torch::zeros({1}, torch::kLong);
  CHECK_THROWS_AS(total_loss(x, x, y, logits, WeightPair{0.6, 0.5}), ConfigError);
  CHECK_THROWS_AS(total_loss(x, x, y, logits, WeightPair{1.1, -0.1}), ConfigError);
  CHECK_NOTHROW(total_loss(x, x, y, logits, WeightPair{0.3, 0.7 + 5e-7}));
}

TEST_CASE("psnr values and sentinel") {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto x = torch::full({1, 1, 8, 8}, 0.5, opts);
  CHECK(psnr(x, x + 0.1) == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(std::isinf(psnr(x, x)));
  CHECK(psnr(x, x) > 0);
  auto per = psnr_per_image(torch::cat({x, x}), torch::cat({x + 0.1, x + 0.01}));
  CHECK(per[0].item<double>() == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(per[1].item<double>() == doctest::Approx(40.0).epsilon(1e-9));
}

TEST_CASE("psnr decreases as added noise grows") {
  auto gen = make_generator(11);
  auto x = torch::rand({8, 1, 16, 16}, gen, torch::kFloat64);
  auto noise = torch::randn({8, 1, 16, 16}, gen, torch::kFloat64);
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
    const double p = psnr(x, x + s * noise);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("ssim identity, symmetry and range") {
  auto gen = make_generator(3);
  auto x = torch::rand({2, 3, 16, 16}, gen);
  auto y = (x + 0.1 * torch::randn({2, 3, 16, 16}, gen)).clamp(0, 1);
  CHECK(ssim(x, x) == 1.0);
  CHECK(ssim(x, y) == ssim(y, x));
  const double s = ssim(x, y);
  CHECK(s < 1.0);
  CHECK(s > -1.0);
}

TEST_CASE("ssim of constant images matches the closed form") {
  // zero variance: SSIM = (2ab + C1) / (a^2 + b^2 + C1)
  const double a = 0.3, b = 0.6, c1 = 1e-4;
  auto x = torch::full({1, 1, 16, 16}, a, torch::kFloat64);
  auto y = torch::full({1, 1, 16, 16}, b, torch::kFloat64);
  CHECK(ssim(x, y) == doctest::Approx((2 * a * b + c1) / (a * a + b * b + c1)).epsilon(1e-10));
}

TEST_CASE("ssim matches a direct loop implementation") {
  auto gen = make_generator(5);
  auto x = torch::rand({1, 1, 20, 17}, gen, torch::kFloat64);
  auto y = (x + 0.2 * torch::randn({1, 1, 20, 17}, gen, torch::kFloat64)).clamp(0, 1);
  const double ref = ssim_loops(to_grid(x[0][0]), to_grid(y[0][0]), 11, 1.5);
  CHECK(ssim(x, y) == doctest::Approx(ref).epsilon(1e-10));
}

TEST_CASE("accuracy and macro F1 hand example") {
  std::vector<int64_t> labels{0, 1, 1, 0};
  std::vector<int64_t> preds{0, 1, 0, 0};
  CHECK(accuracy(labels, preds) == 0.75);
  // class 0: tp 2 fp 1 fn 0 -> 0.8; class 1: tp 1 fp 0 fn 1 -> 2/3
  CHECK(f1_macro(labels, preds) == doctest::Approx((0.8 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK(f1_macro(labels, preds) == doctest::Approx(0.733333).epsilon(1e-5));
  CHECK(f1_macro(labels, labels) == 1.0);
  CHECK_THROWS_AS(accuracy({}, {}), DegenerateInputError);
  CHECK_THROWS_AS(f1_macro({0}, {0, 1}), ShapeError);
}

TEST_CASE("metrics csv round trip") {
  auto path = std::filesystem::temp_directory_path() / "toast_test_metrics.csv";
  std::filesystem::remove(path);
  MetricsRecord a{std::numeric_limits<double>::infinity(), 1.0, 0.5, 0.25, 0.0123, 1.5, 0.35, 10.0, 2, "awgn"};
  MetricsRecord b{21.123456789, 0.87, 0.9, 0.88, 0.004, 0.3, 0.6, 0.0, 3, "rayleigh"};
  write_csv(path, {a});
  append_csv(path, {b});
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  CHECK(header == "psnr,ssim,accuracy,f1_macro,loss_recon,loss_cls,lambda_recon,snr_db,epoch,channel");
  auto rows = read_csv(path);
  REQUIRE(rows.size() == 2);
  CHECK(std::isinf(rows[0].psnr));
  CHECK(rows[0].loss_recon == a.loss_recon);
  CHECK(rows[1].psnr == b.psnr);
  CHECK(rows[1].epoch == 3);
  CHECK(rows[1].channel == "rayleigh");

  std::ofstream(path) << "psnr,ssim\n1,2\n";
  CHECK_THROWS_AS(read_csv(path), FormatError);
  std::ofstream(path) << csv_header() << "\n1,2,3\n";
  CHECK_THROWS_AS(read_csv(path), FormatError);
}
