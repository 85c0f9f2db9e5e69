#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/random.hpp"
#include "toast/report.hpp"

using namespace toast;
using namespace toast::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("toast_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.name = "tiny";
  c.seed = 11;
  c.output_dir = out;
  c.dataset.root = fs::path(TOAST_SOURCE_DIR) / "data" / "mnist-subset";
  c.dataset.train_limit = 1000;
  c.dataset.test_limit = 1000;
  c.dataset.val_limit = 100;
  c.dataset.seed = 3;
  c.codec.dims = {16, 32};
  c.codec.depths = {1, 1};
  c.codec.heads = {2, 4};
  c.codec.latent = {6, 6, 8};
  c.denoiser.net.width = 16;
  c.denoiser.net.blocks = 1;
  c.denoiser.net.time_dim = 16;
  c.denoiser.sigma_data = 1.0;
  c.denoiser.train = {2, edm::SamplerMode::alg1, 0.002};
  c.denoiser.eval = {2, edm::SamplerMode::heun, 0.002};
  c.classifier_hidden = {32};
  c.agent.epsilon.decay_steps = 20;
  c.optim.lr_start = 2e-3;
  c.optim.lr_end = 2e-4;
  c.optim.epochs = 2;
  c.optim.batch_size = 50;
  c.eval.batch_size = 200;
  for (auto& [role, spec] : c.adapt.specs) {
    spec.rank = 4;
    spec.scale_hat = 4.0;
  }
  c.resolve();
  return c;
}

const data::Splits& mnist_splits() {
  static const data::Splits splits = data::load_dataset(tiny_config("unused").dataset);
  return splits;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config JSON round trip and validation") {
  auto c = tiny_config("runs/x");
  c.ablation.no_edm = true;
  c.channel.params.kind = channel::ChannelKind::rician;
  c.adapt.specs[lora::Role::decoder].rank = 5;
  c.adapt.specs[lora::Role::decoder].scale_hat = 2.5;
  nlohmann::json j = c;
  auto back = j.get<ExperimentConfig>();
  back.resolve();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.fingerprint() == c.fingerprint());
  CHECK(back.adapt.specs.at(lora::Role::decoder).alpha() == doctest::Approx(0.5));
  back.seed += 1;
  CHECK(back.fingerprint() != c.fingerprint());

  for (const char* name : {"desk.json", "full.json"}) {
    auto cfg = load_config(fs::path(TOAST_SOURCE_DIR) / "configs" / name);
    CHECK(cfg.codec.latent_size() == 2304);
  }
  auto full = load_config(fs::path(TOAST_SOURCE_DIR) / "configs" / "full.json");
  CHECK(full.optim.lr_start == 1e-4);
  CHECK(full.optim.lr_end == 1e-6);
  CHECK(full.optim.epochs == 50);
  CHECK(full.optim.batch_size == 128);
  CHECK(full.optim.grad_clip == 1.0);

  auto bad = c;
  bad.optim.lr_end = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.denoiser.schedule = "sometimes";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.eval.channels = {"awgn", "underwater"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto dir = scratch("config");
  std::ofstream(dir / "broken.json") << "{\"optimizer\": {\"epochs\": \"many\"}}";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
  save_config(c, dir / "saved.json");
  CHECK(load_config(dir / "saved.json").fingerprint() == c.fingerprint());
}

TEST_CASE("cosine schedule endpoints") {
  OptimizerSettings s;
  CHECK(cosine_lr(s, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(cosine_lr(s, 49) == doctest::Approx(1e-6).epsilon(1e-12));
  for (std::int64_t e = 1; e < 50; ++e) CHECK(cosine_lr(s, e) < cosine_lr(s, e - 1));
  s.epochs = 3;
  CHECK(cosine_lr(s, 1) == doctest::Approx(0.5 * (1e-4 + 1e-6)).epsilon(1e-12));
  s.epochs = 1;
  CHECK(cosine_lr(s, 0) == 1e-4);
}

TEST_CASE("gradient clipping bounds the global norm") {
  auto gen = make_generator(4);
  std::vector<torch::Tensor> params;
  for (auto n : {1000, 37, 250000}) {
    auto p = torch::zeros({n}, torch::requires_grad());
    p.mutable_grad() = torch::randn({n}, gen) * 3.0;
    params.push_back(p);
  }
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  const double before = clip_grad_norm(params, 1.0);
  CHECK(before == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
  CHECK(grad_norm(params) <= 1.0 + 1e-6);
  CHECK(grad_norm(params) > 1.0 - 1e-5);
  auto small = params[1].grad().clone();
  clip_grad_norm(params, 10.0);
  CHECK(test::bit_equal(params[1].grad(), small));
}

TEST_CASE("pipeline stages and the no-EDM call site") {
  auto cfg = tiny_config(scratch("pipeline"));
  SemanticModel model(cfg);
  auto x = mnist_splits().test.images.narrow(0, 0, 8);
  channel::ChannelConfig ch;
  ch.snr_db = 5.0;
  auto g1 = make_generator(9), g2 = make_generator(9);
  torch::NoGradGuard ng;
  auto with = run_pipeline(*model, x, {ch, false, true, cfg.denoiser.eval}, g1);
  auto without = run_pipeline(*model, x, {ch, false, false, cfg.denoiser.eval}, g2);
  CHECK(with.z.sizes() == torch::IntArrayRef{8, 288});
  CHECK(test::bit_equal(with.z, without.z));
  CHECK(test::bit_equal(with.z_norm, without.z_norm));
  CHECK(test::bit_equal(with.z_ch, without.z_ch));
  CHECK(test::bit_equal(without.z_dn, without.z_ch));
  CHECK_FALSE(test::bit_equal(with.z_dn, with.z_ch));
  CHECK(test::bit_equal(without.x_hat, model->decoder->forward(without.z_ch)));
  CHECK(test::bit_equal(without.logits, model->classifier->forward(without.z_ch)));
  CHECK(test::bit_equal(with.x_hat, model->decoder->forward(with.z_dn)));
  CHECK(with.sigma_max == doctest::Approx(channel::snr_to_sigma(5.0)));
  CHECK(with.z_norm.pow(2).mean(1).sub(1).abs().max().item<double>() < 1e-5);

  auto g3 = make_generator(9);
  auto oracle = run_pipeline(*model, x, {ch, true, true, cfg.denoiser.eval}, g3);
  const double rms = (oracle.z_ch - oracle.z_norm).pow(2).mean().sqrt().item<double>();
  CHECK(oracle.sigma_max == doctest::Approx(rms).epsilon(1e-5));
}

TEST_CASE("smoke training, clipping, logs and checkpoints") {
  auto dir = scratch("smoke");
  auto cfg = tiny_config(dir);
  Trainer trainer(cfg, mnist_splits());
  double worst = 0.0;
  std::int64_t batches = 0;
  TrainerHooks hooks;
  hooks.on_batch = [&](const BatchStats& b) {
    worst = std::max(worst, b.grad_norm_clipped);
    CHECK(b.lambda_recon >= 0.0);
    CHECK(b.lambda_recon <= 1.0);
    CHECK(b.snr_db >= 0.0);
    CHECK(b.snr_db <= 30.0);
    ++batches;
  };
  auto epochs = trainer.run(hooks);
  REQUIRE(epochs.size() == 2);
  MESSAGE("epoch losses " << epochs[0].loss << " -> " << epochs[1].loss);
  CHECK(epochs[1].loss < epochs[0].loss);
  CHECK(worst <= 1.0 + 1e-6);
  CHECK(batches == 40);
  CHECK(epochs[0].lr == doctest::Approx(2e-3));
  CHECK(epochs[1].lr == doctest::Approx(2e-4));
  CHECK(trainer.weight_trajectory().size() == 40);
  CHECK(trainer.agent() != nullptr);
  CHECK(trainer.agent()->steps() == 40);

  auto rows = heads::read_csv(dir / "metrics.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].epoch == 1);
  CHECK(rows[1].epoch == 2);
  CHECK(rows[1].snr_db == 10.0);
  std::ifstream log(dir / "train_log.csv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 41);

  auto bundle = load_model(dir / "checkpoint.ckpt");
  CHECK(bundle.epoch == 2);
  CHECK(bundle.model->fingerprint() == trainer.model()->fingerprint());
  CHECK(bundle.final_lambda == trainer.weight_trajectory().back().lambda_recon);
}

TEST_CASE("resume reproduces the next epoch bit for bit") {
  auto dir = scratch("resume");
  auto cfg = tiny_config(dir);
  std::vector<double> full_losses;
  {
    Trainer a(cfg, mnist_splits());
    a.train_epoch();
    fs::copy_file(dir / "checkpoint.ckpt", dir / "epoch1.ckpt");
    TrainerHooks h;
    h.on_batch = [&](const BatchStats& b) { full_losses.push_back(b.loss); };
    a.train_epoch(h);
  }
  const auto metrics_a = slurp(dir / "metrics.csv");

  Trainer b(dir / "epoch1.ckpt", mnist_splits());
  CHECK(b.epoch() == 1);
  CHECK(b.steps() == 20);
  std::vector<double> resumed;
  TrainerHooks h;
  h.on_batch = [&](const BatchStats& s) { resumed.push_back(s.loss); };
  b.train_epoch(h);
  REQUIRE(resumed.size() == full_losses.size());
  for (std::size_t i = 0; i < resumed.size(); ++i) CHECK(resumed[i] == full_losses[i]);

  // a fresh run with the same seed writes the same metrics file
  auto dir2 = scratch("resume_again");
  auto cfg2 = cfg;
  cfg2.output_dir = dir2;
  Trainer c(cfg2, mnist_splits());
  c.run();
  CHECK(slurp(dir2 / "metrics.csv") == metrics_a);
}

TEST_CASE("static weights change only the weighting") {
  auto dir = scratch("static");
  auto cfg = tiny_config(dir / "rl");
  cfg.optim.epochs = 1;
  auto st = cfg;
  st.output_dir = dir / "static";
  st.ablation.static_weights = true;
  Trainer a(cfg, mnist_splits());
  Trainer b(st, mnist_splits());
  CHECK(a.model()->fingerprint() == b.model()->fingerprint());
  CHECK(b.agent() == nullptr);
  a.run();
  b.run();
  const auto& ta = a.weight_trajectory();
  const auto& tb = b.weight_trajectory();
  REQUIRE(ta.size() == tb.size());
  bool agent_moved = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(tb[i].lambda_recon == 0.5);
    CHECK(ta[i].snr_db == tb[i].snr_db);
    agent_moved = agent_moved || ta[i].lambda_recon != 0.5;
  }
  CHECK(agent_moved);
  CHECK(heads::read_csv(dir / "static" / "metrics.csv").front().lambda_recon == 0.5);
}

TEST_CASE("non-finite loss aborts with a diagnostic checkpoint") {
  auto dir = scratch("nan");
  Trainer t(tiny_config(dir), mnist_splits());
  {
    torch::NoGradGuard ng;
    t.model()->decoder->pixel_head->bias.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  auto x = mnist_splits().train.images.narrow(0, 0, 4);
  auto y = mnist_splits().train.labels.narrow(0, 0, 4);
  try {
    t.train_batch(x, y, 10.0, 0.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("non-finite loss") != std::string::npos);
  }
  REQUIRE(fs::exists(dir / "diagnostic.ckpt"));
  CHECK(load_model(dir / "diagnostic.ckpt").epoch == 0);
}

TEST_CASE("evaluation grid, determinism and chance level") {
  auto cfg = tiny_config(scratch("eval"));
  SemanticModel model(cfg);
  const auto& test = mnist_splits().test;
  auto req = eval_request(cfg);
  auto rows = evaluate(*model, test, req);
  REQUIRE(rows.size() == 7);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].snr_db == req.snrs[i]);
    CHECK(rows[i].channel == "awgn");
    CHECK(std::isfinite(rows[i].psnr));
    // an untrained model is at chance: 1/K within 3 binomial standard deviations
    const double sd = std::sqrt(0.1 * 0.9 / static_cast<double>(test.size()));
    CHECK(std::abs(rows[i].accuracy - 0.1) < 3.0 * sd);
  }
  auto again = evaluate(*model, test, req);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(again[i].psnr == rows[i].psnr);
    CHECK(again[i].accuracy == rows[i].accuracy);
  }
  req.channels = {channel::ChannelKind::rayleigh, channel::ChannelKind::impulse};
  req.snrs = {0, 30};
  CHECK(evaluate(*model, test, req).size() == 4);
  CHECK_THROWS_AS(evaluate(*model, data::Dataset{}, req), DataError);
}

TEST_CASE("adaptation freezes the base and no-LoRA attaches nothing") {
  auto dir = scratch("adapt");
  auto cfg = tiny_config(dir);
  SemanticModel model(cfg);
  const auto& splits = mnist_splits();
  auto x = splits.test.images.narrow(0, 0, 6);
  channel::ChannelConfig ch;
  ch.kind = channel::ChannelKind::rayleigh;
  ch.snr_db = 10.0;
  auto forward = [&] {
    torch::NoGradGuard ng;
    auto g = make_generator(5);
    return run_pipeline(*model, x, {ch, false, true, cfg.denoiser.eval}, g).x_hat;
  };
  const auto base_out = forward();
  const auto fp = model->fingerprint();

  auto off = cfg;
  off.ablation.no_lora = true;
  AdaptRequest req;
  req.max_epochs = 2;
  req.library = dir / "lib";
  auto none = adapt_to_channel(*model, off, splits, req);
  CHECK(none.adapters.entries.empty());
  CHECK(none.trainable_params == 0);
  CHECK(test::bit_equal(forward(), base_out));
  CHECK_FALSE(fs::exists(dir / "lib"));

  auto res = adapt_to_channel(*model, cfg, splits, req);
  CHECK(res.base_fingerprint_before == fp);
  CHECK(res.base_fingerprint_after == fp);
  CHECK(model->fingerprint() == fp);
  CHECK(res.epochs_run >= 1);
  CHECK(res.epochs_run <= 2);
  CHECK(res.trainable_params == res.adapters.parameter_count());
  CHECK(res.trainable_fraction() > 0.0);
  CHECK(res.trainable_fraction() <= 0.05);
  for (const auto& p : model->parameters()) CHECK(p.requires_grad());

  auto layers = model->layers();
  const auto adapted_out = forward();
  lora::AdapterSet::detach(layers);
  CHECK(test::bit_equal(forward(), base_out));
  REQUIRE(fs::exists(res.saved_to));
  lora::AdapterLibrary lib(dir / "lib");
  lib.load("rayleigh", fp).attach(layers);
  CHECK(test::bit_equal(forward(), adapted_out));
  lora::AdapterSet::detach(layers);

  auto bad = req;
  bad.fraction = 0.0;
  CHECK_THROWS_AS(adapt_to_channel(*model, cfg, splits, bad), ConfigError);
}

TEST_CASE("report curves and summary table") {
  auto dir = scratch("report");
  auto row = [](const std::string& ch, double snr, double psnr, double acc) {
    heads::MetricsRecord r;
    r.channel = ch;
    r.snr_db = snr;
    r.psnr = psnr;
    r.ssim = 0.5;
    r.accuracy = acc;
    r.f1_macro = acc;
    r.epoch = 3;
    return r;
  };
  std::vector<heads::MetricsRecord> a, b;
  for (double s : {0.0, 10.0, 20.0}) {
    a.push_back(row("awgn", s, 10 + s / 2, 0.5));
    a.push_back(row("rayleigh", s, 8 + s / 3, 0.4));
    b.push_back(row("awgn", s, 9 + s / 2, 0.45));
    b.push_back(row("rayleigh", s, 7 + s / 3, 0.35));
  }
  heads::write_csv(dir / "full.csv", a);
  heads::write_csv(dir / "no_edm.csv", b);
  auto res = report::make_report({dir / "full.csv", dir / "no_edm.csv"}, dir / "out");
  CHECK(res.summary.size() == 4);
  CHECK(res.files.size() == 7);
  const auto svg = slurp(dir / "out" / "psnr_vs_snr_awgn.svg");
  CHECK(svg.find("full") != std::string::npos);
  CHECK(svg.find("no_edm") != std::string::npos);
  CHECK(res.summary[0].config == "full");
  CHECK(res.summary[0].psnr == doctest::Approx(15.0));
  CHECK(res.summary[0].psnr_low == doctest::Approx(10.0));
  CHECK(res.summary[0].psnr_high == doctest::Approx(20.0));

  std::ofstream(dir / "empty.csv").close();
  try {
    report::make_report({dir / "empty.csv"}, dir / "out2");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("no data") != std::string::npos);
  }
  heads::write_csv(dir / "header_only.csv", {});
  CHECK_THROWS_AS(report::make_report({dir / "header_only.csv"}, dir / "out3"), DataError);

  // the latest epoch wins when a file holds several
  auto older = row("awgn", 0.0, 1.0, 0.1);
  older.epoch = 1;
  CHECK(report::latest_rows({older, row("awgn", 0.0, 2.0, 0.2)}).front().psnr == 2.0);
}
