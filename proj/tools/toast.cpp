#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/report.hpp"

using namespace toast;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_rows(const std::vector<heads::MetricsRecord>& rows) {
  std::printf("%-12s %6s %8s %7s %8s %8s\n", "channel", "snr", "psnr", "ssim", "acc", "f1");
  for (const auto& r : rows) {
    std::printf("%-12s %6.1f %8.3f %7.4f %8.4f %8.4f\n", r.channel.c_str(), r.snr_db, r.psnr, r.ssim,
                r.accuracy, r.f1_macro);
  }
}

data::Splits load_splits(harness::ExperimentConfig& cfg, const std::string& data_root) {
  if (!data_root.empty()) cfg.dataset.root = data_root;
  return data::load_dataset(cfg.dataset);
}

int cmd_train(const std::string& config, const std::string& resume, const std::string& out,
              const std::string& data_root, std::int64_t epochs) {
  const auto t0 = std::chrono::steady_clock::now();
  std::unique_ptr<harness::Trainer> trainer;
  if (!resume.empty()) {
    auto bundle = harness::load_model(resume);
    auto splits = load_splits(bundle.config, data_root);
    trainer = std::make_unique<harness::Trainer>(fs::path(resume), std::move(splits));
    std::printf("resumed %s at epoch %lld\n", resume.c_str(), static_cast<long long>(trainer->epoch()));
  } else {
    auto cfg = harness::load_config(config);
    if (!out.empty()) cfg.output_dir = out;
    if (epochs > 0) cfg.optim.epochs = epochs;
    auto splits = load_splits(cfg, data_root);
    std::printf("dataset %s: %lld train / %lld val / %lld test\n", cfg.dataset.name.c_str(),
                static_cast<long long>(splits.train.size()), static_cast<long long>(splits.val.size()),
                static_cast<long long>(splits.test.size()));
    trainer = std::make_unique<harness::Trainer>(cfg, std::move(splits));
  }
  harness::TrainerHooks hooks;
  hooks.on_epoch = [&](const harness::EpochSummary& s) {
    std::printf("epoch %lld lr %.3g loss %.5f (recon %.5f cls %.5f) | val %.0f dB: psnr %.2f acc %.4f | %.0f s\n",
                static_cast<long long>(s.epoch + 1), s.lr, s.loss, s.loss_recon, s.loss_cls,
                s.validation.snr_db, s.validation.psnr, s.validation.accuracy, seconds_since(t0));
    std::fflush(stdout);
  };
  trainer->run(hooks);
  std::printf("checkpoint %s\n", (trainer->config().output_dir / "checkpoint.ckpt").c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::vector<std::string>& channels, const std::vector<double>& snrs,
             const std::string& out, const std::string& library, const std::string& data_root) {
  auto bundle = harness::load_model(ckpt);
  auto splits = load_splits(bundle.config, data_root);
  auto req = harness::eval_request(bundle.config);
  if (!channels.empty()) {
    req.channels.clear();
    for (const auto& c : channels) req.channels.push_back(channel::parse_channel_kind(c));
  }
  if (!snrs.empty()) req.snrs = snrs;
  req.lambda_recon = bundle.final_lambda;
  req.epoch = bundle.epoch;
  std::optional<lora::AdapterLibrary> lib;
  if (!library.empty()) lib.emplace(library);
  const auto fp = bundle.model->fingerprint();
  auto layers = bundle.model->layers();
  std::vector<heads::MetricsRecord> rows;
  for (auto kind : req.channels) {
    auto one = req;
    one.channels = {kind};
    const auto key = std::string(channel::to_string(kind));
    const bool adapted = lib && lib->contains(key);
    if (adapted) lib->load(key, fp).attach(layers);
    auto part = harness::evaluate(*bundle.model, splits.test, one);
    if (adapted) lora::AdapterSet::detach(layers);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  print_rows(rows);
  const fs::path path = out.empty() ? bundle.config.output_dir / "eval.csv" : fs::path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  heads::append_csv(path, rows);
  std::printf("appended %zu rows to %s\n", rows.size(), path.c_str());
  return 0;
}

int cmd_adapt(const std::string& ckpt, const std::string& kind, double fraction, std::int64_t max_epochs,
              const std::string& library, const std::string& data_root, double lr, std::int64_t batch) {
  auto bundle = harness::load_model(ckpt);
  if (lr > 0) bundle.config.adapt.lr = lr;
  if (batch > 0) bundle.config.adapt.batch_size = batch;
  auto splits = load_splits(bundle.config, data_root);
  harness::AdaptRequest req;
  req.kind = channel::parse_channel_kind(kind);
  req.fraction = fraction;
  req.max_epochs = max_epochs;
  req.seed = bundle.config.seed;
  req.library = !library.empty()                      ? fs::path(library)
                : !bundle.config.adapt.library.empty() ? bundle.config.adapt.library
                                                       : bundle.config.output_dir / "adapters";
  auto eval = harness::eval_request(bundle.config);
  eval.channels = {req.kind};
  eval.snrs = {bundle.config.eval.val_snr};
  const auto before = harness::evaluate(*bundle.model, splits.test, eval).front();
  auto res = harness::adapt_to_channel(*bundle.model, bundle.config, splits, req);
  const auto after = harness::evaluate(*bundle.model, splits.test, eval).front();
  std::printf("adapters for %s: %lld trainable of %lld (%.3f%%), %lld epochs\n", kind.c_str(),
              static_cast<long long>(res.trainable_params), static_cast<long long>(res.total_params),
              100.0 * res.trainable_fraction(), static_cast<long long>(res.epochs_run));
  for (std::size_t i = 0; i < res.val_loss.size(); ++i) {
    std::printf("  epoch %zu train %.5f val %.5f\n", i + 1, res.train_loss[i], res.val_loss[i]);
  }
  std::printf("base weights unchanged: %s\n",
              res.base_fingerprint_before == res.base_fingerprint_after ? "yes" : "NO");
  std::printf("%s at %.0f dB: psnr %.3f -> %.3f, acc %.4f -> %.4f\n", kind.c_str(), eval.snrs[0], before.psnr,
              after.psnr, before.accuracy, after.accuracy);
  if (!res.saved_to.empty()) std::printf("saved %s\n", res.saved_to.c_str());
  return 0;
}

int cmd_report(const std::vector<std::string>& in, const std::string& out, const std::vector<std::string>& logs) {
  std::vector<fs::path> csvs(in.begin(), in.end());
  std::vector<fs::path> traj(logs.begin(), logs.end());
  auto res = report::make_report(csvs, out, traj);
  std::cout << res.table;
  for (const auto& f : res.files) std::printf("wrote %s\n", f.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic communication training and evaluation"};
  app.require_subcommand(1);

  std::string config, resume, out, data_root;
  std::int64_t epochs = 0;
  auto* train = app.add_subcommand("train", "Train from a config file");
  train->add_option("--config", config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  train->add_option("--resume", resume, "Resume from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--out", out, "Override the output directory");
  train->add_option("--epochs", epochs, "Override the epoch count");
  train->add_option("--data-root", data_root, "Dataset directory");

  std::string ckpt, library;
  std::vector<std::string> channels;
  std::vector<double> snrs;
  auto* eval = app.add_subcommand("eval", "SNR sweep of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--channels", channels, "Channel kinds")->delimiter(',');
  eval->add_option("--snrs", snrs, "SNR grid in dB")->delimiter(',');
  eval->add_option("--out", out, "CSV to append to");
  eval->add_option("--adapters", library, "Adapter library; matching channels use their adapters");
  eval->add_option("--data-root", data_root, "Dataset directory");

  std::string kind = "rayleigh";
  double fraction = 0.01;
  std::int64_t max_epochs = 5, adapt_batch = 0;
  double adapt_lr = 0.0;
  auto* adapt = app.add_subcommand("adapt", "Fit channel adapters on a frozen checkpoint");
  adapt->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  adapt->add_option("--channel", kind, "Target channel kind")->required();
  adapt->add_option("--fraction", fraction, "Fraction of the training split")->check(CLI::Range(1e-6, 1.0));
  adapt->add_option("--max-epochs", max_epochs, "Epoch limit")->check(CLI::PositiveNumber);
  adapt->add_option("--library", library, "Adapter library directory");
  adapt->add_option("--lr", adapt_lr, "Override the adapter learning rate");
  adapt->add_option("--batch-size", adapt_batch, "Override the adaptation batch size");
  adapt->add_option("--data-root", data_root, "Dataset directory");

  std::vector<std::string> inputs, logs;
  auto* rep = app.add_subcommand("report", "Curves and summary table from metrics CSVs");
  rep->add_option("--in", inputs, "Metrics CSV files, one configuration each")->required();
  rep->add_option("--out", out, "Output directory")->required();
  rep->add_option("--trajectory", logs, "train_log.csv files for the weight trajectory plot");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) {
      if (config.empty() == resume.empty()) throw ConfigError("train: give exactly one of --config or --resume");
      return cmd_train(config, resume, out, data_root, epochs);
    }
    if (*eval) return cmd_eval(ckpt, channels, snrs, out, library, data_root);
    if (*adapt) return cmd_adapt(ckpt, kind, fraction, max_epochs, library, data_root, adapt_lr, adapt_batch);
    if (*rep) return cmd_report(inputs, out, logs);
  } catch (const toast::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
