#include <limits>

#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/random.hpp"

namespace toast::harness {

namespace {

constexpr std::int64_t kMaxValImages = 500;

double validation_loss(SemanticModelImpl& model, const data::Dataset& val, const PipelineOptions& opts,
                       const heads::WeightPair& w, std::uint64_t seed, std::int64_t batch) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  double total = 0.0;
  const auto n = val.size();
  for (std::int64_t s = 0; s < n; s += batch) {
    const auto len = std::min(batch, n - s);
    auto x = val.images.narrow(0, s, len);
    auto y = val.labels.narrow(0, s, len);
    auto out = run_pipeline(model, x, opts, gen);
    total += heads::total_loss(x, out.x_hat, y, out.logits, w).total.item<double>() * static_cast<double>(len);
  }
  return total / static_cast<double>(n);
}

}  // namespace

AdaptResult adapt_to_channel(SemanticModelImpl& model, const ExperimentConfig& cfg, const data::Splits& splits,
                             const AdaptRequest& req) {
  if (!(req.fraction > 0 && req.fraction <= 1)) throw ConfigError("adapt: fraction must lie in (0, 1]");
  if (req.max_epochs < 1) throw ConfigError("adapt: max_epochs must be >= 1");
  if (splits.train.size() == 0) throw DataError("adapt: empty training split");

  AdaptResult res;
  res.base_fingerprint_before = model.fingerprint();
  for (const auto& [role, n] : model.role_parameters()) res.total_params += n;
  if (cfg.ablation.no_lora) {
    res.base_fingerprint_after = res.base_fingerprint_before;
    return res;
  }

  std::vector<std::pair<torch::Tensor, bool>> frozen;
  for (auto& p : model.parameters()) {
    frozen.emplace_back(p, p.requires_grad());
    p.set_requires_grad(false);
  }

  auto gen = make_generator(fnv1a("adapt", 5, req.seed));
  auto layers = model.layers();
  res.adapters = lora::build_adapter_set(layers, cfg.adapt.specs, std::string(channel::to_string(req.kind)),
                                         res.base_fingerprint_before, gen);
  res.trainable_params = res.adapters.parameter_count();

  const auto pick = data::stratified_sample(splits.train.labels, req.fraction, gen);
  const auto train = splits.train.subset(pick);
  auto val = splits.val.size() > 0 ? splits.val : splits.test;
  if (val.size() > kMaxValImages) val = val.subset(torch::arange(kMaxValImages));

  const auto w = heads::WeightPair::from_recon(cfg.adapt.lambda_recon);
  auto ch = cfg.channel.params;
  ch.kind = req.kind;
  auto val_ch = ch;
  val_ch.snr_db = cfg.eval.val_snr;
  const PipelineOptions val_opts{val_ch, false, !cfg.ablation.no_edm, cfg.denoiser.train};
  const auto val_seed = fnv1a("adapt-val", 9, req.seed);

  auto params = res.adapters.parameters();
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(cfg.adapt.lr).weight_decay(0.0));
  auto snapshot = [&] {
    std::vector<torch::Tensor> s;
    for (const auto& p : params) s.push_back(p.detach().clone());
    return s;
  };

  double best = validation_loss(model, val, val_opts, w, val_seed, cfg.eval.batch_size);
  auto best_params = snapshot();
  std::int64_t since_best = 0;
  const auto bs = cfg.adapt.batch_size;
  const auto n = train.size();
  for (std::int64_t epoch = 0; epoch < req.max_epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kLong);
    double sum = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t s = 0; s < n; s += bs) {
      auto idx = perm.narrow(0, s, std::min(bs, n - s));
      auto x = train.images.index_select(0, idx);
      auto y = train.labels.index_select(0, idx);
      const double u = torch::rand({1}, gen, torch::kFloat64).item<double>();
      ch.snr_db = cfg.channel.snr_min + u * (cfg.channel.snr_max - cfg.channel.snr_min);
      PipelineOptions opts{ch, false, !cfg.ablation.no_edm, cfg.denoiser.train};
      auto out = run_pipeline(model, x, opts, gen);
      auto loss = heads::total_loss(x, out.x_hat, y, out.logits, w).total;
      if (!std::isfinite(loss.item<double>())) throw NumericError("adapt: non-finite loss");
      opt.zero_grad();
      loss.backward();
      clip_grad_norm(params, cfg.optim.grad_clip);
      opt.step();
      sum += loss.item<double>();
      ++batches;
    }
    res.train_loss.push_back(sum / static_cast<double>(batches));
    const double v = validation_loss(model, val, val_opts, w, val_seed, cfg.eval.batch_size);
    res.val_loss.push_back(v);
    ++res.epochs_run;
    if (v < best) {
      best = v;
      best_params = snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.adapt.patience) {
      break;
    }
  }
  {
    torch::NoGradGuard g;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(best_params[i]);
  }
  for (auto& [p, flag] : frozen) p.set_requires_grad(flag);
  res.base_fingerprint_after = model.fingerprint();
  if (!req.library.empty()) {
    lora::AdapterLibrary lib(req.library);
    lib.store(res.adapters);
    res.saved_to = lib.path_for(res.adapters.channel_key);
  }
  return res;
}

}  // namespace toast::harness
