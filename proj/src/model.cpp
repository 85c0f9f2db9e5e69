#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/random.hpp"

namespace toast::harness {

SemanticModelImpl::SemanticModelImpl(const ExperimentConfig& cfg) {
  // module initializers draw from the global generator
  torch::manual_seed(cfg.seed);
  encoder = register_module("encoder", swin::SwinEncoder(cfg.codec));
  decoder = register_module("decoder", swin::SwinDecoder(cfg.codec));
  denoiser = register_module(
      "denoiser", edm::Denoiser(cfg.denoiser.net, cfg.codec.latent, cfg.denoiser.sigma_data));
  classifier = register_module("classifier", heads::Classifier(cfg.classifier()));
}

lora::LayerRegistry SemanticModelImpl::layers() {
  auto reg = encoder->layers();
  auto dec = decoder->layers();
  auto dn = denoiser->layers();
  auto cls = classifier->layers();
  reg.insert(reg.end(), dec.begin(), dec.end());
  reg.insert(reg.end(), dn.begin(), dn.end());
  reg.insert(reg.end(), cls.begin(), cls.end());
  return reg;
}

std::vector<torch::Tensor> SemanticModelImpl::parameters_for(lora::Role role) {
  switch (role) {
    case lora::Role::encoder: return encoder->parameters();
    case lora::Role::decoder: return decoder->parameters();
    case lora::Role::denoiser: return denoiser->parameters();
    case lora::Role::classifier: return classifier->parameters();
  }
  return {};
}

std::map<lora::Role, std::int64_t> SemanticModelImpl::role_parameters() {
  std::map<lora::Role, std::int64_t> out;
  for (auto role : {lora::Role::encoder, lora::Role::decoder, lora::Role::denoiser, lora::Role::classifier}) {
    std::int64_t n = 0;
    for (const auto& p : parameters_for(role)) n += p.numel();
    out[role] = n;
  }
  return out;
}

std::uint64_t SemanticModelImpl::fingerprint() const {
  std::vector<std::pair<std::string, torch::Tensor>> named;
  for (const auto& p : named_parameters()) named.emplace_back(p.key(), p.value());
  for (const auto& b : named_buffers()) named.emplace_back(b.key(), b.value());
  return toast::fingerprint(named);
}

PipelineOutput run_pipeline(SemanticModelImpl& model, const torch::Tensor& images,
                            const PipelineOptions& opts, torch::Generator& gen) {
  PipelineOutput out;
  out.z = model.encoder->forward(images);
  out.z_norm = channel::normalize_power(out.z);
  auto rx = channel::apply_channel(out.z_norm, opts.channel, gen);
  out.z_ch = rx.received;
  out.realization = std::move(rx.realization);
  channel::NoiseLevelSource src;
  if (opts.oracle_sigma) {
    src.realization = &out.realization;
  } else {
    src.snr_db = opts.channel.snr_db;
  }
  out.sigma_max = channel::estimate_sigma_max(out.z_ch, src);
  out.z_dn = opts.use_edm ? edm::denoise(out.z_ch, out.sigma_max, *model.denoiser, opts.denoise) : out.z_ch;
  out.x_hat = model.decoder->forward(out.z_dn);
  out.logits = model.classifier->forward(out.z_dn);
  return out;
}

EvalRequest eval_request(const ExperimentConfig& cfg) {
  EvalRequest r;
  r.channels.clear();
  for (const auto& c : cfg.eval.channels) r.channels.push_back(channel::parse_channel_kind(c));
  r.snrs = cfg.eval.snrs;
  r.params = cfg.channel.params;
  r.seed = cfg.eval.seed;
  r.batch_size = cfg.eval.batch_size;
  r.use_edm = !cfg.ablation.no_edm;
  r.denoise = cfg.denoiser.eval;
  r.lambda_recon = cfg.ablation.static_weights ? cfg.ablation.static_lambda : 0.5;
  return r;
}

std::vector<heads::MetricsRecord> evaluate(SemanticModelImpl& model, const data::Dataset& test,
                                           const EvalRequest& req) {
  if (test.size() == 0) throw DataError("evaluate: empty test split");
  if (req.batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  std::vector<heads::MetricsRecord> rows;
  const auto n = test.size();
  for (auto kind : req.channels) {
    for (double snr : req.snrs) {
      auto ch = req.params;
      ch.kind = kind;
      ch.snr_db = snr;
      ch.validate();
      const auto cell_seed =
          fnv1a(&snr, sizeof snr, req.seed ^ (static_cast<std::uint64_t>(kind) * 0x9E3779B97F4A7C15ULL));
      auto gen = make_generator(cell_seed);
      PipelineOptions opts{ch, false, req.use_edm, req.denoise};
      double psnr_sum = 0, ssim_sum = 0, recon_sum = 0, cls_sum = 0;
      std::vector<std::int64_t> labels, preds;
      for (std::int64_t start = 0; start < n; start += req.batch_size) {
        const auto len = std::min(req.batch_size, n - start);
        auto x = test.images.narrow(0, start, len);
        auto y = test.labels.narrow(0, start, len);
        auto out = run_pipeline(model, x, opts, gen);
        psnr_sum += heads::psnr_per_image(x, out.x_hat).sum().item<double>();
        ssim_sum += heads::ssim_per_image(x, out.x_hat).sum().item<double>();
        recon_sum += torch::mse_loss(out.x_hat, x).item<double>() * static_cast<double>(len);
        cls_sum += torch::nn::functional::cross_entropy(out.logits, y).item<double>() * static_cast<double>(len);
        const auto yv = heads::to_vector(y);
        const auto pv = heads::to_vector(heads::predict(out.logits));
        labels.insert(labels.end(), yv.begin(), yv.end());
        preds.insert(preds.end(), pv.begin(), pv.end());
      }
      heads::MetricsRecord rec;
      const auto dn = static_cast<double>(n);
      rec.psnr = psnr_sum / dn;
      rec.ssim = ssim_sum / dn;
      rec.accuracy = heads::accuracy(labels, preds);
      rec.f1_macro = heads::f1_macro(labels, preds);
      rec.loss_recon = recon_sum / dn;
      rec.loss_cls = cls_sum / dn;
      rec.lambda_recon = req.lambda_recon;
      rec.snr_db = snr;
      rec.epoch = req.epoch;
      rec.channel = std::string(channel::to_string(kind));
      rows.push_back(rec);
    }
  }
  model.train(was_training);
  return rows;
}

}  // namespace toast::harness
