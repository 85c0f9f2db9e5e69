#include <cmath>
#include <fstream>
#include <numbers>

#include "toast/errors.hpp"
#include "toast/harness.hpp"

namespace toast::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json denoise_json(const edm::DenoiseOptions& o) {
  return {{"steps", o.steps}, {"mode", std::string(edm::to_string(o.mode))}, {"sigma_min", o.sigma_min}};
}

void read_denoise(const json& j, edm::DenoiseOptions& o) {
  read(j, "steps", o.steps);
  read(j, "sigma_min", o.sigma_min);
  if (j.contains("mode")) o.mode = edm::parse_sampler_mode(j.at("mode").get<std::string>());
}

json channel_json(const ChannelSchedule& c) {
  return {{"kind", std::string(channel::to_string(c.params.kind))},
          {"snr_min", c.snr_min},
          {"snr_max", c.snr_max},
          {"rician_k", c.params.rician_k},
          {"impulse_prob", c.params.impulse_prob},
          {"impulse_var_mult", c.params.impulse_var_mult},
          {"phase_sigma", c.params.phase_sigma},
          {"coherent", c.params.coherent}};
}

void read_channel(const json& j, ChannelSchedule& c) {
  if (j.contains("kind")) c.params.kind = channel::parse_channel_kind(j.at("kind").get<std::string>());
  read(j, "snr_min", c.snr_min);
  read(j, "snr_max", c.snr_max);
  read(j, "rician_k", c.params.rician_k);
  read(j, "impulse_prob", c.params.impulse_prob);
  read(j, "impulse_var_mult", c.params.impulse_var_mult);
  read(j, "phase_sigma", c.params.phase_sigma);
  read(j, "coherent", c.params.coherent);
}

json agent_json(const rl::AgentConfig& a) {
  return {{"hidden", a.qnet.hidden},
          {"negative_slope", a.qnet.negative_slope},
          {"actions", a.qnet.actions},
          {"reward",
           {{"alpha", a.reward.alpha},
            {"beta", a.reward.beta},
            {"gamma", a.reward.gamma},
            {"delta", a.reward.delta},
            {"threshold", a.reward.threshold},
            {"window", a.reward.window},
            {"bins", a.reward.bins}}},
          {"epsilon", {{"start", a.epsilon.start}, {"end", a.epsilon.end}, {"decay_steps", a.epsilon.decay_steps}}},
          {"exploration", {{"uniform_weight", a.exploration.uniform_weight}, {"beta_a", a.exploration.beta_a}}},
          {"discount", a.discount},
          {"tau", a.tau},
          {"lr", a.lr},
          {"batch_size", a.batch_size},
          {"buffer_capacity", a.buffer_capacity},
          {"omega", a.omega},
          {"priority_floor", a.priority_floor},
          {"ema_decay", a.ema_decay},
          {"snr_max", a.snr_max}};
}

void read_agent(const json& j, rl::AgentConfig& a) {
  read(j, "hidden", a.qnet.hidden);
  read(j, "negative_slope", a.qnet.negative_slope);
  read(j, "actions", a.qnet.actions);
  if (j.contains("reward")) {
    const auto& r = j.at("reward");
    read(r, "alpha", a.reward.alpha);
    read(r, "beta", a.reward.beta);
    read(r, "gamma", a.reward.gamma);
    read(r, "delta", a.reward.delta);
    read(r, "threshold", a.reward.threshold);
    read(r, "window", a.reward.window);
    read(r, "bins", a.reward.bins);
  }
  if (j.contains("epsilon")) {
    const auto& e = j.at("epsilon");
    read(e, "start", a.epsilon.start);
    read(e, "end", a.epsilon.end);
    read(e, "decay_steps", a.epsilon.decay_steps);
  }
  if (j.contains("exploration")) {
    read(j.at("exploration"), "uniform_weight", a.exploration.uniform_weight);
    read(j.at("exploration"), "beta_a", a.exploration.beta_a);
  }
  read(j, "discount", a.discount);
  read(j, "tau", a.tau);
  read(j, "lr", a.lr);
  read(j, "batch_size", a.batch_size);
  read(j, "buffer_capacity", a.buffer_capacity);
  read(j, "omega", a.omega);
  read(j, "priority_floor", a.priority_floor);
  read(j, "ema_decay", a.ema_decay);
  read(j, "snr_max", a.snr_max);
}

}  // namespace

double cosine_lr(const OptimizerSettings& s, std::int64_t epoch) {
  if (s.epochs <= 1) return s.lr_start;
  const double t = static_cast<double>(std::clamp<std::int64_t>(epoch, 0, s.epochs - 1)) /
                   static_cast<double>(s.epochs - 1);
  return s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

void ExperimentConfig::resolve() {
  const auto shape = dataset.image_shape();
  codec.image_channels = shape[0];
  codec.image_height = shape[1];
  codec.image_width = shape[2];
  denoiser.net.channels = codec.latent.channels;
}

heads::ClassifierConfig ExperimentConfig::classifier() const {
  heads::ClassifierConfig c;
  c.input_dim = codec.latent_size();
  c.hidden = classifier_hidden;
  c.classes = dataset.classes();
  return c;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  codec.validate();
  denoiser.net.validate();
  if (denoiser.net.channels != codec.latent.channels) {
    throw ConfigError("denoiser channels must equal the latent channels");
  }
  if (!(denoiser.sigma_data > 0)) throw ConfigError("sigma_data must be positive");
  for (const auto* o : {&denoiser.train, &denoiser.eval}) {
    if (o->steps < 1) throw ConfigError("denoise steps must be >= 1");
    if (!(o->sigma_min > 0)) throw ConfigError("sigma_min must be positive");
  }
  if (denoiser.schedule != "joint" && denoiser.schedule != "stagewise") {
    throw ConfigError("denoiser schedule must be joint or stagewise, got " + denoiser.schedule);
  }
  if (!(denoiser.dsm_lr > 0)) throw ConfigError("dsm_lr must be positive");
  classifier().validate();
  agent.validate();
  if (!(optim.lr_start > 0) || !(optim.lr_end > 0) || optim.lr_end > optim.lr_start) {
    throw ConfigError("learning rates must satisfy 0 < lr_end <= lr_start");
  }
  if (optim.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (optim.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(optim.grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  if (optim.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  auto ch = channel.params;
  ch.snr_db = channel.snr_min;
  ch.validate();
  if (!(channel.snr_min <= channel.snr_max) || !std::isfinite(channel.snr_max)) {
    throw ConfigError("channel SNR range must satisfy snr_min <= snr_max");
  }
  if (!(ablation.static_lambda >= 0 && ablation.static_lambda <= 1)) {
    throw ConfigError("static_lambda must lie in [0, 1]");
  }
  if (eval.channels.empty() || eval.snrs.empty()) throw ConfigError("eval grid is empty");
  for (const auto& c : eval.channels) channel::parse_channel_kind(c);
  if (eval.batch_size < 1) throw ConfigError("eval batch_size must be >= 1");
  if (!(adapt.fraction > 0 && adapt.fraction <= 1)) throw ConfigError("adapt fraction must lie in (0, 1]");
  if (adapt.max_epochs < 1 || adapt.batch_size < 1) throw ConfigError("adapt epochs and batch must be >= 1");
  if (!(adapt.lr > 0)) throw ConfigError("adapt lr must be positive");
  if (adapt.patience < 0) throw ConfigError("adapt patience must be >= 0");
  if (!(adapt.lambda_recon >= 0 && adapt.lambda_recon <= 1)) {
    throw ConfigError("adapt lambda_recon must lie in [0, 1]");
  }
  for (const auto& [role, spec] : adapt.specs) spec.validate();
}

std::uint64_t ExperimentConfig::fingerprint() const {
  const auto text = json(*this).dump();
  return fnv1a(text.data(), text.size());
}

void to_json(json& j, const ExperimentConfig& c) {
  json specs = json::object();
  for (const auto& [role, s] : c.adapt.specs) {
    specs[std::string(lora::to_string(role))] = {{"rank", s.rank}, {"scale_hat", s.scale_hat}};
  }
  j = {{"name", c.name},
       {"seed", c.seed},
       {"output_dir", c.output_dir.string()},
       {"dataset", c.dataset},
       {"codec",
        {{"patch_size", c.codec.patch_size},
         {"dims", c.codec.dims},
         {"depths", c.codec.depths},
         {"heads", c.codec.heads},
         {"window", c.codec.window},
         {"mlp_ratio", c.codec.mlp_ratio},
         {"latent", {c.codec.latent.height, c.codec.latent.width, c.codec.latent.channels}},
         {"shifted_windows", c.codec.shifted_windows}}},
       {"denoiser",
        {{"width", c.denoiser.net.width},
         {"blocks", c.denoiser.net.blocks},
         {"time_dim", c.denoiser.net.time_dim},
         {"groups", c.denoiser.net.groups},
         {"sigma_data", c.denoiser.sigma_data},
         {"train", denoise_json(c.denoiser.train)},
         {"eval", denoise_json(c.denoiser.eval)},
         {"schedule", c.denoiser.schedule},
         {"dsm",
          {{"p_mean", c.denoiser.dsm.p_mean},
           {"p_std", c.denoiser.dsm.p_std},
           {"edm_weighting", c.denoiser.dsm.edm_weighting}}},
         {"dsm_lr", c.denoiser.dsm_lr}}},
       {"classifier", {{"hidden", c.classifier_hidden}}},
       {"agent", agent_json(c.agent)},
       {"optimizer",
        {{"lr_start", c.optim.lr_start},
         {"lr_end", c.optim.lr_end},
         {"epochs", c.optim.epochs},
         {"batch_size", c.optim.batch_size},
         {"grad_clip", c.optim.grad_clip},
         {"weight_decay", c.optim.weight_decay}}},
       {"channel", channel_json(c.channel)},
       {"ablation",
        {{"no_edm", c.ablation.no_edm},
         {"static_weights", c.ablation.static_weights},
         {"static_lambda", c.ablation.static_lambda},
         {"no_lora", c.ablation.no_lora}}},
       {"eval",
        {{"channels", c.eval.channels},
         {"snrs", c.eval.snrs},
         {"seed", c.eval.seed},
         {"batch_size", c.eval.batch_size},
         {"val_snr", c.eval.val_snr}}},
       {"adapt",
        {{"fraction", c.adapt.fraction},
         {"max_epochs", c.adapt.max_epochs},
         {"batch_size", c.adapt.batch_size},
         {"lr", c.adapt.lr},
         {"patience", c.adapt.patience},
         {"lambda_recon", c.adapt.lambda_recon},
         {"library", c.adapt.library.string()},
         {"ranks", specs}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  read(j, "name", c.name);
  read(j, "seed", c.seed);
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<data::DatasetSpec>();
  if (j.contains("codec")) {
    const auto& k = j.at("codec");
    read(k, "patch_size", c.codec.patch_size);
    read(k, "dims", c.codec.dims);
    read(k, "depths", c.codec.depths);
    read(k, "heads", c.codec.heads);
    read(k, "window", c.codec.window);
    read(k, "mlp_ratio", c.codec.mlp_ratio);
    read(k, "shifted_windows", c.codec.shifted_windows);
    if (k.contains("latent")) {
      const auto v = k.at("latent").get<std::vector<std::int64_t>>();
      if (v.size() != 3) throw ConfigError("codec.latent must be [height, width, channels]");
      c.codec.latent = {v[0], v[1], v[2]};
    }
  }
  if (j.contains("denoiser")) {
    const auto& d = j.at("denoiser");
    read(d, "width", c.denoiser.net.width);
    read(d, "blocks", c.denoiser.net.blocks);
    read(d, "time_dim", c.denoiser.net.time_dim);
    read(d, "groups", c.denoiser.net.groups);
    read(d, "sigma_data", c.denoiser.sigma_data);
    if (d.contains("train")) read_denoise(d.at("train"), c.denoiser.train);
    if (d.contains("eval")) read_denoise(d.at("eval"), c.denoiser.eval);
    read(d, "schedule", c.denoiser.schedule);
    if (d.contains("dsm")) {
      read(d.at("dsm"), "p_mean", c.denoiser.dsm.p_mean);
      read(d.at("dsm"), "p_std", c.denoiser.dsm.p_std);
      read(d.at("dsm"), "edm_weighting", c.denoiser.dsm.edm_weighting);
    }
    read(d, "dsm_lr", c.denoiser.dsm_lr);
  }
  if (j.contains("classifier")) read(j.at("classifier"), "hidden", c.classifier_hidden);
  if (j.contains("agent")) read_agent(j.at("agent"), c.agent);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    read(o, "lr_start", c.optim.lr_start);
    read(o, "lr_end", c.optim.lr_end);
    read(o, "epochs", c.optim.epochs);
    read(o, "batch_size", c.optim.batch_size);
    read(o, "grad_clip", c.optim.grad_clip);
    read(o, "weight_decay", c.optim.weight_decay);
  }
  if (j.contains("channel")) read_channel(j.at("channel"), c.channel);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    read(a, "no_edm", c.ablation.no_edm);
    read(a, "static_weights", c.ablation.static_weights);
    read(a, "static_lambda", c.ablation.static_lambda);
    read(a, "no_lora", c.ablation.no_lora);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    read(e, "channels", c.eval.channels);
    read(e, "snrs", c.eval.snrs);
    read(e, "seed", c.eval.seed);
    read(e, "batch_size", c.eval.batch_size);
    read(e, "val_snr", c.eval.val_snr);
  }
  if (j.contains("adapt")) {
    const auto& a = j.at("adapt");
    read(a, "fraction", c.adapt.fraction);
    read(a, "max_epochs", c.adapt.max_epochs);
    read(a, "batch_size", c.adapt.batch_size);
    read(a, "lr", c.adapt.lr);
    read(a, "patience", c.adapt.patience);
    read(a, "lambda_recon", c.adapt.lambda_recon);
    if (a.contains("library")) c.adapt.library = a.at("library").get<std::string>();
    if (a.contains("ranks")) {
      for (const auto& [name, v] : a.at("ranks").items()) {
        const auto role = lora::parse_role(name);
        auto spec = lora::AdapterSpec::defaults(role);
        read(v, "rank", spec.rank);
        spec.scale_hat = v.value("scale_hat", static_cast<double>(spec.rank));
        c.adapt.specs[role] = spec;
      }
    }
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  ExperimentConfig c;
  try {
    c = json::parse(in).get<ExperimentConfig>();
    c.resolve();
    c.validate();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return c;
}

void save_config(const ExperimentConfig& c, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError(path.string() + ": cannot write config");
  out << json(c).dump(2) << "\n";
}

}  // namespace toast::harness
