#include <cmath>
#include <fstream>
#include <sstream>

#include "toast/errors.hpp"
#include "toast/harness.hpp"
#include "toast/optim_io.hpp"
#include "toast/random.hpp"

namespace toast::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDataStream = 0x64617461ULL;
constexpr std::uint64_t kChannelStream = 0x6368616eULL;
constexpr std::uint64_t kDsmStream = 0x64736d00ULL;
constexpr std::uint64_t kAgentStream = 0x6167656eULL;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return fnv1a(&stream, sizeof stream, seed);
}

const char* kLogHeader =
    "step,epoch,snr_db,lambda_recon,loss,loss_recon,loss_cls,accuracy,grad_norm,grad_norm_clipped,"
    "epsilon,reward,explored";

}  // namespace

double grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) {
    torch::NoGradGuard g;
    const double coef = max_norm / (norm + 1e-6);
    for (const auto& p : params) {
      if (p.grad().defined()) p.grad().mul_(coef);
    }
  }
  return norm;
}

Trainer::Trainer(ExperimentConfig cfg, data::Splits splits)
    : cfg_(std::move(cfg)),
      splits_(std::move(splits)),
      data_gen_(make_generator(0)),
      channel_gen_(make_generator(0)),
      dsm_gen_(make_generator(0)) {
  cfg_.resolve();
  cfg_.validate();
  build();
}

Trainer::Trainer(const fs::path& checkpoint, data::Splits splits)
    : splits_(std::move(splits)),
      data_gen_(make_generator(0)),
      channel_gen_(make_generator(0)),
      dsm_gen_(make_generator(0)) {
  const auto ar = read_archive(checkpoint, kCheckpointMagic, kCheckpointVersion);
  try {
    cfg_ = ar.meta.at("config").get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(checkpoint.string() + ": bad config block: " + e.what());
  }
  cfg_.resolve();
  cfg_.validate();
  build();
  load_module(*model_, ar, "model");
  load_adam_state<torch::optim::AdamW, torch::optim::AdamWParamState>(*opt_, ar, "opt");
  if (dsm_opt_) load_adam_state<torch::optim::Adam, torch::optim::AdamParamState>(*dsm_opt_, ar, "dsm_opt");
  if (agent_) agent_->load(ar, "agent");
  data_gen_.set_state(ar.get("rng.data"));
  channel_gen_.set_state(ar.get("rng.channel"));
  dsm_gen_.set_state(ar.get("rng.dsm"));
  epoch_ = ar.meta.at("epoch").get<std::int64_t>();
  steps_ = ar.meta.at("steps").get<std::int64_t>();
  if (ar.contains("static_trajectory")) {
    auto t = ar.get("static_trajectory");
    for (std::int64_t i = 0; i < t.size(0); ++i) {
      rl::TrajectoryPoint p;
      p.step = static_cast<std::int64_t>(t[i][0].item<double>());
      p.epoch = t[i][1].item<double>();
      p.snr_db = t[i][2].item<double>();
      p.lambda_recon = t[i][3].item<double>();
      static_trajectory_.push_back(p);
    }
  }
}

void Trainer::build() {
  model_ = SemanticModel(cfg_);
  data_gen_ = make_generator(stream_seed(cfg_.seed, kDataStream));
  channel_gen_ = make_generator(stream_seed(cfg_.seed, kChannelStream));
  dsm_gen_ = make_generator(stream_seed(cfg_.seed, kDsmStream));
  opt_ = std::make_unique<torch::optim::AdamW>(
      main_parameters(),
      torch::optim::AdamWOptions(cosine_lr(cfg_.optim, 0)).weight_decay(cfg_.optim.weight_decay));
  if (cfg_.denoiser.schedule == "stagewise" && !cfg_.ablation.no_edm) {
    dsm_opt_ = std::make_unique<torch::optim::Adam>(model_->denoiser->parameters(),
                                                    torch::optim::AdamOptions(cfg_.denoiser.dsm_lr));
  }
  if (!cfg_.ablation.static_weights) {
    agent_ = std::make_unique<rl::Agent>(cfg_.agent, stream_seed(cfg_.seed, kAgentStream));
  }
}

std::vector<torch::Tensor> Trainer::main_parameters() {
  std::vector<torch::Tensor> params;
  for (auto role : {lora::Role::encoder, lora::Role::decoder, lora::Role::classifier}) {
    auto p = model_->parameters_for(role);
    params.insert(params.end(), p.begin(), p.end());
  }
  if (cfg_.denoiser.schedule == "joint" && !cfg_.ablation.no_edm) {
    auto p = model_->parameters_for(lora::Role::denoiser);
    params.insert(params.end(), p.begin(), p.end());
  }
  return params;
}

void Trainer::set_lr(double lr) {
  for (auto& g : opt_->param_groups()) g.options().set_lr(lr);
}

const std::vector<rl::TrajectoryPoint>& Trainer::weight_trajectory() const {
  return agent_ ? agent_->trajectory() : static_trajectory_;
}

BatchStats Trainer::train_batch(const torch::Tensor& images, const torch::Tensor& labels, double snr_db,
                                double epoch_progress) {
  model_->train();
  const auto weights = agent_ ? agent_->decide(snr_db, epoch_progress, cfg_.optim.epochs)
                              : heads::WeightPair::from_recon(cfg_.ablation.static_lambda);
  auto ch = cfg_.channel.params;
  ch.snr_db = snr_db;
  PipelineOptions opts{ch, true, !cfg_.ablation.no_edm, cfg_.denoiser.train};
  auto out = run_pipeline(*model_, images, opts, channel_gen_);
  auto terms = heads::total_loss(images, out.x_hat, labels, out.logits, weights);

  BatchStats st;
  st.loss = terms.total.item<double>();
  st.loss_recon = terms.recon.item<double>();
  st.loss_cls = terms.cls.item<double>();
  st.lambda_recon = weights.lambda_recon;
  st.snr_db = snr_db;
  auto abort = [&](const std::string& what) {
    const auto path = cfg_.output_dir / "diagnostic.ckpt";
    save_checkpoint(path);
    throw NumericError(what + " at step " + std::to_string(steps_) + " (epoch " +
                       std::to_string(epoch_) + ", snr " + std::to_string(snr_db) +
                       " dB); state written to " + path.string());
  };
  if (!std::isfinite(st.loss)) abort("non-finite loss");

  auto params = main_parameters();
  opt_->zero_grad();
  terms.total.backward();
  st.grad_norm = clip_grad_norm(params, cfg_.optim.grad_clip);
  if (!std::isfinite(st.grad_norm)) abort("non-finite gradient");
  st.grad_norm_clipped = grad_norm(params);
  opt_->step();

  if (dsm_opt_) {
    dsm_opt_->zero_grad();
    auto l = edm::dsm_loss(*model_->denoiser, out.z_norm.detach(), dsm_gen_, cfg_.denoiser.dsm);
    l.backward();
    dsm_opt_->step();
  }

  st.accuracy = heads::predict(out.logits.detach()).eq(labels).to(torch::kFloat64).mean().item<double>();
  if (agent_) {
    agent_->observe(st.loss_recon, st.accuracy);
  } else {
    rl::TrajectoryPoint p;
    p.step = steps_;
    p.epoch = epoch_progress;
    p.snr_db = snr_db;
    p.lambda_recon = weights.lambda_recon;
    static_trajectory_.push_back(p);
  }
  ++steps_;
  return st;
}

EpochSummary Trainer::train_epoch(const TrainerHooks& hooks) {
  const auto& train = splits_.train;
  if (train.size() == 0) throw DataError("train: empty training split");
  const auto n = train.size();
  const auto bs = cfg_.optim.batch_size;
  const auto batches = (n + bs - 1) / bs;
  EpochSummary sum;
  sum.epoch = epoch_;
  sum.lr = cosine_lr(cfg_.optim, epoch_);
  set_lr(sum.lr);

  std::vector<std::string> log;
  auto perm = torch::randperm(n, data_gen_, torch::kLong);
  for (std::int64_t b = 0; b < batches; ++b) {
    auto idx = perm.narrow(0, b * bs, std::min(bs, n - b * bs));
    auto x = train.images.index_select(0, idx);
    auto y = train.labels.index_select(0, idx);
    if (cfg_.dataset.flip || cfg_.dataset.rotate_deg > 0) {
      x = data::augment(x, cfg_.dataset.flip, cfg_.dataset.rotate_deg, data_gen_);
    }
    const double u = torch::rand({1}, channel_gen_, torch::kFloat64).item<double>();
    const double snr = cfg_.channel.snr_min + u * (cfg_.channel.snr_max - cfg_.channel.snr_min);
    const double progress = static_cast<double>(epoch_) + static_cast<double>(b) / static_cast<double>(batches);
    const auto st = train_batch(x, y, snr, progress);
    sum.loss += st.loss;
    sum.loss_recon += st.loss_recon;
    sum.loss_cls += st.loss_cls;
    sum.max_grad_norm_clipped = std::max(sum.max_grad_norm_clipped, st.grad_norm_clipped);
    const auto& tp = weight_trajectory().back();
    std::ostringstream row;
    row.precision(17);
    row << tp.step << "," << progress << "," << snr << "," << st.lambda_recon << "," << st.loss << ","
        << st.loss_recon << "," << st.loss_cls << "," << st.accuracy << "," << st.grad_norm << ","
        << st.grad_norm_clipped << "," << tp.epsilon << "," << tp.reward << "," << (tp.explored ? 1 : 0);
    log.push_back(row.str());
    if (hooks.on_batch) hooks.on_batch(st);
  }
  const auto nb = static_cast<double>(batches);
  sum.loss /= nb;
  sum.loss_recon /= nb;
  sum.loss_cls /= nb;
  ++epoch_;

  const auto& val = splits_.val.size() > 0 ? splits_.val : splits_.test;
  auto req = eval_request(cfg_);
  req.channels = {cfg_.channel.params.kind};
  req.snrs = {cfg_.eval.val_snr};
  req.epoch = epoch_;
  const auto& traj = weight_trajectory();
  double lam = 0.0;
  std::int64_t count = 0;
  for (auto it = traj.rbegin(); it != traj.rend() && count < batches; ++it, ++count) lam += it->lambda_recon;
  req.lambda_recon = count > 0 ? lam / static_cast<double>(count) : 0.5;
  sum.validation = evaluate(*model_, val, req).front();

  fs::create_directories(cfg_.output_dir);
  heads::append_csv(cfg_.output_dir / "metrics.csv", {sum.validation});
  const auto log_path = cfg_.output_dir / "train_log.csv";
  const bool fresh = !fs::exists(log_path);
  std::ofstream out(log_path, std::ios::app);
  if (fresh) out << kLogHeader << "\n";
  for (const auto& r : log) out << r << "\n";
  out.close();
  save_checkpoint(cfg_.output_dir / "checkpoint.ckpt");
  if (hooks.on_epoch) hooks.on_epoch(sum);
  return sum;
}

std::vector<EpochSummary> Trainer::run(const TrainerHooks& hooks) {
  if (epoch_ == 0) {
    fs::remove(cfg_.output_dir / "metrics.csv");
    fs::remove(cfg_.output_dir / "train_log.csv");
  }
  std::vector<EpochSummary> out;
  while (epoch_ < cfg_.optim.epochs) out.push_back(train_epoch(hooks));
  return out;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  TensorArchive ar;
  ar.meta["config"] = cfg_;
  ar.meta["config_fingerprint"] = cfg_.fingerprint();
  ar.meta["model_fingerprint"] = model_->fingerprint();
  ar.meta["epoch"] = epoch_;
  ar.meta["steps"] = steps_;
  const auto& traj = weight_trajectory();
  ar.meta["final_lambda"] = traj.empty() ? 0.5 : traj.back().lambda_recon;
  save_module(*model_, ar, "model");
  save_adam_state<torch::optim::AdamW, torch::optim::AdamWParamState>(*opt_, ar, "opt");
  if (dsm_opt_) save_adam_state<torch::optim::Adam, torch::optim::AdamParamState>(*dsm_opt_, ar, "dsm_opt");
  if (agent_) agent_->save(ar, "agent");
  ar.add("rng.data", data_gen_.get_state());
  ar.add("rng.channel", channel_gen_.get_state());
  ar.add("rng.dsm", dsm_gen_.get_state());
  if (!static_trajectory_.empty()) {
    auto t = torch::empty({static_cast<std::int64_t>(static_trajectory_.size()), 4}, torch::kFloat64);
    for (std::size_t i = 0; i < static_trajectory_.size(); ++i) {
      const auto& p = static_trajectory_[i];
      const auto r = static_cast<std::int64_t>(i);
      t[r][0] = static_cast<double>(p.step);
      t[r][1] = p.epoch;
      t[r][2] = p.snr_db;
      t[r][3] = p.lambda_recon;
    }
    ar.add("static_trajectory", t);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  write_archive(tmp, kCheckpointMagic, kCheckpointVersion, ar);
  fs::rename(tmp, path);
}

ModelBundle load_model(const fs::path& checkpoint) {
  const auto ar = read_archive(checkpoint, kCheckpointMagic, kCheckpointVersion);
  ModelBundle b;
  try {
    b.config = ar.meta.at("config").get<ExperimentConfig>();
    b.epoch = ar.meta.at("epoch").get<std::int64_t>();
    b.final_lambda = ar.meta.value("final_lambda", 0.5);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(checkpoint.string() + ": bad metadata: " + e.what());
  }
  b.config.resolve();
  b.config.validate();
  b.model = SemanticModel(b.config);
  load_module(*b.model, ar, "model");
  if (ar.meta.contains("model_fingerprint") &&
      ar.meta.at("model_fingerprint").get<std::uint64_t>() != b.model->fingerprint()) {
    throw FormatError(checkpoint.string() + ": model fingerprint mismatch after load");
  }
  return b;
}

}  // namespace toast::harness
