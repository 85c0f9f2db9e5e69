#pragma once

// Experiment configuration, the assembled semantic-communication model, the
// training loop, SNR-sweep evaluation, checkpoints and channel adaptation.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "toast/archive.hpp"
#include "toast/channel.hpp"
#include "toast/data.hpp"
#include "toast/edm.hpp"
#include "toast/heads.hpp"
#include "toast/lora.hpp"
#include "toast/rl.hpp"
#include "toast/swin.hpp"

namespace toast::harness {

// --- configuration ---------------------------------------------------------

struct DenoiserSettings {
  edm::ScoreNetConfig net{};
  double sigma_data = edm::kSigmaData;
  edm::DenoiseOptions train{4, edm::SamplerMode::alg1, 0.002};
  edm::DenoiseOptions eval{18, edm::SamplerMode::heun, 0.002};
  /// joint: denoiser weights follow the task loss; stagewise: they follow a
  /// separate score-matching objective on the clean latents.
  std::string schedule = "joint";
  edm::DsmOptions dsm{};
  double dsm_lr = 1e-3;
};

struct OptimizerSettings {
  double lr_start = 1e-4;
  double lr_end = 1e-6;
  std::int64_t epochs = 50;
  std::int64_t batch_size = 128;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
};

/// Cosine decay with lr(0) = start and lr(epochs - 1) = end.
double cosine_lr(const OptimizerSettings& s, std::int64_t epoch);

struct ChannelSchedule {
  channel::ChannelConfig params{};  // kind and impairment parameters; snr_db unused
  double snr_min = 0.0;
  double snr_max = 30.0;
};

struct AblationFlags {
  bool no_edm = false;
  bool static_weights = false;
  double static_lambda = 0.5;
  bool no_lora = false;
};

struct EvalSettings {
  std::vector<std::string> channels{"awgn"};
  std::vector<double> snrs{0, 5, 10, 15, 20, 25, 30};
  std::uint64_t seed = 2024;
  std::int64_t batch_size = 250;
  double val_snr = 10.0;
};

struct AdaptSettings {
  std::map<lora::Role, lora::AdapterSpec> specs = lora::default_specs();
  double fraction = 0.01;
  std::int64_t max_epochs = 5;
  std::int64_t batch_size = 16;
  double lr = 1e-4;
  std::int64_t patience = 1;
  double lambda_recon = 0.5;
  std::filesystem::path library;  // empty: <output_dir>/adapters
};

struct ExperimentConfig {
  std::string name = "experiment";
  data::DatasetSpec dataset{};
  swin::CodecConfig codec{};
  DenoiserSettings denoiser{};
  std::vector<std::int64_t> classifier_hidden{256};
  rl::AgentConfig agent{};
  OptimizerSettings optim{};
  ChannelSchedule channel{};
  AblationFlags ablation{};
  EvalSettings eval{};
  AdaptSettings adapt{};
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/experiment";

  /// Copies the dataset geometry into the codec; call after editing `dataset`.
  void resolve();
  void validate() const;
  heads::ClassifierConfig classifier() const;
  std::uint64_t fingerprint() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses, resolves and validates. Throws ConfigError naming the file.
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);

// --- model -----------------------------------------------------------------

class SemanticModelImpl : public torch::nn::Module {
 public:
  explicit SemanticModelImpl(const ExperimentConfig& cfg);

  lora::LayerRegistry layers();
  std::map<lora::Role, std::int64_t> role_parameters();
  std::vector<torch::Tensor> parameters_for(lora::Role role);
  std::uint64_t fingerprint() const;

  swin::SwinEncoder encoder{nullptr};
  swin::SwinDecoder decoder{nullptr};
  edm::Denoiser denoiser{nullptr};
  heads::Classifier classifier{nullptr};
};
TORCH_MODULE(SemanticModel);

struct PipelineOptions {
  channel::ChannelConfig channel{};
  bool oracle_sigma = true;
  bool use_edm = true;
  edm::DenoiseOptions denoise{};
};

struct PipelineOutput {
  torch::Tensor z;       // encoder output
  torch::Tensor z_norm;  // power normalized, transmitted
  torch::Tensor z_ch;    // received
  torch::Tensor z_dn;    // denoised (z_ch when EDM is off)
  torch::Tensor x_hat;
  torch::Tensor logits;
  double sigma_max = 0.0;
  channel::ChannelRealization realization;
};

PipelineOutput run_pipeline(SemanticModelImpl& model, const torch::Tensor& images,
                            const PipelineOptions& opts, torch::Generator& gen);

// --- training --------------------------------------------------------------

struct BatchStats {
  double loss = 0.0;
  double loss_recon = 0.0;
  double loss_cls = 0.0;
  double accuracy = 0.0;
  double lambda_recon = 0.0;
  double snr_db = 0.0;
  double grad_norm = 0.0;       // before clipping
  double grad_norm_clipped = 0.0;
};

/// Scales gradients so their global L2 norm (accumulated in float64) is at
/// most max_norm; returns the norm before scaling.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);
double grad_norm(const std::vector<torch::Tensor>& params);

struct EpochSummary {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_recon = 0.0;
  double loss_cls = 0.0;
  double max_grad_norm_clipped = 0.0;
  heads::MetricsRecord validation;
};

struct TrainerHooks {
  std::function<void(const BatchStats&)> on_batch;
  std::function<void(const EpochSummary&)> on_epoch;
};

class Trainer {
 public:
  /// Fresh run: builds the model, optimizers and agent from the config.
  Trainer(ExperimentConfig cfg, data::Splits splits);
  /// Resumes from a checkpoint written by save_checkpoint.
  Trainer(const std::filesystem::path& checkpoint, data::Splits splits);

  /// Trains the remaining epochs. After each epoch the validation row goes to
  /// metrics.csv, per-batch losses and weights to train_log.csv, and the full
  /// state to checkpoint.ckpt, all under the output dir.
  std::vector<EpochSummary> run(const TrainerHooks& hooks = {});
  EpochSummary train_epoch(const TrainerHooks& hooks = {});
  /// One optimization step on an explicit batch with the given SNR.
  BatchStats train_batch(const torch::Tensor& images, const torch::Tensor& labels, double snr_db,
                         double epoch_progress);

  void save_checkpoint(const std::filesystem::path& path) const;

  SemanticModel model() const { return model_; }
  const ExperimentConfig& config() const { return cfg_; }
  const data::Splits& splits() const { return splits_; }
  const rl::Agent* agent() const { return agent_.get(); }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t steps() const { return steps_; }
  /// Weights used per batch so far: the agent trajectory, or the fixed pair.
  const std::vector<rl::TrajectoryPoint>& weight_trajectory() const;

 private:
  void build();
  void set_lr(double lr);
  std::vector<torch::Tensor> main_parameters();

  ExperimentConfig cfg_;
  data::Splits splits_;
  SemanticModel model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> opt_;
  std::unique_ptr<torch::optim::Adam> dsm_opt_;
  std::unique_ptr<rl::Agent> agent_;
  torch::Generator data_gen_, channel_gen_, dsm_gen_;
  std::int64_t epoch_ = 0;
  std::int64_t steps_ = 0;
  std::vector<rl::TrajectoryPoint> static_trajectory_;
};

/// Checkpoint contents needed for inference or adaptation.
struct ModelBundle {
  ExperimentConfig config;
  SemanticModel model{nullptr};
  std::int64_t epoch = 0;
  double final_lambda = 0.5;
};

ModelBundle load_model(const std::filesystem::path& checkpoint);

constexpr const char* kCheckpointMagic = "TOASTCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

// --- evaluation ------------------------------------------------------------

struct EvalRequest {
  std::vector<channel::ChannelKind> channels{channel::ChannelKind::awgn};
  std::vector<double> snrs{0, 5, 10, 15, 20, 25, 30};
  channel::ChannelConfig params{};  // impairment parameters for every kind
  std::uint64_t seed = 2024;
  std::int64_t batch_size = 250;
  bool use_edm = true;
  edm::DenoiseOptions denoise{};
  double lambda_recon = 0.5;  // recorded, and weights loss_recon/loss_cls
  std::int64_t epoch = 0;
};

EvalRequest eval_request(const ExperimentConfig& cfg);

/// One row per (channel, SNR) cell; the noise stream is a function of the
/// seed and the cell only, so every configuration sees the same channel.
std::vector<heads::MetricsRecord> evaluate(SemanticModelImpl& model, const data::Dataset& test,
                                           const EvalRequest& req);

// --- adaptation ------------------------------------------------------------

struct AdaptResult {
  lora::AdapterSet adapters;
  std::int64_t epochs_run = 0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::int64_t trainable_params = 0;
  std::int64_t total_params = 0;
  double trainable_fraction() const {
    return total_params > 0 ? static_cast<double>(trainable_params) / total_params : 0.0;
  }
  std::uint64_t base_fingerprint_before = 0;
  std::uint64_t base_fingerprint_after = 0;
  std::filesystem::path saved_to;
};

struct AdaptRequest {
  channel::ChannelKind kind = channel::ChannelKind::rayleigh;
  double fraction = 0.01;
  std::int64_t max_epochs = 5;
  std::uint64_t seed = 0;
  std::filesystem::path library;  // empty: do not save
};

/// Freezes the base model, attaches fresh adapters and fits them on a
/// stratified sample of the training split drawn under the target channel.
/// The adapters stay attached on return.
AdaptResult adapt_to_channel(SemanticModelImpl& model, const ExperimentConfig& cfg,
                             const data::Splits& splits, const AdaptRequest& req);

}  // namespace toast::harness
