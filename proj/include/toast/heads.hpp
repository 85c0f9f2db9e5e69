#pragma once

// Classification head on the denoised latent, task losses and evaluation
// metrics (PSNR, SSIM, accuracy, macro-F1) with their CSV record.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "toast/lora.hpp"

namespace toast::heads {

struct ClassifierConfig {
  std::int64_t input_dim = 2304;
  std::vector<std::int64_t> hidden{256};
  std::int64_t classes = 10;

  void validate() const;
};

/// MLP with ReLU hidden layers; the final linear is adaptable.
class ClassifierImpl : public torch::nn::Module {
 public:
  explicit ClassifierImpl(const ClassifierConfig& cfg);
  /// z [B, L] -> logits [B, K]
  torch::Tensor forward(const torch::Tensor& z);

  lora::LayerRegistry layers();
  const ClassifierConfig& config() const { return cfg_; }

  std::vector<torch::nn::Linear> hidden;
  lora::AdaptableLinear head{nullptr};

 private:
  ClassifierConfig cfg_;
};
TORCH_MODULE(Classifier);

/// Row-wise argmax with ties broken to the lowest index.
torch::Tensor predict(const torch::Tensor& logits);

struct WeightPair {
  double lambda_recon = 0.5;
  double lambda_cls = 0.5;

  static WeightPair from_recon(double lambda_recon) { return {lambda_recon, 1.0 - lambda_recon}; }
  /// Throws ConfigError unless both are >= 0 and they sum to 1 within 1e-6.
  void validate() const;
};

struct LossTerms {
  torch::Tensor total;
  torch::Tensor recon;
  torch::Tensor cls;
};

/// lambda_recon * MSE(x, x_hat) + lambda_cls * CE(logits, y).
LossTerms total_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& y,
                     const torch::Tensor& logits, const WeightPair& weights);

/// 10 log10(1 / MSE) over the whole batch; +inf when MSE is 0.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat);
/// Per-image PSNR [B].
torch::Tensor psnr_per_image(const torch::Tensor& x, const torch::Tensor& x_hat);

struct SsimOptions {
  std::int64_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean SSIM over images [B, C, H, W], valid-region Gaussian filtering per
/// channel. Images smaller than the window use a window of the image size.
double ssim(const torch::Tensor& x, const torch::Tensor& x_hat, const SsimOptions& opts = {});
torch::Tensor ssim_per_image(const torch::Tensor& x, const torch::Tensor& x_hat,
                             const SsimOptions& opts = {});

double accuracy(const std::vector<std::int64_t>& labels, const std::vector<std::int64_t>& preds);
/// Macro average over the union of classes seen in labels or predictions.
double f1_macro(const std::vector<std::int64_t>& labels, const std::vector<std::int64_t>& preds);

std::vector<std::int64_t> to_vector(const torch::Tensor& labels);

struct MetricsRecord {
  double psnr = 0.0;
  double ssim = 0.0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double loss_recon = 0.0;
  double loss_cls = 0.0;
  double lambda_recon = 0.0;
  double snr_db = 0.0;
  std::int64_t epoch = 0;
  std::string channel;
};

std::string csv_header();
std::string to_csv_row(const MetricsRecord& rec);
void write_csv(std::ostream& os, const std::vector<MetricsRecord>& rows);
void write_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows);
/// Appends rows, writing the header first when the file is new or empty.
void append_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows);
/// Throws FormatError on a bad header or row.
std::vector<MetricsRecord> read_csv(const std::filesystem::path& path);

}  // namespace toast::heads
