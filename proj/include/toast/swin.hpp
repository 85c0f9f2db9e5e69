#pragma once

// Hierarchical windowed-attention codec. Feature maps are channel-last
// [B, H, W, C]; images are [B, C, H, W] in [0, 1].

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "toast/channel.hpp"
#include "toast/lora.hpp"

namespace toast::swin {

struct CodecConfig {
  std::int64_t image_height = 32;
  std::int64_t image_width = 32;
  std::int64_t image_channels = 3;
  std::int64_t patch_size = 2;
  std::vector<std::int64_t> dims{48, 96};
  std::vector<std::int64_t> depths{2, 2};
  std::vector<std::int64_t> heads{3, 6};
  std::int64_t window = 4;
  double mlp_ratio = 4.0;
  channel::LatentShape latent{};
  /// Ablation: every block unshifted.
  bool shifted_windows = true;

  void validate() const;
  /// Spatial size of the last encoder stage.
  std::int64_t bottom_height() const;
  std::int64_t bottom_width() const;
  std::int64_t latent_size() const { return latent.size(); }
};

/// Multi-head self-attention inside M x M windows with a learned relative
/// position bias. Maps whose sides are not multiples of M are zero padded and
/// the padded tokens are masked out as keys.
class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t window);

  torch::Tensor forward(const torch::Tensor& x, std::int64_t shift);
  /// Also returns the attention weights, [B, windows, heads, M*M, M*M].
  std::tuple<torch::Tensor, torch::Tensor> forward_with_weights(const torch::Tensor& x,
                                                                std::int64_t shift);

  /// Additive mask for one padded map, [windows, M*M, M*M]: 0 or -inf.
  torch::Tensor attention_mask(std::int64_t height, std::int64_t width, std::int64_t shift) const;
  /// Relative bias gathered to [heads, M*M, M*M].
  torch::Tensor relative_bias() const;

  std::int64_t dim() const { return dim_; }
  std::int64_t heads() const { return heads_; }
  std::int64_t window() const { return window_; }

  /// Multiply-adds spent in QK^T and AV since the last reset.
  std::int64_t score_macs = 0;

  lora::AdaptableLinear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr};
  torch::Tensor bias_table;  // [(2M-1)^2, heads]

 private:
  torch::Tensor run(const torch::Tensor& x, std::int64_t shift, torch::Tensor* weights);

  std::int64_t dim_, heads_, window_;
  torch::Tensor relative_index_;  // [M*M, M*M]
  mutable std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, torch::Tensor> masks_;
};
TORCH_MODULE(WindowAttention);

class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t window, std::int64_t shift,
                double mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x);

  std::int64_t shift() const { return shift_; }

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  lora::AdaptableLinear fc1{nullptr}, fc2{nullptr};

 private:
  std::int64_t shift_;
};
TORCH_MODULE(SwinBlock);

/// 2x2 neighbourhood concatenation followed by Linear(4 d -> d_out).
class PatchMergeImpl : public torch::nn::Module {
 public:
  PatchMergeImpl(std::int64_t dim, std::int64_t dim_out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerge);

/// Linear(d -> 4 d_out) reshaped into 2x2 blocks.
class PatchExpandImpl : public torch::nn::Module {
 public:
  PatchExpandImpl(std::int64_t dim, std::int64_t dim_out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Linear expansion{nullptr};

 private:
  std::int64_t dim_out_;
};
TORCH_MODULE(PatchExpand);

class SwinEncoderImpl : public torch::nn::Module {
 public:
  explicit SwinEncoderImpl(const CodecConfig& cfg);
  /// [B, C, H, W] -> [B, L]
  torch::Tensor forward(const torch::Tensor& images);
  lora::LayerRegistry layers();
  std::vector<WindowAttentionImpl*> attention_modules();

  const CodecConfig& config() const { return cfg_; }

  torch::nn::Linear patch_embed{nullptr};
  torch::nn::LayerNorm embed_norm{nullptr}, out_norm{nullptr};
  std::vector<std::vector<SwinBlock>> stages;
  std::vector<PatchMerge> merges;
  lora::AdaptableLinear projection{nullptr};

 private:
  CodecConfig cfg_;
};
TORCH_MODULE(SwinEncoder);

class SwinDecoderImpl : public torch::nn::Module {
 public:
  explicit SwinDecoderImpl(const CodecConfig& cfg);
  /// [B, L] -> [B, C, H, W] in [0, 1]
  torch::Tensor forward(const torch::Tensor& latent);
  lora::LayerRegistry layers();
  std::vector<WindowAttentionImpl*> attention_modules();

  const CodecConfig& config() const { return cfg_; }

  lora::AdaptableLinear projection{nullptr};
  std::vector<std::vector<SwinBlock>> stages;
  std::vector<PatchExpand> expands;
  torch::nn::LayerNorm out_norm{nullptr};
  torch::nn::Linear pixel_head{nullptr};

 private:
  CodecConfig cfg_;
};
TORCH_MODULE(SwinDecoder);

/// Split [B, C, H, W] into non-overlapping P x P patches, [B, H/P, W/P, P*P*C].
torch::Tensor patchify(const torch::Tensor& images, std::int64_t patch);
torch::Tensor unpatchify(const torch::Tensor& patches, std::int64_t patch, std::int64_t channels);

}  // namespace toast::swin
