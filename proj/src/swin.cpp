#include "toast/swin.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "toast/errors.hpp"

namespace toast::swin {

namespace F = torch::nn::functional;

namespace {

std::int64_t round_up(std::int64_t n, std::int64_t m) { return (n + m - 1) / m * m; }

std::string idx(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

void add_block_layers(lora::LayerRegistry& reg, const std::string& prefix, lora::Role role,
                      SwinBlockImpl& block) {
  reg.push_back({prefix + ".attn.q", role, lora::LayerKind::qkv, block.attn->q.get(), nullptr});
  reg.push_back({prefix + ".attn.k", role, lora::LayerKind::qkv, block.attn->k.get(), nullptr});
  reg.push_back({prefix + ".attn.v", role, lora::LayerKind::qkv, block.attn->v.get(), nullptr});
  reg.push_back({prefix + ".attn.out", role, lora::LayerKind::attn_out, block.attn->out.get(), nullptr});
  reg.push_back({prefix + ".mlp.fc1", role, lora::LayerKind::mlp, block.fc1.get(), nullptr});
  reg.push_back({prefix + ".mlp.fc2", role, lora::LayerKind::mlp, block.fc2.get(), nullptr});
}

std::vector<SwinBlock> make_stage(torch::nn::Module& owner, const std::string& name,
                                  std::int64_t depth, std::int64_t dim, std::int64_t heads,
                                  const CodecConfig& cfg) {
  std::vector<SwinBlock> blocks;
  for (std::int64_t b = 0; b < depth; ++b) {
    const std::int64_t shift = (cfg.shifted_windows && b % 2 == 1) ? cfg.window / 2 : 0;
    blocks.push_back(owner.register_module(name + "_" + idx("block", b),
                                           SwinBlock(dim, heads, cfg.window, shift, cfg.mlp_ratio)));
  }
  return blocks;
}

void check_feature_map(const torch::Tensor& x, std::int64_t dim, const char* who) {
  if (x.dim() != 4 || x.size(3) != dim) {
    throw ShapeError(std::string(who) + ": expected [B, H, W, " + std::to_string(dim) + "]");
  }
}

}  // namespace

// --- config ----------------------------------------------------------------

void CodecConfig::validate() const {
  if (dims.empty() || dims.size() != depths.size() || dims.size() != heads.size()) {
    throw ConfigError("codec: dims, depths and heads need one entry per stage");
  }
  for (std::size_t s = 0; s < dims.size(); ++s) {
    if (heads[s] < 1 || dims[s] % heads[s] != 0) {
      throw ConfigError("codec: stage " + std::to_string(s) + " dim " + std::to_string(dims[s]) +
                        " is not divisible by heads " + std::to_string(heads[s]));
    }
    if (depths[s] < 1) throw ConfigError("codec: stage depth must be >= 1");
  }
  if (window < 1) throw ConfigError("codec: window must be >= 1");
  if (patch_size < 1 || image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw ConfigError("codec: image sides must be multiples of the patch size");
  }
  const std::int64_t reduce = std::int64_t{1} << (dims.size() - 1);
  if ((image_height / patch_size) % reduce != 0 || (image_width / patch_size) % reduce != 0) {
    throw ConfigError("codec: patch grid must halve evenly at every stage transition");
  }
  if (latent.size() <= 0) throw ConfigError("codec: latent shape must be positive");
  if (mlp_ratio <= 0) throw ConfigError("codec: mlp_ratio must be > 0");
}

std::int64_t CodecConfig::bottom_height() const {
  return image_height / patch_size / (std::int64_t{1} << (dims.size() - 1));
}

std::int64_t CodecConfig::bottom_width() const {
  return image_width / patch_size / (std::int64_t{1} << (dims.size() - 1));
}

// --- window attention ------------------------------------------------------

WindowAttentionImpl::WindowAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t window)
    : dim_(dim), heads_(heads), window_(window) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("window attention: dim " + std::to_string(dim) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if (window < 1) throw ConfigError("window attention: window must be >= 1");
  q = register_module("q", lora::AdaptableLinear(dim, dim, true, lora::LayerKind::qkv));
  k = register_module("k", lora::AdaptableLinear(dim, dim, true, lora::LayerKind::qkv));
  v = register_module("v", lora::AdaptableLinear(dim, dim, true, lora::LayerKind::qkv));
  out = register_module("out", lora::AdaptableLinear(dim, dim, true, lora::LayerKind::attn_out));
  const auto span = 2 * window - 1;
  bias_table = register_parameter("bias_table", torch::randn({span * span, heads}) * 0.02);

  const auto n = window * window;
  auto index = torch::empty({n, n}, torch::kLong);
  auto acc = index.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const auto dy = i / window - j / window + window - 1;
      const auto dx = i % window - j % window + window - 1;
      acc[i][j] = dy * span + dx;
    }
  }
  relative_index_ = index;
}

torch::Tensor WindowAttentionImpl::relative_bias() const {
  const auto n = window_ * window_;
  return bias_table.index_select(0, relative_index_.reshape({-1}))
      .reshape({n, n, heads_})
      .permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::attention_mask(std::int64_t height, std::int64_t width,
                                                  std::int64_t shift) const {
  const auto key = std::make_tuple(height, width, shift);
  if (auto it = masks_.find(key); it != masks_.end()) return it->second;

  const auto m = window_;
  const auto hp = round_up(height, m);
  const auto wp = round_up(width, m);
  // Region labels on the rolled grid; padding is marked separately.
  auto region = torch::zeros({hp, wp}, torch::kLong);
  auto pad = torch::zeros({hp, wp}, torch::kBool);
  auto ra = region.accessor<std::int64_t, 2>();
  auto pa = pad.accessor<bool, 2>();
  auto band = [&](std::int64_t p, std::int64_t extent) -> std::int64_t {
    if (shift == 0) return 0;
    if (p < extent - m) return 0;
    if (p < extent - shift) return 1;
    return 2;
  };
  for (std::int64_t y = 0; y < hp; ++y) {
    for (std::int64_t x = 0; x < wp; ++x) {
      ra[y][x] = band(y, hp) * 3 + band(x, wp);
      // Position on the original (unrolled) padded grid.
      const auto oy = (y + shift) % hp;
      const auto ox = (x + shift) % wp;
      pa[y][x] = oy >= height || ox >= width;
    }
  }
  auto to_windows = [&](const torch::Tensor& t) {
    return t.view({hp / m, m, wp / m, m}).permute({0, 2, 1, 3}).reshape({-1, m * m});
  };
  auto rw = to_windows(region);
  auto pw = to_windows(pad);
  auto different = rw.unsqueeze(2) != rw.unsqueeze(1);
  // Real queries never see padded keys; padded queries keep their own region
  // so no softmax row is empty.
  auto padded_key = pw.unsqueeze(1) & pw.logical_not().unsqueeze(2);
  auto blocked = different | padded_key;
  auto mask = torch::zeros(blocked.sizes(), torch::kFloat32)
                  .masked_fill(blocked, -std::numeric_limits<float>::infinity());
  masks_[key] = mask;
  return mask;
}

torch::Tensor WindowAttentionImpl::run(const torch::Tensor& x, std::int64_t shift,
                                       torch::Tensor* weights) {
  check_feature_map(x, dim_, "window attention");
  if (shift < 0 || shift >= window_) {
    throw ConfigError("window attention: shift must lie in [0, M)");
  }
  const auto b = x.size(0);
  const auto h = x.size(1);
  const auto w = x.size(2);
  const auto m = window_;
  const auto hp = round_up(h, m);
  const auto wp = round_up(w, m);
  const auto n = m * m;
  const auto hd = dim_ / heads_;

  auto t = x;
  if (hp != h || wp != w) t = F::pad(t, F::PadFuncOptions({0, 0, 0, wp - w, 0, hp - h}));
  if (shift > 0) t = torch::roll(t, {-shift, -shift}, {1, 2});
  const auto nw = (hp / m) * (wp / m);
  auto windows = t.view({b, hp / m, m, wp / m, m, dim_}).permute({0, 1, 3, 2, 4, 5}).reshape(
      {b * nw, n, dim_});

  auto split = [&](const torch::Tensor& y) {
    return y.view({b * nw, n, heads_, hd}).permute({0, 2, 1, 3});
  };
  auto qh = split(q(windows));
  auto kh = split(k(windows));
  auto vh = split(v(windows));

  auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
  scores = scores + relative_bias().unsqueeze(0).to(scores.dtype());
  const bool need_mask = shift > 0 || hp != h || wp != w;
  if (need_mask) {
    auto mask = attention_mask(h, w, shift).to(scores.dtype());
    scores = (scores.view({b, nw, heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0))
                 .view({b * nw, heads_, n, n});
  }
  auto attn = torch::softmax(scores, -1);
  score_macs += 2 * b * nw * heads_ * n * n * hd;
  if (weights != nullptr) *weights = attn.view({b, nw, heads_, n, n});

  auto mixed = torch::matmul(attn, vh).permute({0, 2, 1, 3}).reshape({b * nw, n, dim_});
  auto y = out(mixed)
               .view({b, hp / m, wp / m, m, m, dim_})
               .permute({0, 1, 3, 2, 4, 5})
               .reshape({b, hp, wp, dim_});
  if (shift > 0) y = torch::roll(y, {shift, shift}, {1, 2});
  if (hp != h || wp != w) {
    y = y.slice(1, 0, h).slice(2, 0, w);
  }
  return y.contiguous();
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, std::int64_t shift) {
  return run(x, shift, nullptr);
}

std::tuple<torch::Tensor, torch::Tensor> WindowAttentionImpl::forward_with_weights(
    const torch::Tensor& x, std::int64_t shift) {
  torch::Tensor weights;
  auto y = run(x, shift, &weights);
  return {y, weights};
}

// --- blocks ----------------------------------------------------------------

SwinBlockImpl::SwinBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t window,
                             std::int64_t shift, double mlp_ratio)
    : shift_(shift) {
  const auto hidden = static_cast<std::int64_t>(std::llround(dim * mlp_ratio));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", WindowAttention(dim, heads, window));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", lora::AdaptableLinear(dim, hidden, true, lora::LayerKind::mlp));
  fc2 = register_module("fc2", lora::AdaptableLinear(hidden, dim, true, lora::LayerKind::mlp));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
  auto y = x + attn(norm1(x), shift_);
  return y + fc2(torch::gelu(fc1(norm2(y))));
}

PatchMergeImpl::PatchMergeImpl(std::int64_t dim, std::int64_t dim_out) {
  reduction = register_module(
      "reduction", torch::nn::Linear(torch::nn::LinearOptions(4 * dim, dim_out).bias(false)));
}

torch::Tensor PatchMergeImpl::forward(const torch::Tensor& x) {
  check_feature_map(x, reduction->weight.size(1) / 4, "patch merge");
  if (x.size(1) % 2 != 0 || x.size(2) % 2 != 0) {
    throw ShapeError("patch merge: spatial dims must be even, got " + std::to_string(x.size(1)) +
                     "x" + std::to_string(x.size(2)));
  }
  using torch::indexing::None;
  using torch::indexing::Slice;
  auto x0 = x.index({Slice(), Slice(0, None, 2), Slice(0, None, 2)});
  auto x1 = x.index({Slice(), Slice(1, None, 2), Slice(0, None, 2)});
  auto x2 = x.index({Slice(), Slice(0, None, 2), Slice(1, None, 2)});
  auto x3 = x.index({Slice(), Slice(1, None, 2), Slice(1, None, 2)});
  return reduction(torch::cat({x0, x1, x2, x3}, -1));
}

PatchExpandImpl::PatchExpandImpl(std::int64_t dim, std::int64_t dim_out) : dim_out_(dim_out) {
  expansion = register_module(
      "expansion", torch::nn::Linear(torch::nn::LinearOptions(dim, 4 * dim_out).bias(false)));
}

torch::Tensor PatchExpandImpl::forward(const torch::Tensor& x) {
  check_feature_map(x, expansion->weight.size(1), "patch expand");
  const auto b = x.size(0);
  const auto h = x.size(1);
  const auto w = x.size(2);
  return expansion(x)
      .view({b, h, w, 2, 2, dim_out_})
      .permute({0, 1, 3, 2, 4, 5})
      .reshape({b, 2 * h, 2 * w, dim_out_});
}

torch::Tensor patchify(const torch::Tensor& images, std::int64_t patch) {
  const auto b = images.size(0);
  const auto c = images.size(1);
  const auto h = images.size(2) / patch;
  const auto w = images.size(3) / patch;
  return images.view({b, c, h, patch, w, patch})
      .permute({0, 2, 4, 3, 5, 1})
      .reshape({b, h, w, patch * patch * c});
}

torch::Tensor unpatchify(const torch::Tensor& patches, std::int64_t patch, std::int64_t channels) {
  const auto b = patches.size(0);
  const auto h = patches.size(1);
  const auto w = patches.size(2);
  return patches.view({b, h, w, patch, patch, channels})
      .permute({0, 5, 1, 3, 2, 4})
      .reshape({b, channels, h * patch, w * patch});
}

// --- encoder / decoder -----------------------------------------------------

SwinEncoderImpl::SwinEncoderImpl(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto p = cfg_.patch_size;
  patch_embed = register_module(
      "patch_embed", torch::nn::Linear(p * p * cfg_.image_channels, cfg_.dims.front()));
  embed_norm = register_module("embed_norm",
                               torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.dims.front()})));
  for (std::size_t s = 0; s < cfg_.dims.size(); ++s) {
    stages.push_back(make_stage(*this, idx("stage", s), cfg_.depths[s], cfg_.dims[s],
                                cfg_.heads[s], cfg_));
    if (s + 1 < cfg_.dims.size()) {
      merges.push_back(register_module(idx("merge", s), PatchMerge(cfg_.dims[s], cfg_.dims[s + 1])));
    }
  }
  out_norm = register_module("out_norm",
                             torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.dims.back()})));
  const auto flat = cfg_.bottom_height() * cfg_.bottom_width() * cfg_.dims.back();
  projection = register_module(
      "projection", lora::AdaptableLinear(flat, cfg_.latent_size(), true, lora::LayerKind::projection));
}

torch::Tensor SwinEncoderImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != cfg_.image_channels ||
      images.size(2) != cfg_.image_height || images.size(3) != cfg_.image_width) {
    throw ShapeError("encode: expected images [B, " + std::to_string(cfg_.image_channels) + ", " +
                     std::to_string(cfg_.image_height) + ", " + std::to_string(cfg_.image_width) +
                     "]");
  }
  auto x = embed_norm(patch_embed(patchify(images, cfg_.patch_size)));
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (auto& block : stages[s]) x = block(x);
    if (s < merges.size()) x = merges[s](x);
  }
  x = out_norm(x);
  return projection(x.reshape({x.size(0), -1}));
}

lora::LayerRegistry SwinEncoderImpl::layers() {
  lora::LayerRegistry reg;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      add_block_layers(reg, "encoder." + idx("stage", s) + "." + idx("block", b),
                       lora::Role::encoder, *stages[s][b]);
    }
  }
  reg.push_back({"encoder.projection", lora::Role::encoder, lora::LayerKind::projection,
                 projection.get(), nullptr});
  return reg;
}

std::vector<WindowAttentionImpl*> SwinEncoderImpl::attention_modules() {
  std::vector<WindowAttentionImpl*> out;
  for (auto& stage : stages) {
    for (auto& block : stage) out.push_back(block->attn.get());
  }
  return out;
}

SwinDecoderImpl::SwinDecoderImpl(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto n = cfg_.dims.size();
  const auto flat = cfg_.bottom_height() * cfg_.bottom_width() * cfg_.dims.back();
  projection = register_module(
      "projection", lora::AdaptableLinear(cfg_.latent_size(), flat, true, lora::LayerKind::projection));
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = n - 1 - i;
    stages.push_back(make_stage(*this, idx("stage", i), cfg_.depths[s], cfg_.dims[s],
                                cfg_.heads[s], cfg_));
    if (s > 0) {
      expands.push_back(register_module(idx("expand", i), PatchExpand(cfg_.dims[s], cfg_.dims[s - 1])));
    }
  }
  out_norm = register_module("out_norm",
                             torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg_.dims.front()})));
  const auto p = cfg_.patch_size;
  pixel_head = register_module(
      "pixel_head", torch::nn::Linear(cfg_.dims.front(), p * p * cfg_.image_channels));
}

torch::Tensor SwinDecoderImpl::forward(const torch::Tensor& latent) {
  if (latent.dim() != 2 || latent.size(1) != cfg_.latent_size()) {
    throw ShapeError("decode: expected latent [B, " + std::to_string(cfg_.latent_size()) + "]");
  }
  auto x = projection(latent).view(
      {latent.size(0), cfg_.bottom_height(), cfg_.bottom_width(), cfg_.dims.back()});
  for (std::size_t i = 0; i < stages.size(); ++i) {
    for (auto& block : stages[i]) x = block(x);
    if (i < expands.size()) x = expands[i](x);
  }
  auto patches = pixel_head(out_norm(x));
  return torch::sigmoid(unpatchify(patches, cfg_.patch_size, cfg_.image_channels));
}

lora::LayerRegistry SwinDecoderImpl::layers() {
  lora::LayerRegistry reg;
  reg.push_back({"decoder.projection", lora::Role::decoder, lora::LayerKind::projection,
                 projection.get(), nullptr});
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      add_block_layers(reg, "decoder." + idx("stage", s) + "." + idx("block", b),
                       lora::Role::decoder, *stages[s][b]);
    }
  }
  return reg;
}

std::vector<WindowAttentionImpl*> SwinDecoderImpl::attention_modules() {
  std::vector<WindowAttentionImpl*> out;
  for (auto& stage : stages) {
    for (auto& block : stage) out.push_back(block->attn.get());
  }
  return out;
}

}  // namespace toast::swin
