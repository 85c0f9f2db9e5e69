#pragma once

// Module-specific low-rank adapters.
//
// Dense layers get W' = W + alpha * B A with A (r x k), B (d x r). Conv layers
// get a Kronecker-form update dW[o, i, :, :] = alpha * (U V)[o, i] * S, where S
// is a single k x k spatial kernel and U V a rank-r channel factor. Adapters
// are owned by an AdapterSet and only *referenced* by the layers they attach
// to, so a model's parameters() never includes them and detaching restores the
// base computation exactly.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace toast::lora {

enum class Role { encoder, decoder, denoiser, classifier };

std::string_view to_string(Role role);
Role parse_role(std::string_view name);

/// Where an adapter sits; decides the rank rule (qkv gets 2 r_c).
enum class LayerKind { qkv, attn_out, mlp, projection, head, conv, time_embed };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

struct AdapterSpec {
  Role role = Role::encoder;
  std::int64_t rank = 16;
  double scale_hat = 16.0;  // alpha_hat; alpha = alpha_hat / rank

  double alpha() const { return scale_hat / static_cast<double>(rank); }
  void validate() const;

  /// Ranks 16/16/8/4 for encoder/decoder/denoiser/classifier, alpha = 1.
  static AdapterSpec defaults(Role role);
};

/// Rank actually used for a layer: 2 r_c on query/key/value, r_c elsewhere.
std::int64_t effective_rank(LayerKind kind, const AdapterSpec& spec);

class LowRankPairImpl : public torch::nn::Module {
 public:
  LowRankPairImpl(std::int64_t out_features, std::int64_t in_features, std::int64_t rank,
                  double scale, torch::Dtype dtype = torch::kFloat32);

  /// alpha * B (A x) over the last dimension of x.
  torch::Tensor delta(const torch::Tensor& x) const;
  /// alpha * B A, shape [out, in]. Only for merging and tests.
  torch::Tensor merged_delta() const;

  std::int64_t rank() const { return A.size(0); }
  std::int64_t in_features() const { return A.size(1); }
  std::int64_t out_features() const { return B.size(0); }
  double scale() const { return scale_; }
  /// r (d + k); also the extra multiply-adds per input vector.
  std::int64_t parameter_count() const { return rank() * (in_features() + out_features()); }

  torch::Tensor A;  // [r, k]
  torch::Tensor B;  // [d, r]

 private:
  double scale_;
};
TORCH_MODULE(LowRankPair);

class KroneckerConvAdapterImpl : public torch::nn::Module {
 public:
  KroneckerConvAdapterImpl(std::int64_t out_channels, std::int64_t in_channels,
                           std::int64_t kernel, std::int64_t rank, std::int64_t padding,
                           double scale, torch::Dtype dtype = torch::kFloat32);

  /// Applies the update without materializing it: V (1x1), S (depthwise), U (1x1).
  torch::Tensor delta(const torch::Tensor& x) const;
  /// alpha * (U V) (x) S, shape [out, in, k, k].
  torch::Tensor merged_delta() const;

  std::int64_t rank() const { return V.size(0); }
  std::int64_t kernel() const { return spatial.size(0); }
  std::int64_t padding() const { return padding_; }
  double scale() const { return scale_; }
  /// k^2 + r (C_out + C_in).
  std::int64_t parameter_count() const {
    return kernel() * kernel() + rank() * (U.size(0) + V.size(1));
  }

  torch::Tensor spatial;  // [k, k]
  torch::Tensor U;        // [C_out, r]
  torch::Tensor V;        // [r, C_in]

 private:
  std::int64_t padding_;
  double scale_;
};
TORCH_MODULE(KroneckerConvAdapter);

/// Fresh dense adapter with the role's A initialization and B = 0.
LowRankPair init_adapter(const AdapterSpec& spec, std::int64_t d, std::int64_t k,
                         torch::Generator& gen, std::optional<std::int64_t> rank = std::nullopt,
                         torch::Dtype dtype = torch::kFloat32);

/// Fresh Kronecker adapter: V gets the role's A initialization, U = 0 and the
/// spatial kernel starts as a centred delta.
KroneckerConvAdapter init_conv_adapter(const AdapterSpec& spec, std::int64_t out_channels,
                                       std::int64_t in_channels, std::int64_t kernel,
                                       std::int64_t padding, torch::Generator& gen,
                                       torch::Dtype dtype = torch::kFloat32);

/// W x + alpha B (A x); never forms B A.
torch::Tensor adapted_forward(const torch::Tensor& weight, const LowRankPairImpl& pair,
                              const torch::Tensor& x);

class AdaptableLinearImpl : public torch::nn::Module {
 public:
  AdaptableLinearImpl(std::int64_t in_features, std::int64_t out_features, bool bias,
                      LayerKind kind);

  torch::Tensor forward(const torch::Tensor& x);

  void attach(LowRankPair adapter);
  void detach() { adapter_ = nullptr; }
  const LowRankPair& adapter() const { return adapter_; }
  LayerKind kind() const { return kind_; }

  torch::nn::Linear linear{nullptr};

 private:
  LayerKind kind_;
  LowRankPair adapter_{nullptr};
};
TORCH_MODULE(AdaptableLinear);

class AdaptableConvImpl : public torch::nn::Module {
 public:
  AdaptableConvImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                    std::int64_t padding);

  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor base_forward(const torch::Tensor& x) { return conv(x); }
  /// Adapter contribution for input x, or an undefined tensor when detached.
  torch::Tensor adapter_delta(const torch::Tensor& x) const;

  void attach(KroneckerConvAdapter adapter);
  void detach() { adapter_ = nullptr; }
  const KroneckerConvAdapter& adapter() const { return adapter_; }

  std::int64_t kernel() const { return kernel_; }
  std::int64_t padding() const { return padding_; }

  torch::nn::Conv2d conv{nullptr};

 private:
  std::int64_t kernel_;
  std::int64_t padding_;
  KroneckerConvAdapter adapter_{nullptr};
};
TORCH_MODULE(AdaptableConv);

/// A layer that can receive an adapter, addressed by a stable dotted path.
struct AdaptableLayer {
  std::string path;
  Role role = Role::encoder;
  LayerKind kind = LayerKind::mlp;
  AdaptableLinearImpl* linear = nullptr;
  AdaptableConvImpl* conv = nullptr;

  std::int64_t out_features() const;
  std::int64_t in_features() const;
};
using LayerRegistry = std::vector<AdaptableLayer>;

/// Closed-form adapter size for one layer: r'(d + k) dense, k^2 + r(C_out + C_in) conv.
std::int64_t closed_form_adapter_params(const AdaptableLayer& layer, const AdapterSpec& spec);

struct AdapterEntry {
  std::string path;
  Role role = Role::encoder;
  LayerKind kind = LayerKind::mlp;
  LowRankPair dense{nullptr};
  KroneckerConvAdapter conv{nullptr};

  std::int64_t parameter_count() const;
  std::vector<torch::Tensor> parameters() const;
};

/// Adapters for one channel kind, keyed by layer path.
class AdapterSet {
 public:
  std::string channel_key;
  std::map<Role, AdapterSpec> specs;
  std::uint64_t base_fingerprint = 0;
  std::vector<AdapterEntry> entries;

  std::vector<torch::Tensor> parameters() const;
  std::int64_t parameter_count() const;
  std::int64_t parameter_count(Role role) const;
  const AdapterEntry* find(std::string_view path) const;

  /// Points every matching layer at its adapter; throws ConfigError if a path
  /// does not resolve or the shapes disagree.
  void attach(const LayerRegistry& layers) const;
  static void detach(const LayerRegistry& layers);
};

/// Adapters on the query/key/value (rank 2 r_c) and output (rank r_c)
/// projections among `block_layers`; the relative position bias is untouched.
std::vector<AdapterEntry> attach_attention_adapters(const LayerRegistry& block_layers,
                                                    const AdapterSpec& spec,
                                                    torch::Generator& gen);

/// Kronecker adapters on the residual-block convolutions and dense adapters on
/// the time-embedding projections among `net_layers`.
std::vector<AdapterEntry> attach_scorenet_adapters(const LayerRegistry& net_layers,
                                                   const AdapterSpec& spec,
                                                   torch::Generator& gen);

/// One adapter per registry layer whose role has a spec; attaches them.
AdapterSet build_adapter_set(const LayerRegistry& layers, const std::map<Role, AdapterSpec>& specs,
                             std::string channel_key, std::uint64_t base_fingerprint,
                             torch::Generator& gen);

std::map<Role, AdapterSpec> default_specs();

// --- persistence -----------------------------------------------------------

void save_adapters(const AdapterSet& set, const std::filesystem::path& path);
/// Throws FormatError on a malformed file and ConfigError when the stored base
/// fingerprint differs from `expected_fingerprint`.
AdapterSet load_adapters(const std::filesystem::path& path,
                         std::optional<std::uint64_t> expected_fingerprint);

/// One adapter file per channel kind under a directory.
class AdapterLibrary {
 public:
  explicit AdapterLibrary(std::filesystem::path dir);

  std::filesystem::path path_for(std::string_view channel_key) const;
  void store(const AdapterSet& set) const;
  bool contains(std::string_view channel_key) const;
  AdapterSet load(std::string_view channel_key, std::uint64_t base_fingerprint) const;
  std::vector<std::string> channel_keys() const;

 private:
  std::filesystem::path dir_;
};

// --- parameter accounting --------------------------------------------------

struct RoleParamRow {
  std::string component;
  double original = 0;
  double adapter = 0;
  double percent() const { return original > 0 ? 100.0 * adapter / original : 0.0; }
};

struct ParamReport {
  std::vector<RoleParamRow> rows;
  double total_original = 0;
  double total_adapter = 0;

  double percent() const { return total_original > 0 ? 100.0 * total_adapter / total_original : 0.0; }
  /// original_total / adapter_total
  double reduction() const { return total_adapter > 0 ? total_original / total_adapter : 0.0; }
  std::string to_table() const;
};

/// Totals are the column sums.
ParamReport param_report(std::vector<RoleParamRow> rows);
/// Totals given explicitly, e.g. a published "total model" line.
ParamReport param_report(std::vector<RoleParamRow> rows, double total_original,
                         double total_adapter);
/// Per-role counts of a live model against an adapter set.
ParamReport param_report(const std::map<Role, std::int64_t>& original_params,
                         const AdapterSet& adapters);

}  // namespace toast::lora
