#include "toast/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "toast/archive.hpp"
#include "toast/errors.hpp"

namespace toast::lora {

namespace F = torch::nn::functional;

namespace {

constexpr std::string_view kAdapterMagic = "TOASTADP";
constexpr std::uint32_t kAdapterVersion = 1;

torch::Tensor init_a_matrix(const AdapterSpec& spec, std::int64_t rows, std::int64_t cols,
                            torch::Generator& gen, torch::Dtype dtype) {
  const auto opts = torch::TensorOptions().dtype(dtype);
  switch (spec.role) {
    case Role::encoder:
    case Role::denoiser: {
      // Kaiming uniform, bound sqrt(6 / r_c).
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.rank));
      return (torch::rand({rows, cols}, gen, opts) * 2.0 - 1.0) * bound;
    }
    case Role::decoder:
      return torch::randn({rows, cols}, gen, opts) * 0.02;
    case Role::classifier: {
      // Xavier uniform, bound sqrt(6 / (r_c + k)).
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.rank + cols));
      return (torch::rand({rows, cols}, gen, opts) * 2.0 - 1.0) * bound;
    }
  }
  throw ConfigError("init_a_matrix: unknown role");
}

std::string format_count(double n) {
  char buf[32];
  if (n >= 1e6) {
    std::snprintf(buf, sizeof(buf), "%.2fM", n / 1e6);
  } else if (n >= 1e3) {
    std::snprintf(buf, sizeof(buf), "%.2fK", n / 1e3);
  } else {
    std::snprintf(buf, sizeof(buf), "%.0f", n);
  }
  return buf;
}

const AdaptableLayer* find_layer(const LayerRegistry& layers, std::string_view path) {
  for (const auto& l : layers) {
    if (l.path == path) return &l;
  }
  return nullptr;
}

AdapterEntry make_entry(const AdaptableLayer& layer, const AdapterSpec& spec,
                        torch::Generator& gen) {
  AdapterEntry entry;
  entry.path = layer.path;
  entry.role = layer.role;
  entry.kind = layer.kind;
  if (layer.conv != nullptr) {
    const auto dtype = layer.conv->conv->weight.scalar_type();
    entry.conv = init_conv_adapter(spec, layer.out_features(), layer.in_features(),
                                   layer.conv->kernel(), layer.conv->padding(), gen, dtype);
    layer.conv->attach(entry.conv);
  } else if (layer.linear != nullptr) {
    const auto dtype = layer.linear->linear->weight.scalar_type();
    entry.dense = init_adapter(spec, layer.out_features(), layer.in_features(), gen,
                               effective_rank(layer.kind, spec), dtype);
    layer.linear->attach(entry.dense);
  } else {
    throw ConfigError("adaptable layer '" + layer.path + "' has no target");
  }
  return entry;
}

std::vector<AdapterEntry> attach_kinds(const LayerRegistry& layers, const AdapterSpec& spec,
                                       torch::Generator& gen,
                                       std::initializer_list<LayerKind> kinds) {
  spec.validate();
  std::vector<AdapterEntry> out;
  for (const auto& layer : layers) {
    if (std::find(kinds.begin(), kinds.end(), layer.kind) == kinds.end()) continue;
    out.push_back(make_entry(layer, spec, gen));
  }
  return out;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::encoder: return "encoder";
    case Role::decoder: return "decoder";
    case Role::denoiser: return "denoiser";
    case Role::classifier: return "classifier";
  }
  return "unknown";
}

Role parse_role(std::string_view name) {
  if (name == "encoder") return Role::encoder;
  if (name == "decoder") return Role::decoder;
  if (name == "denoiser" || name == "edm") return Role::denoiser;
  if (name == "classifier") return Role::classifier;
  throw ConfigError("unknown adapter role '" + std::string(name) + "'");
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::qkv: return "qkv";
    case LayerKind::attn_out: return "attn_out";
    case LayerKind::mlp: return "mlp";
    case LayerKind::projection: return "projection";
    case LayerKind::head: return "head";
    case LayerKind::conv: return "conv";
    case LayerKind::time_embed: return "time_embed";
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::qkv, LayerKind::attn_out, LayerKind::mlp, LayerKind::projection,
                 LayerKind::head, LayerKind::conv, LayerKind::time_embed}) {
    if (to_string(k) == name) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

void AdapterSpec::validate() const {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
  if (!(scale_hat > 0.0)) throw ConfigError("adapter scale_hat must be > 0");
}

AdapterSpec AdapterSpec::defaults(Role role) {
  std::int64_t r = 16;
  switch (role) {
    case Role::encoder: r = 16; break;
    case Role::decoder: r = 16; break;
    case Role::denoiser: r = 8; break;
    case Role::classifier: r = 4; break;
  }
  return {role, r, static_cast<double>(r)};
}

std::map<Role, AdapterSpec> default_specs() {
  std::map<Role, AdapterSpec> specs;
  for (auto role : {Role::encoder, Role::decoder, Role::denoiser, Role::classifier}) {
    specs[role] = AdapterSpec::defaults(role);
  }
  return specs;
}

std::int64_t effective_rank(LayerKind kind, const AdapterSpec& spec) {
  return kind == LayerKind::qkv ? 2 * spec.rank : spec.rank;
}

// --- LowRankPair -----------------------------------------------------------

LowRankPairImpl::LowRankPairImpl(std::int64_t out_features, std::int64_t in_features,
                                 std::int64_t rank, double scale, torch::Dtype dtype)
    : scale_(scale) {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (rank > std::min(out_features, in_features)) {
    throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                      std::to_string(std::min(out_features, in_features)));
  }
  const auto opts = torch::TensorOptions().dtype(dtype);
  A = register_parameter("A", torch::zeros({rank, in_features}, opts));
  B = register_parameter("B", torch::zeros({out_features, rank}, opts));
}

torch::Tensor LowRankPairImpl::delta(const torch::Tensor& x) const {
  return F::linear(F::linear(x, A), B) * scale_;
}

torch::Tensor LowRankPairImpl::merged_delta() const { return B.mm(A) * scale_; }

// --- KroneckerConvAdapter --------------------------------------------------

KroneckerConvAdapterImpl::KroneckerConvAdapterImpl(std::int64_t out_channels,
                                                   std::int64_t in_channels,
                                                   std::int64_t kernel, std::int64_t rank,
                                                   std::int64_t padding, double scale,
                                                   torch::Dtype dtype)
    : padding_(padding), scale_(scale) {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (rank > std::min(out_channels, in_channels)) {
    throw ConfigError("conv adapter rank " + std::to_string(rank) +
                      " exceeds min(C_out, C_in) = " +
                      std::to_string(std::min(out_channels, in_channels)));
  }
  const auto opts = torch::TensorOptions().dtype(dtype);
  spatial = register_parameter("spatial", torch::zeros({kernel, kernel}, opts));
  U = register_parameter("U", torch::zeros({out_channels, rank}, opts));
  V = register_parameter("V", torch::zeros({rank, in_channels}, opts));
}

torch::Tensor KroneckerConvAdapterImpl::delta(const torch::Tensor& x) const {
  const auto r = rank();
  const auto k = kernel();
  auto projected = F::conv2d(x, V.view({r, V.size(1), 1, 1}));
  auto filtered = F::conv2d(projected, spatial.view({1, 1, k, k}).repeat({r, 1, 1, 1}),
                            F::Conv2dFuncOptions().padding(padding_).groups(r));
  return F::conv2d(filtered, U.view({U.size(0), r, 1, 1})) * scale_;
}

torch::Tensor KroneckerConvAdapterImpl::merged_delta() const {
  const auto k = kernel();
  auto channel = U.mm(V);
  return channel.view({channel.size(0), channel.size(1), 1, 1}) * spatial.view({1, 1, k, k}) *
         scale_;
}

LowRankPair init_adapter(const AdapterSpec& spec, std::int64_t d, std::int64_t k,
                         torch::Generator& gen, std::optional<std::int64_t> rank,
                         torch::Dtype dtype) {
  spec.validate();
  const auto r = rank.value_or(spec.rank);
  LowRankPair pair(d, k, r, spec.alpha(), dtype);
  torch::NoGradGuard no_grad;
  pair->A.copy_(init_a_matrix(spec, r, k, gen, dtype));
  return pair;
}

KroneckerConvAdapter init_conv_adapter(const AdapterSpec& spec, std::int64_t out_channels,
                                       std::int64_t in_channels, std::int64_t kernel,
                                       std::int64_t padding, torch::Generator& gen,
                                       torch::Dtype dtype) {
  spec.validate();
  KroneckerConvAdapter adapter(out_channels, in_channels, kernel, spec.rank, padding,
                               spec.alpha(), dtype);
  torch::NoGradGuard no_grad;
  adapter->V.copy_(init_a_matrix(spec, spec.rank, in_channels, gen, dtype));
  adapter->spatial.zero_();
  adapter->spatial[kernel / 2][kernel / 2] = 1.0;
  return adapter;
}

torch::Tensor adapted_forward(const torch::Tensor& weight, const LowRankPairImpl& pair,
                              const torch::Tensor& x) {
  if (weight.dim() != 2 || weight.size(0) != pair.out_features() ||
      weight.size(1) != pair.in_features() || x.size(-1) != weight.size(1)) {
    throw ShapeError("adapted_forward: weight, adapter and input shapes disagree");
  }
  return F::linear(x, weight) + pair.delta(x);
}

// --- adaptable layers ------------------------------------------------------

AdaptableLinearImpl::AdaptableLinearImpl(std::int64_t in_features, std::int64_t out_features,
                                         bool bias, LayerKind kind)
    : kind_(kind) {
  linear = register_module(
      "linear", torch::nn::Linear(torch::nn::LinearOptions(in_features, out_features).bias(bias)));
}

torch::Tensor AdaptableLinearImpl::forward(const torch::Tensor& x) {
  auto y = linear(x);
  if (adapter_) y = y + adapter_->delta(x);
  return y;
}

void AdaptableLinearImpl::attach(LowRankPair adapter) {
  if (adapter->out_features() != linear->weight.size(0) ||
      adapter->in_features() != linear->weight.size(1)) {
    throw ConfigError("adapter shape does not match linear layer");
  }
  adapter_ = std::move(adapter);
}

AdaptableConvImpl::AdaptableConvImpl(std::int64_t in_channels, std::int64_t out_channels,
                                     std::int64_t kernel, std::int64_t padding)
    : kernel_(kernel), padding_(padding) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                                       in_channels, out_channels, kernel)
                                                       .padding(padding)));
}

torch::Tensor AdaptableConvImpl::forward(const torch::Tensor& x) {
  auto y = conv(x);
  if (adapter_) y = y + adapter_->delta(x);
  return y;
}

torch::Tensor AdaptableConvImpl::adapter_delta(const torch::Tensor& x) const {
  if (!adapter_) return {};
  return adapter_->delta(x);
}

void AdaptableConvImpl::attach(KroneckerConvAdapter adapter) {
  if (adapter->U.size(0) != conv->weight.size(0) || adapter->V.size(1) != conv->weight.size(1) ||
      adapter->kernel() != kernel_ || adapter->padding() != padding_) {
    throw ConfigError("conv adapter shape does not match convolution");
  }
  adapter_ = std::move(adapter);
}

std::int64_t AdaptableLayer::out_features() const {
  if (linear != nullptr) return linear->linear->weight.size(0);
  if (conv != nullptr) return conv->conv->weight.size(0);
  return 0;
}

std::int64_t AdaptableLayer::in_features() const {
  if (linear != nullptr) return linear->linear->weight.size(1);
  if (conv != nullptr) return conv->conv->weight.size(1);
  return 0;
}

std::int64_t closed_form_adapter_params(const AdaptableLayer& layer, const AdapterSpec& spec) {
  const auto d = layer.out_features();
  const auto k = layer.in_features();
  if (layer.conv != nullptr) {
    const auto ks = layer.conv->kernel();
    return ks * ks + spec.rank * (d + k);
  }
  return effective_rank(layer.kind, spec) * (d + k);
}

// --- AdapterSet ------------------------------------------------------------

std::int64_t AdapterEntry::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::vector<torch::Tensor> AdapterEntry::parameters() const {
  if (dense) return dense->parameters();
  if (conv) return conv->parameters();
  return {};
}

std::vector<torch::Tensor> AdapterSet::parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& e : entries) {
    auto ps = e.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::int64_t AdapterSet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& e : entries) n += e.parameter_count();
  return n;
}

std::int64_t AdapterSet::parameter_count(Role role) const {
  std::int64_t n = 0;
  for (const auto& e : entries) {
    if (e.role == role) n += e.parameter_count();
  }
  return n;
}

const AdapterEntry* AdapterSet::find(std::string_view path) const {
  for (const auto& e : entries) {
    if (e.path == path) return &e;
  }
  return nullptr;
}

void AdapterSet::attach(const LayerRegistry& layers) const {
  for (const auto& e : entries) {
    const auto* layer = find_layer(layers, e.path);
    if (layer == nullptr) {
      throw ConfigError("adapter path '" + e.path + "' does not resolve against the model");
    }
    if (e.conv) {
      if (layer->conv == nullptr) throw ConfigError("adapter '" + e.path + "' expects a conv layer");
      layer->conv->attach(e.conv);
    } else if (e.dense) {
      if (layer->linear == nullptr) {
        throw ConfigError("adapter '" + e.path + "' expects a dense layer");
      }
      layer->linear->attach(e.dense);
    }
  }
}

void AdapterSet::detach(const LayerRegistry& layers) {
  for (const auto& l : layers) {
    if (l.linear != nullptr) l.linear->detach();
    if (l.conv != nullptr) l.conv->detach();
  }
}

std::vector<AdapterEntry> attach_attention_adapters(const LayerRegistry& block_layers,
                                                    const AdapterSpec& spec,
                                                    torch::Generator& gen) {
  return attach_kinds(block_layers, spec, gen, {LayerKind::qkv, LayerKind::attn_out});
}

std::vector<AdapterEntry> attach_scorenet_adapters(const LayerRegistry& net_layers,
                                                   const AdapterSpec& spec,
                                                   torch::Generator& gen) {
  return attach_kinds(net_layers, spec, gen, {LayerKind::conv, LayerKind::time_embed});
}

AdapterSet build_adapter_set(const LayerRegistry& layers, const std::map<Role, AdapterSpec>& specs,
                             std::string channel_key, std::uint64_t base_fingerprint,
                             torch::Generator& gen) {
  AdapterSet set;
  set.channel_key = std::move(channel_key);
  set.specs = specs;
  set.base_fingerprint = base_fingerprint;
  for (const auto& [role, spec] : specs) spec.validate();
  for (const auto& layer : layers) {
    auto it = specs.find(layer.role);
    if (it == specs.end()) continue;
    set.entries.push_back(make_entry(layer, it->second, gen));
  }
  return set;
}

// --- persistence -----------------------------------------------------------

void save_adapters(const AdapterSet& set, const std::filesystem::path& path) {
  TensorArchive ar;
  ar.meta["format"] = "toast-adapters";
  ar.meta["channel_key"] = set.channel_key;
  ar.meta["base_fingerprint"] = set.base_fingerprint;
  auto specs = nlohmann::json::array();
  for (const auto& [role, spec] : set.specs) {
    specs.push_back({{"role", to_string(role)}, {"rank", spec.rank}, {"scale_hat", spec.scale_hat}});
  }
  ar.meta["specs"] = specs;
  auto entries = nlohmann::json::array();
  for (const auto& e : set.entries) {
    nlohmann::json j = {{"path", e.path}, {"role", to_string(e.role)}, {"kind", to_string(e.kind)}};
    if (e.conv) {
      j["type"] = "kronecker_conv";
      j["rank"] = e.conv->rank();
      j["scale"] = e.conv->scale();
      j["padding"] = e.conv->padding();
      ar.add(e.path + ".spatial", e.conv->spatial);
      ar.add(e.path + ".U", e.conv->U);
      ar.add(e.path + ".V", e.conv->V);
    } else {
      j["type"] = "dense";
      j["rank"] = e.dense->rank();
      j["scale"] = e.dense->scale();
      ar.add(e.path + ".A", e.dense->A);
      ar.add(e.path + ".B", e.dense->B);
    }
    entries.push_back(j);
  }
  ar.meta["entries"] = entries;
  write_archive(path, kAdapterMagic, kAdapterVersion, ar);
}

AdapterSet load_adapters(const std::filesystem::path& path,
                         std::optional<std::uint64_t> expected_fingerprint) {
  auto ar = read_archive(path, kAdapterMagic, kAdapterVersion);
  AdapterSet set;
  try {
    if (ar.meta.at("format").get<std::string>() != "toast-adapters") {
      throw FormatError("'" + path.string() + "' is not an adapter file");
    }
    set.channel_key = ar.meta.at("channel_key").get<std::string>();
    set.base_fingerprint = ar.meta.at("base_fingerprint").get<std::uint64_t>();
    for (const auto& s : ar.meta.at("specs")) {
      AdapterSpec spec{parse_role(s.at("role").get<std::string>()), s.at("rank").get<std::int64_t>(),
                       s.at("scale_hat").get<double>()};
      set.specs[spec.role] = spec;
    }
    if (expected_fingerprint && *expected_fingerprint != set.base_fingerprint) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "expected %016llx, file has %016llx",
                    static_cast<unsigned long long>(*expected_fingerprint),
                    static_cast<unsigned long long>(set.base_fingerprint));
      throw ConfigError("adapter file '" + path.string() +
                        "' was trained against a different base model (" + buf + ")");
    }
    torch::NoGradGuard no_grad;
    for (const auto& j : ar.meta.at("entries")) {
      AdapterEntry e;
      e.path = j.at("path").get<std::string>();
      e.role = parse_role(j.at("role").get<std::string>());
      e.kind = parse_layer_kind(j.at("kind").get<std::string>());
      const auto type = j.at("type").get<std::string>();
      const double scale = j.at("scale").get<double>();
      if (type == "dense") {
        const auto& a = ar.get(e.path + ".A");
        const auto& b = ar.get(e.path + ".B");
        if (a.dim() != 2 || b.dim() != 2 || a.size(0) != b.size(1)) {
          throw FormatError("adapter '" + e.path + "' has inconsistent A/B shapes");
        }
        e.dense = LowRankPair(b.size(0), a.size(1), a.size(0), scale, a.scalar_type());
        e.dense->A.copy_(a);
        e.dense->B.copy_(b);
      } else if (type == "kronecker_conv") {
        const auto& s = ar.get(e.path + ".spatial");
        const auto& u = ar.get(e.path + ".U");
        const auto& v = ar.get(e.path + ".V");
        if (s.dim() != 2 || u.dim() != 2 || v.dim() != 2 || u.size(1) != v.size(0)) {
          throw FormatError("adapter '" + e.path + "' has inconsistent Kronecker factors");
        }
        e.conv = KroneckerConvAdapter(u.size(0), v.size(1), s.size(0), v.size(0),
                                      j.at("padding").get<std::int64_t>(), scale, s.scalar_type());
        e.conv->spatial.copy_(s);
        e.conv->U.copy_(u);
        e.conv->V.copy_(v);
      } else {
        throw FormatError("adapter '" + e.path + "' has unknown type '" + type + "'");
      }
      set.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed adapter header in '" + path.string() + "': " + e.what());
  }
  return set;
}

AdapterLibrary::AdapterLibrary(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path AdapterLibrary::path_for(std::string_view channel_key) const {
  return dir_ / (std::string(channel_key) + ".adapters");
}

void AdapterLibrary::store(const AdapterSet& set) const {
  save_adapters(set, path_for(set.channel_key));
}

bool AdapterLibrary::contains(std::string_view channel_key) const {
  return std::filesystem::exists(path_for(channel_key));
}

AdapterSet AdapterLibrary::load(std::string_view channel_key,
                                std::uint64_t base_fingerprint) const {
  return load_adapters(path_for(channel_key), base_fingerprint);
}

std::vector<std::string> AdapterLibrary::channel_keys() const {
  std::vector<std::string> keys;
  if (!std::filesystem::exists(dir_)) return keys;
  for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
    if (entry.path().extension() == ".adapters") keys.push_back(entry.path().stem().string());
  }
  std::sort(keys.begin(), keys.end());
  return keys;
}

// --- parameter accounting --------------------------------------------------

std::string ParamReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-12s %14s %14s %9s\n", "component", "original", "adapter",
                "% orig");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-12s %14s %14s %8.2f%%\n", r.component.c_str(),
                  format_count(r.original).c_str(), format_count(r.adapter).c_str(), r.percent());
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %14s %14s %8.2f%%\n", "total",
                format_count(total_original).c_str(), format_count(total_adapter).c_str(),
                percent());
  os << line;
  std::snprintf(line, sizeof(line), "reduction    %.2fx\n", reduction());
  os << line;
  return os.str();
}

ParamReport param_report(std::vector<RoleParamRow> rows) {
  ParamReport report;
  for (const auto& r : rows) {
    report.total_original += r.original;
    report.total_adapter += r.adapter;
  }
  report.rows = std::move(rows);
  return report;
}

ParamReport param_report(std::vector<RoleParamRow> rows, double total_original,
                         double total_adapter) {
  ParamReport report;
  report.rows = std::move(rows);
  report.total_original = total_original;
  report.total_adapter = total_adapter;
  return report;
}

ParamReport param_report(const std::map<Role, std::int64_t>& original_params,
                         const AdapterSet& adapters) {
  std::vector<RoleParamRow> rows;
  for (const auto& [role, count] : original_params) {
    rows.push_back({std::string(to_string(role)), static_cast<double>(count),
                    static_cast<double>(adapters.parameter_count(role))});
  }
  return param_report(std::move(rows));
}

}  // namespace toast::lora
