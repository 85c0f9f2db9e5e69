#include "toast/heads.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "toast/errors.hpp"

namespace toast::heads {

namespace F = torch::nn::functional;

namespace {

constexpr const char* kColumns[] = {"psnr",     "ssim",         "accuracy", "f1_macro", "loss_recon",
                                    "loss_cls", "lambda_recon", "snr_db",   "epoch",    "channel"};
constexpr std::size_t kColumnCount = std::size(kColumns);

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, std::size_t line) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("metrics csv line " + std::to_string(line) + ": bad number '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

torch::Tensor gaussian_window(std::int64_t size, double sigma) {
  auto x = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(x * x) / (2.0 * sigma * sigma));
  return g / g.sum();
}

torch::Tensor filter(const torch::Tensor& img, const torch::Tensor& w_row, const torch::Tensor& w_col,
                     std::int64_t channels) {
  auto y = F::conv2d(img, w_row, F::Conv2dFuncOptions().groups(channels));
  return F::conv2d(y, w_col, F::Conv2dFuncOptions().groups(channels));
}

void check_images(const torch::Tensor& x, const torch::Tensor& x_hat, const char* what) {
  if (x.sizes() != x_hat.sizes()) {
    throw ShapeError(std::string(what) + ": image shapes differ");
  }
  if (x.dim() != 4) throw ShapeError(std::string(what) + ": expected [B, C, H, W]");
}

}  // namespace

void ClassifierConfig::validate() const {
  if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (input_dim < 1) throw ConfigError("classifier input dim must be positive");
  for (auto h : hidden) {
    if (h < 1) throw ConfigError("classifier hidden widths must be positive");
  }
}

ClassifierImpl::ClassifierImpl(const ClassifierConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::int64_t in = cfg_.input_dim;
  for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
    hidden.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(in, cfg_.hidden[i])));
    in = cfg_.hidden[i];
  }
  head = register_module("head", lora::AdaptableLinear(in, cfg_.classes, true, lora::LayerKind::head));
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != cfg_.input_dim) {
    throw ShapeError("classifier expects [B, " + std::to_string(cfg_.input_dim) + "]");
  }
  auto h = z;
  for (auto& fc : hidden) h = torch::relu(fc(h));
  return head(h);
}

lora::LayerRegistry ClassifierImpl::layers() {
  return {{"classifier.head", lora::Role::classifier, lora::LayerKind::head, head.get(), nullptr}};
}

torch::Tensor predict(const torch::Tensor& logits) {
  auto max = std::get<0>(logits.max(1, true));
  const auto k = logits.size(1);
  auto idx = torch::arange(k, logits.options().dtype(torch::kLong)).expand_as(logits);
  auto candidates = torch::where(logits == max, idx, torch::full_like(idx, k));
  return std::get<0>(candidates.min(1));
}

void WeightPair::validate() const {
  if (lambda_recon < -1e-6 || lambda_cls < -1e-6 ||
      std::abs(lambda_recon + lambda_cls - 1.0) > 1e-6) {
    throw ConfigError("loss weights off the simplex: (" + fmt_double(lambda_recon) + ", " +
                      fmt_double(lambda_cls) + ")");
  }
}

LossTerms total_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& y,
                     const torch::Tensor& logits, const WeightPair& weights) {
  weights.validate();
  if (x.sizes() != x_hat.sizes()) throw ShapeError("total_loss: reconstruction shape mismatch");
  LossTerms out;
  out.recon = F::mse_loss(x_hat, x);
  out.cls = F::cross_entropy(logits, y);
  out.total = weights.lambda_recon * out.recon + weights.lambda_cls * out.cls;
  return out;
}

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat) {
  if (x.sizes() != x_hat.sizes()) throw ShapeError("psnr: image shapes differ");
  const double mse = (x.to(torch::kFloat64) - x_hat.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

torch::Tensor psnr_per_image(const torch::Tensor& x, const torch::Tensor& x_hat) {
  if (x.sizes() != x_hat.sizes()) throw ShapeError("psnr: image shapes differ");
  auto d = (x.to(torch::kFloat64) - x_hat.to(torch::kFloat64)).flatten(1);
  auto mse = d.pow(2).mean(1);
  return 10.0 * torch::log10(1.0 / mse);
}

torch::Tensor ssim_per_image(const torch::Tensor& x, const torch::Tensor& x_hat,
                             const SsimOptions& opts) {
  check_images(x, x_hat, "ssim");
  const auto c = x.size(1);
  const auto win = std::min({opts.window, x.size(2), x.size(3)});
  auto g = gaussian_window(win, opts.sigma);
  auto w_row = g.view({1, 1, 1, win}).repeat({c, 1, 1, 1});
  auto w_col = g.view({1, 1, win, 1}).repeat({c, 1, 1, 1});

  auto a = x.to(torch::kFloat64);
  auto b = x_hat.to(torch::kFloat64);
  const double c1 = std::pow(opts.k1 * opts.data_range, 2);
  const double c2 = std::pow(opts.k2 * opts.data_range, 2);

  auto mu_a = filter(a, w_row, w_col, c);
  auto mu_b = filter(b, w_row, w_col, c);
  auto var_a = filter(a * a, w_row, w_col, c) - mu_a * mu_a;
  auto var_b = filter(b * b, w_row, w_col, c) - mu_b * mu_b;
  auto cov = filter(a * b, w_row, w_col, c) - mu_a * mu_b;

  auto num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
  auto den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
  return (num / den).flatten(1).mean(1);
}

double ssim(const torch::Tensor& x, const torch::Tensor& x_hat, const SsimOptions& opts) {
  return ssim_per_image(x, x_hat, opts).mean().item<double>();
}

double accuracy(const std::vector<std::int64_t>& labels, const std::vector<std::int64_t>& preds) {
  if (labels.empty()) throw DegenerateInputError("accuracy: empty label set");
  if (labels.size() != preds.size()) throw ShapeError("accuracy: label/prediction count mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == preds[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double f1_macro(const std::vector<std::int64_t>& labels, const std::vector<std::int64_t>& preds) {
  if (labels.empty()) throw DegenerateInputError("f1: empty label set");
  if (labels.size() != preds.size()) throw ShapeError("f1: label/prediction count mismatch");
  std::map<std::int64_t, std::array<std::int64_t, 3>> counts;  // tp, fp, fn
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == preds[i]) {
      counts[labels[i]][0] += 1;
    } else {
      counts[preds[i]][1] += 1;
      counts[labels[i]][2] += 1;
    }
  }
  double sum = 0.0;
  for (const auto& [cls, c] : counts) {
    sum += 2.0 * c[0] / static_cast<double>(2 * c[0] + c[1] + c[2]);
  }
  return sum / static_cast<double>(counts.size());
}

std::vector<std::int64_t> to_vector(const torch::Tensor& labels) {
  auto t = labels.to(torch::kLong).contiguous().flatten();
  return {t.data_ptr<std::int64_t>(), t.data_ptr<std::int64_t>() + t.numel()};
}

std::string csv_header() {
  std::string out;
  for (std::size_t i = 0; i < kColumnCount; ++i) {
    if (i) out += ',';
    out += kColumns[i];
  }
  return out;
}

std::string to_csv_row(const MetricsRecord& r) {
  std::string out;
  for (double v : {r.psnr, r.ssim, r.accuracy, r.f1_macro, r.loss_recon, r.loss_cls,
                   r.lambda_recon, r.snr_db}) {
    out += fmt_double(v);
    out += ',';
  }
  out += std::to_string(r.epoch);
  out += ',';
  out += r.channel;
  return out;
}

void write_csv(std::ostream& os, const std::vector<MetricsRecord>& rows) {
  os << csv_header() << '\n';
  for (const auto& r : rows) os << to_csv_row(r) << '\n';
}

void write_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  write_csv(os, rows);
}

void append_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw DataError("cannot write " + path.string());
  if (fresh) os << csv_header() << '\n';
  for (const auto& r : rows) os << to_csv_row(r) << '\n';
}

std::vector<MetricsRecord> read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": empty file, no header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header()) throw FormatError(path.string() + ": unexpected header '" + line + "'");
  std::vector<MetricsRecord> rows;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != kColumnCount) {
      throw FormatError(path.string() + ": line " + std::to_string(n) + " has " +
                        std::to_string(cells.size()) + " fields");
    }
    MetricsRecord r;
    r.psnr = parse_double(cells[0], n);
    r.ssim = parse_double(cells[1], n);
    r.accuracy = parse_double(cells[2], n);
    r.f1_macro = parse_double(cells[3], n);
    r.loss_recon = parse_double(cells[4], n);
    r.loss_cls = parse_double(cells[5], n);
    r.lambda_recon = parse_double(cells[6], n);
    r.snr_db = parse_double(cells[7], n);
    r.epoch = static_cast<std::int64_t>(parse_double(cells[8], n));
    r.channel = cells[9];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace toast::heads
