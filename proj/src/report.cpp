#include "toast/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "toast/errors.hpp"

namespace toast::report {

namespace fs = std::filesystem;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

/// Roughly five round tick values covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step) out.push_back(t);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

Series read_trajectory(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": no data");
  const auto header = split(line);
  const auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError(path.string() + ": missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto cs = col("step"), cl = col("lambda_recon");
  Series s{path.parent_path().filename().string(), {}, {}};
  if (s.name.empty()) s.name = path.stem().string();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw FormatError(path.string() + ": ragged row");
    s.x.push_back(std::stod(cells[cs]));
    s.y.push_back(std::stod(cells[cl]));
  }
  if (s.x.empty()) throw DataError(path.string() + ": no data");
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string svg_line_chart(const ChartSpec& chart) {
  constexpr double W = 640, H = 420, L = 70, R = 160, T = 40, B = 55;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
     << escape(chart.title) << "</text>\n";
  for (double t : ticks(x0, x1)) {
    os << "<line x1=\"" << px(t) << "\" y1=\"" << T << "\" x2=\"" << px(t) << "\" y2=\"" << (H - B)
       << "\" stroke=\"#e0e0e0\"/>\n";
    os << "<text x=\"" << px(t) << "\" y=\"" << (H - B + 16) << "\" text-anchor=\"middle\">" << fmt(t)
       << "</text>\n";
  }
  for (double t : ticks(y0, y1)) {
    os << "<line x1=\"" << L << "\" y1=\"" << py(t) << "\" x2=\"" << (W - R) << "\" y2=\"" << py(t)
       << "\" stroke=\"#e0e0e0\"/>\n";
    os << "<text x=\"" << (L - 6) << "\" y=\"" << (py(t) + 4) << "\" text-anchor=\"end\">" << fmt(t)
       << "</text>\n";
  }
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << (W - L - R) << "\" height=\"" << (H - T - B)
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << (H - 14) << "\" text-anchor=\"middle\">"
     << escape(chart.x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << (T + (H - T - B) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(chart.y_label) << "</text>\n";
  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& s = chart.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (std::isfinite(s.y[i])) os << px(s.x[i]) << "," << py(s.y[i]) << " ";
    }
    os << "\"/>\n";
    if (s.x.size() <= 50) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color
           << "\"/>\n";
      }
    }
    const double ly = T + 14 + 18 * static_cast<double>(k);
    os << "<line x1=\"" << (W - R + 12) << "\" y1=\"" << ly << "\" x2=\"" << (W - R + 32) << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << (W - R + 38) << "\" y=\"" << (ly + 4) << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<heads::MetricsRecord> latest_rows(const std::vector<heads::MetricsRecord>& rows) {
  std::map<std::pair<std::string, double>, heads::MetricsRecord> keep;
  for (const auto& r : rows) {
    auto key = std::make_pair(r.channel, r.snr_db);
    auto it = keep.find(key);
    if (it == keep.end() || r.epoch >= it->second.epoch) keep[key] = r;
  }
  std::vector<heads::MetricsRecord> out;
  for (auto& [k, r] : keep) out.push_back(r);
  return out;
}

ReportResult make_report(const std::vector<fs::path>& csvs, const fs::path& out_dir,
                         const std::vector<fs::path>& train_logs) {
  if (csvs.empty()) throw DataError("report: no data (no CSV files given)");
  std::vector<std::pair<std::string, std::vector<heads::MetricsRecord>>> configs;
  for (const auto& path : csvs) {
    if (!fs::exists(path)) throw DataError("report: cannot read " + path.string());
    if (fs::file_size(path) == 0) throw DataError("report: no data in " + path.string());
    auto rows = latest_rows(heads::read_csv(path));
    if (rows.empty()) throw DataError("report: no data in " + path.string());
    auto name = path.stem().string();
    for (const auto& [n, r] : configs) {
      if (n == name) name = path.parent_path().filename().string() + "/" + name;
    }
    configs.emplace_back(name, std::move(rows));
  }
  fs::create_directories(out_dir);
  ReportResult res;

  std::set<std::string> channels;
  for (const auto& [n, rows] : configs) {
    for (const auto& r : rows) channels.insert(r.channel);
  }
  struct Metric {
    const char* key;
    const char* label;
    double heads::MetricsRecord::*field;
  };
  const Metric metrics[] = {{"psnr", "PSNR (dB)", &heads::MetricsRecord::psnr},
                            {"ssim", "SSIM", &heads::MetricsRecord::ssim},
                            {"accuracy", "Accuracy", &heads::MetricsRecord::accuracy}};
  for (const auto& ch : channels) {
    for (const auto& m : metrics) {
      ChartSpec chart{std::string(m.label) + " vs SNR, " + ch, "SNR (dB)", m.label, {}};
      for (const auto& [name, rows] : configs) {
        Series s{name, {}, {}};
        for (const auto& r : rows) {
          if (r.channel != ch) continue;
          s.x.push_back(r.snr_db);
          s.y.push_back(r.*(m.field));
        }
        if (!s.x.empty()) chart.series.push_back(std::move(s));
      }
      const auto path = out_dir / (std::string(m.key) + "_vs_snr_" + ch + ".svg");
      write_file(path, svg_line_chart(chart));
      res.files.push_back(path);
    }
  }

  if (!train_logs.empty()) {
    ChartSpec chart{"Loss weight trajectory", "training step", "lambda_recon", {}};
    for (const auto& p : train_logs) chart.series.push_back(read_trajectory(p));
    const auto path = out_dir / "weight_trajectory.svg";
    write_file(path, svg_line_chart(chart));
    res.files.push_back(path);
  }

  for (const auto& [name, rows] : configs) {
    for (const auto& ch : channels) {
      SummaryRow row{name, ch};
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& r : rows) {
        if (r.channel != ch) continue;
        ++row.points;
        row.psnr += r.psnr;
        row.ssim += r.ssim;
        row.accuracy += r.accuracy;
        row.f1_macro += r.f1_macro;
        if (r.snr_db < lo) lo = r.snr_db, row.psnr_low = r.psnr;
        if (r.snr_db > hi) hi = r.snr_db, row.psnr_high = r.psnr;
      }
      if (row.points == 0) continue;
      const auto n = static_cast<double>(row.points);
      row.psnr /= n;
      row.ssim /= n;
      row.accuracy /= n;
      row.f1_macro /= n;
      res.summary.push_back(row);
    }
  }
  std::ostringstream t;
  t << "| config | channel | points | mean PSNR | mean SSIM | mean accuracy | mean macro-F1 | PSNR low SNR | "
       "PSNR high SNR |\n";
  t << "|---|---|---|---|---|---|---|---|---|\n";
  t << std::fixed;
  for (const auto& r : res.summary) {
    t << "| " << r.config << " | " << r.channel << " | " << r.points << " | " << std::setprecision(2) << r.psnr
      << " | " << std::setprecision(4) << r.ssim << " | " << r.accuracy << " | " << r.f1_macro << " | "
      << std::setprecision(2) << r.psnr_low << " | " << r.psnr_high << " |\n";
  }
  res.table = t.str();
  const auto path = out_dir / "summary.md";
  write_file(path, res.table);
  res.files.push_back(path);
  return res;
}

}  // namespace toast::report
