#pragma once

// Curves and a summary table from metrics CSV files. Each CSV holds one
// configuration, named after the file stem.

#include <filesystem>
#include <string>
#include <vector>

#include "toast/heads.hpp"

namespace toast::report {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string svg_line_chart(const ChartSpec& chart);

struct SummaryRow {
  std::string config;
  std::string channel;
  std::size_t points = 0;
  double psnr = 0.0;  // means over the SNR grid
  double ssim = 0.0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double psnr_low = 0.0;  // at the lowest and highest SNR
  double psnr_high = 0.0;
};

struct ReportResult {
  std::vector<std::filesystem::path> files;
  std::vector<SummaryRow> summary;
  std::string table;
};

/// Keeps the latest epoch per (channel, SNR) and sorts by channel then SNR.
std::vector<heads::MetricsRecord> latest_rows(const std::vector<heads::MetricsRecord>& rows);

/// Writes <metric>_vs_snr_<channel>.svg for psnr, ssim and accuracy, an
/// optional weight_trajectory.svg from training logs, and summary.md.
/// Throws DataError ("no data") for an empty CSV.
ReportResult make_report(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& out_dir,
                         const std::vector<std::filesystem::path>& train_logs = {});

}  // namespace toast::report
