#pragma once

// Dataset ingestion from the standard published file formats, deterministic
// splits and training-time augmentation. Images are float32 [N, C, H, W] in
// [0, 1]; labels are int64 [N].

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace toast::data {

struct Dataset {
  torch::Tensor images;
  torch::Tensor labels;
  std::int64_t classes = 10;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  Dataset subset(const torch::Tensor& index) const;
};

struct Splits {
  Dataset train, val, test;
};

struct DatasetSpec {
  std::string name = "mnist";  // mnist | cifar10 | svhn | intel
  std::filesystem::path root;  // empty: $TOAST_DATA_ROOT/<name>
  std::int64_t resize = 0;     // square side; 0 keeps the native size
  bool flip = false;
  double rotate_deg = 0.0;
  std::int64_t train_limit = 0;  // 0: all remaining training images
  std::int64_t test_limit = 0;
  double val_fraction = 0.1;
  std::int64_t val_limit = 0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Native geometry before resizing: {channels, height, width}.
  std::array<std::int64_t, 3> native_shape() const;
  std::array<std::int64_t, 3> image_shape() const;
  std::int64_t classes() const;
  /// Explicit root, else $TOAST_DATA_ROOT/<name>, else data/<name>.
  std::filesystem::path resolved_root() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Throws DataError naming the missing file, FormatError for corrupt ones.
Splits load_dataset(const DatasetSpec& spec);

/// train-images-idx3-ubyte[.gz] etc. in `dir`; `split` is "train" or "t10k".
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split);
/// data_batch_{1..5}.bin or test_batch.bin under `dir` (or cifar-10-batches-bin/).
Dataset load_cifar10(const std::filesystem::path& dir, bool train);
/// train_32x32.mat / test_32x32.mat (MATLAB v5, optionally compressed).
Dataset load_svhn(const std::filesystem::path& file);
/// <dir>/<class>/*.jpg for the six scene classes, resized to `side`.
Dataset load_intel(const std::filesystem::path& dir, std::int64_t side);

const std::vector<std::string>& intel_classes();

/// Bilinear resize with antialiasing to side x side.
torch::Tensor resize_images(const torch::Tensor& images, std::int64_t side);

/// Random horizontal flips (p = 0.5) and rotations uniform in +-max_deg.
torch::Tensor augment(const torch::Tensor& images, bool flip, double max_deg, torch::Generator& gen);

/// Indices of a class-stratified sample with round(fraction * n_c) (at least
/// one) images per class, ordered by class then by draw.
torch::Tensor stratified_sample(const torch::Tensor& labels, double fraction, torch::Generator& gen);

/// Parsed MATLAB v5 numeric array.
struct MatArray {
  std::string name;
  std::vector<std::int64_t> dims;  // MATLAB order (column-major)
  torch::Tensor data;              // flat, column-major element order
};

std::vector<MatArray> read_mat_v5(const std::filesystem::path& file);

}  // namespace toast::data
