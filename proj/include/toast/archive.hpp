#pragma once

// Self-describing binary container used for checkpoints and adapter files.
//
//   magic[8] | u32 version | u64 header_len | header (JSON, UTF-8) | payload | u64 fnv1a
//
// The JSON header carries caller metadata under "meta" and a tensor table
// (name, dtype, shape, offset, nbytes) into the payload. All integers are
// little-endian; tensors are stored contiguous in their native dtype, so a
// write/read round trip is bit-exact.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace toast {

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  void add(std::string name, const torch::Tensor& t) { tensors.emplace_back(std::move(name), t); }
  /// Throws FormatError if missing.
  const torch::Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void write_archive(const std::filesystem::path& path, std::string_view magic,
                   std::uint32_t version, const TensorArchive& archive);

/// Throws FormatError on bad magic, unsupported version, truncation, checksum
/// mismatch or an unparsable header.
TensorArchive read_archive(const std::filesystem::path& path, std::string_view magic,
                           std::uint32_t max_version);

/// FNV-1a over raw bytes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Fingerprint of named tensors (names, shapes, dtypes and values).
std::uint64_t fingerprint(const std::vector<std::pair<std::string, torch::Tensor>>& named);

}  // namespace toast
