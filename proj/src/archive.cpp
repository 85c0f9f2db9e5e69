#include "toast/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "toast/errors.hpp"

namespace toast {

namespace {

constexpr std::size_t kMagicSize = 8;

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw FormatError("archive: unsupported tensor dtype");
  }
}

torch::Dtype parse_dtype(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  if (name == "i32") return torch::kInt32;
  if (name == "u8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw FormatError("archive: unknown dtype '" + name + "'");
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("archive: truncated file");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::string padded_magic(std::string_view magic) {
  std::string m(magic.substr(0, kMagicSize));
  m.resize(kMagicSize, '\0');
  return m;
}

}  // namespace

const torch::Tensor& TensorArchive::get(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("archive: missing tensor '" + std::string(name) + "'");
}

bool TensorArchive::contains(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  auto h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fingerprint(const std::vector<std::pair<std::string, torch::Tensor>>& named) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, tensor] : named) {
    h = fnv1a(name.data(), name.size(), h);
    auto t = tensor.detach().contiguous().cpu();
    for (auto s : t.sizes()) h = fnv1a(&s, sizeof(s), h);
    h = fnv1a(t.data_ptr(), t.numel() * t.element_size(), h);
  }
  return h;
}

void write_archive(const std::filesystem::path& path, std::string_view magic,
                   std::uint32_t version, const TensorArchive& archive) {
  nlohmann::json table = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().contiguous().cpu();
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    table.push_back({{"name", name},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", payload.size()},
                     {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  nlohmann::json header = {{"meta", archive.meta}, {"tensors", table}};
  const std::string header_text = header.dump();

  std::string out = padded_magic(magic);
  put<std::uint32_t>(out, version);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += payload;
  put<std::uint64_t>(out, fnv1a(out.data(), out.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("failed writing '" + path.string() + "'");
}

TensorArchive read_archive(const std::filesystem::path& path, std::string_view magic,
                           std::uint32_t max_version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string in = ss.str();
  const auto where = " in '" + path.string() + "'";

  if (in.size() < kMagicSize + 4 + 8 + 8) throw FormatError("archive: file too short" + where);
  if (in.compare(0, kMagicSize, padded_magic(magic)) != 0) {
    throw FormatError("archive: bad magic" + where);
  }
  std::size_t pos = kMagicSize;
  const auto version = take<std::uint32_t>(in, pos);
  if (version == 0 || version > max_version) {
    throw FormatError("archive: unsupported version " + std::to_string(version) + where);
  }
  const auto header_len = take<std::uint64_t>(in, pos);
  if (header_len > in.size() - pos - 8) throw FormatError("archive: truncated header" + where);

  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, in.data() + in.size() - 8, 8);
  if (stored_sum != fnv1a(in.data(), in.size() - 8)) {
    throw FormatError("archive: checksum mismatch (corrupt file)" + where);
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: header is not valid JSON: ") + e.what() + where);
  }
  pos += header_len;
  const std::size_t payload_begin = pos;
  const std::size_t payload_size = in.size() - 8 - payload_begin;

  TensorArchive archive;
  try {
    archive.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = parse_dtype(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (offset + nbytes > payload_size) {
        throw FormatError("archive: tensor '" + name + "' runs past the payload" + where);
      }
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (static_cast<std::uint64_t>(t.numel()) * t.element_size() != nbytes) {
        throw FormatError("archive: tensor '" + name + "' size does not match its shape" + where);
      }
      std::memcpy(t.data_ptr(), in.data() + payload_begin + offset, nbytes);
      archive.tensors.emplace_back(name, t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive: malformed tensor table: ") + e.what() + where);
  }
  archive.meta["_version"] = version;
  return archive;
}

}  // namespace toast
