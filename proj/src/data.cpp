#include "toast/data.hpp"

#include <jpeglib.h>
#include <zlib.h>

#include <algorithm>
#include <csetjmp>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>

#include "toast/errors.hpp"
#include "toast/random.hpp"

namespace toast::data {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// gzread also passes uncompressed files through unchanged.
std::vector<std::uint8_t> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError(path.string() + ": gzip stream is corrupt");
  return out;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

std::uint32_t le32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

fs::path first_existing(const fs::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (fs::exists(dir / n)) return dir / n;
  }
  throw DataError("missing dataset file " + (dir / names.front()).string());
}

torch::Tensor u8_images(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        std::vector<std::int64_t> shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  if (bytes.size() < offset + static_cast<std::size_t>(n)) {
    throw FormatError("image payload truncated");
  }
  auto t = torch::from_blob(const_cast<std::uint8_t*>(bytes.data() + offset), {n}, torch::kUInt8);
  return t.clone().view(shape).to(torch::kFloat32).div_(255.0);
}

// --- MATLAB v5 ---------------------------------------------------------------

enum : std::uint32_t {
  miINT8 = 1, miUINT8 = 2, miINT16 = 3, miUINT16 = 4, miINT32 = 5, miUINT32 = 6,
  miSINGLE = 7, miDOUBLE = 9, miINT64 = 12, miUINT64 = 13, miMATRIX = 14,
  miCOMPRESSED = 15, miUTF8 = 16
};

struct Element {
  std::uint32_t type = 0;
  const std::uint8_t* data = nullptr;
  std::uint32_t bytes = 0;
  std::size_t next = 0;  // offset after this element, padded
};

Element read_element(const std::uint8_t* base, std::size_t size, std::size_t off, const std::string& file) {
  if (off + 8 > size) throw FormatError(file + ": truncated MAT element tag");
  Element e;
  const std::uint32_t first = le32(base + off);
  if ((first >> 16) != 0) {
    // small data element: 4-byte payload packed into the tag
    e.type = first & 0xffff;
    e.bytes = first >> 16;
    e.data = base + off + 4;
    e.next = off + 8;
    return e;
  }
  e.type = first;
  e.bytes = le32(base + off + 4);
  if (off + 8 + e.bytes > size) throw FormatError(file + ": truncated MAT element");
  e.data = base + off + 8;
  const std::size_t padded = e.type == miCOMPRESSED ? e.bytes : (e.bytes + 7) / 8 * 8;
  e.next = off + 8 + padded;
  return e;
}

std::vector<std::uint8_t> inflate_all(const std::uint8_t* data, std::size_t n, const std::string& file) {
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw FormatError(file + ": zlib init failed");
  zs.next_in = const_cast<Bytef*>(data);
  zs.avail_in = static_cast<uInt>(n);
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError(file + ": corrupt compressed MAT element");
    }
    out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw FormatError(file + ": truncated compressed MAT element");
    }
  }
  inflateEnd(&zs);
  return out;
}

torch::Tensor numeric_tensor(const Element& e, const std::string& file) {
  torch::Dtype dt;
  std::size_t width = 1;
  switch (e.type) {
    case miINT8: dt = torch::kInt8; width = 1; break;
    case miUINT8: dt = torch::kUInt8; width = 1; break;
    case miINT16: dt = torch::kInt16; width = 2; break;
    case miUINT16: dt = torch::kInt32; width = 2; break;
    case miINT32: dt = torch::kInt32; width = 4; break;
    case miUINT32: dt = torch::kInt64; width = 4; break;
    case miSINGLE: dt = torch::kFloat32; width = 4; break;
    case miDOUBLE: dt = torch::kFloat64; width = 8; break;
    case miINT64: dt = torch::kInt64; width = 8; break;
    case miUINT64: dt = torch::kInt64; width = 8; break;
    default: throw FormatError(file + ": unsupported MAT data type " + std::to_string(e.type));
  }
  const auto n = static_cast<std::int64_t>(e.bytes / width);
  if (e.type == miUINT16) {
    auto raw = torch::from_blob(const_cast<std::uint8_t*>(e.data), {n * 2}, torch::kUInt8).clone();
    auto lo = raw.slice(0, 0, n * 2, 2).to(torch::kInt32);
    auto hi = raw.slice(0, 1, n * 2, 2).to(torch::kInt32);
    return lo + hi * 256;
  }
  if (e.type == miUINT32) {
    auto raw = torch::from_blob(const_cast<std::uint8_t*>(e.data), {n}, torch::kInt32).clone();
    return raw.to(torch::kInt64).bitwise_and(0xffffffffLL);
  }
  return torch::from_blob(const_cast<std::uint8_t*>(e.data), {n}, dt).clone();
}

void parse_matrix(const std::uint8_t* base, std::size_t size, const std::string& file,
                  std::vector<MatArray>& out) {
  std::size_t off = 0;
  auto flags = read_element(base, size, off, file);
  off = flags.next;
  const std::uint32_t cls = le32(flags.data) & 0xff;
  const bool complex = (le32(flags.data) >> 11) & 1;
  auto dims_el = read_element(base, size, off, file);
  off = dims_el.next;
  auto name_el = read_element(base, size, off, file);
  off = name_el.next;
  MatArray arr;
  arr.name.assign(reinterpret_cast<const char*>(name_el.data), name_el.bytes);
  for (std::uint32_t i = 0; i + 4 <= dims_el.bytes; i += 4) {
    arr.dims.push_back(static_cast<std::int32_t>(le32(dims_el.data + i)));
  }
  // numeric classes 6..15; cells, structs, chars and sparse are skipped
  if (cls < 6 || cls > 15 || complex) return;
  auto re = read_element(base, size, off, file);
  arr.data = numeric_tensor(re, file);
  std::int64_t expected = 1;
  for (auto d : arr.dims) expected *= d;
  if (arr.data.numel() != expected) throw FormatError(file + ": MAT array '" + arr.name + "' size mismatch");
  out.push_back(std::move(arr));
}

void parse_elements(const std::uint8_t* base, std::size_t size, std::size_t off, const std::string& file,
                    std::vector<MatArray>& out) {
  while (off + 8 <= size) {
    auto e = read_element(base, size, off, file);
    if (e.type == miCOMPRESSED) {
      auto raw = inflate_all(e.data, e.bytes, file);
      parse_elements(raw.data(), raw.size(), 0, file, out);
    } else if (e.type == miMATRIX) {
      parse_matrix(e.data, e.bytes, file, out);
    }
    off = e.next;
  }
}

// --- JPEG --------------------------------------------------------------------

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Plain C frame: no objects with destructors live across setjmp.
bool decode_jpeg_rgb(const std::uint8_t* data, std::size_t size, std::uint8_t** pixels, int* w, int* h,
                     char* message) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  *pixels = nullptr;
  if (setjmp(err.jump)) {
    std::strncpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    std::free(*pixels);
    *pixels = nullptr;
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  *w = static_cast<int>(cinfo.output_width);
  *h = static_cast<int>(cinfo.output_height);
  const std::size_t stride = static_cast<std::size_t>(*w) * 3;
  *pixels = static_cast<std::uint8_t*>(std::malloc(stride * static_cast<std::size_t>(*h)));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = *pixels + stride * cinfo.output_scanline;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

torch::Tensor load_jpeg(const fs::path& path) {
  auto bytes = read_bytes(path);
  std::uint8_t* pixels = nullptr;
  int w = 0, h = 0;
  char message[JMSG_LENGTH_MAX] = {0};
  if (!decode_jpeg_rgb(bytes.data(), bytes.size(), &pixels, &w, &h, message)) {
    throw FormatError(path.string() + ": " + message);
  }
  auto t = torch::from_blob(pixels, {h, w, 3}, torch::kUInt8).clone();
  std::free(pixels);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0);
}

}  // namespace

Dataset Dataset::subset(const torch::Tensor& index) const {
  return {images.index_select(0, index), labels.index_select(0, index), classes};
}

void DatasetSpec::validate() const {
  if (name != "mnist" && name != "cifar10" && name != "svhn" && name != "intel") {
    throw ConfigError("unknown dataset '" + name + "' (expected mnist, cifar10, svhn or intel)");
  }
  if (resize < 0) throw ConfigError("resize must be >= 0");
  if (rotate_deg < 0.0 || rotate_deg > 180.0) throw ConfigError("rotate_deg must be in [0, 180]");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0, 1)");
  if (train_limit < 0 || test_limit < 0 || val_limit < 0) throw ConfigError("limits must be >= 0");
}

std::array<std::int64_t, 3> DatasetSpec::native_shape() const {
  if (name == "mnist") return {1, 28, 28};
  return {3, 32, 32};
}

std::array<std::int64_t, 3> DatasetSpec::image_shape() const {
  auto s = native_shape();
  if (resize > 0) {
    s[1] = resize;
    s[2] = resize;
  }
  return s;
}

std::int64_t DatasetSpec::classes() const { return name == "intel" ? 6 : 10; }

fs::path DatasetSpec::resolved_root() const {
  if (!root.empty()) return root;
  if (const char* env = std::getenv("TOAST_DATA_ROOT"); env && *env) return fs::path(env) / name;
  return fs::path("data") / name;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"name", s.name},
       {"root", s.root.string()},
       {"resize", s.resize},
       {"flip", s.flip},
       {"rotate_deg", s.rotate_deg},
       {"train_limit", s.train_limit},
       {"test_limit", s.test_limit},
       {"val_fraction", s.val_fraction},
       {"val_limit", s.val_limit},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.name = j.value("name", d.name);
  s.root = j.value("root", std::string());
  s.resize = j.value("resize", d.resize);
  s.flip = j.value("flip", d.flip);
  s.rotate_deg = j.value("rotate_deg", d.rotate_deg);
  s.train_limit = j.value("train_limit", d.train_limit);
  s.test_limit = j.value("test_limit", d.test_limit);
  s.val_fraction = j.value("val_fraction", d.val_fraction);
  s.val_limit = j.value("val_limit", d.val_limit);
  s.seed = j.value("seed", d.seed);
}

Dataset load_mnist(const fs::path& dir, const std::string& split) {
  const auto img_path = first_existing(dir, {split + "-images-idx3-ubyte.gz", split + "-images-idx3-ubyte",
                                             split + "-images.idx3-ubyte"});
  const auto lbl_path = first_existing(dir, {split + "-labels-idx1-ubyte.gz", split + "-labels-idx1-ubyte",
                                             split + "-labels.idx1-ubyte"});
  auto img = read_maybe_gz(img_path);
  auto lbl = read_maybe_gz(lbl_path);
  if (img.size() < 16 || be32(img.data()) != 0x00000803) {
    throw FormatError(img_path.string() + ": not an IDX3 image file");
  }
  if (lbl.size() < 8 || be32(lbl.data()) != 0x00000801) {
    throw FormatError(lbl_path.string() + ": not an IDX1 label file");
  }
  const std::int64_t n = be32(img.data() + 4), rows = be32(img.data() + 8), cols = be32(img.data() + 12);
  const std::int64_t nl = be32(lbl.data() + 4);
  if (n != nl) throw FormatError(img_path.string() + ": image and label counts differ");
  if (lbl.size() < 8 + static_cast<std::size_t>(nl)) throw FormatError(lbl_path.string() + ": truncated");
  if (img.size() < 16 + static_cast<std::size_t>(n * rows * cols)) {
    throw FormatError(img_path.string() + ": truncated");
  }
  Dataset d;
  d.images = u8_images(img, 16, {n, 1, rows, cols});
  d.labels = torch::from_blob(lbl.data() + 8, {nl}, torch::kUInt8).to(torch::kLong);
  d.classes = 10;
  return d;
}

Dataset load_cifar10(const fs::path& dir_in, bool train) {
  fs::path dir = dir_in;
  if (!fs::exists(dir / (train ? "data_batch_1.bin" : "test_batch.bin")) &&
      fs::exists(dir / "cifar-10-batches-bin")) {
    dir /= "cifar-10-batches-bin";
  }
  std::vector<fs::path> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  std::vector<torch::Tensor> images, labels;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw DataError("missing dataset file " + f.string());
    auto bytes = read_bytes(f);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw FormatError(f.string() + ": size is not a multiple of the 3073-byte record");
    }
    const auto n = static_cast<std::int64_t>(bytes.size() / kRecord);
    auto raw = torch::from_blob(bytes.data(), {n, static_cast<std::int64_t>(kRecord)}, torch::kUInt8).clone();
    labels.push_back(raw.select(1, 0).to(torch::kLong));
    images.push_back(raw.slice(1, 1).reshape({n, 3, 32, 32}).to(torch::kFloat32).div_(255.0));
  }
  Dataset d{torch::cat(images), torch::cat(labels), 10};
  if (d.labels.max().item<std::int64_t>() > 9) throw FormatError(dir.string() + ": CIFAR label out of range");
  return d;
}

std::vector<MatArray> read_mat_v5(const fs::path& file) {
  auto bytes = read_bytes(file);
  if (bytes.size() < 128) throw FormatError(file.string() + ": too short for a MAT v5 header");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[124] | (bytes[125] << 8));
  if (bytes[126] != 'I' || bytes[127] != 'M' || version != 0x0100) {
    throw FormatError(file.string() + ": not a little-endian MATLAB v5 file");
  }
  std::vector<MatArray> out;
  parse_elements(bytes.data(), bytes.size(), 128, file.string(), out);
  return out;
}

Dataset load_svhn(const fs::path& file) {
  if (!fs::exists(file)) throw DataError("missing dataset file " + file.string());
  auto arrays = read_mat_v5(file);
  const MatArray* x = nullptr;
  const MatArray* y = nullptr;
  for (const auto& a : arrays) {
    if (a.name == "X") x = &a;
    if (a.name == "y") y = &a;
  }
  if (!x || !y) throw FormatError(file.string() + ": expected variables X and y");
  if (x->dims.size() != 4 || x->dims[0] != 32 || x->dims[1] != 32 || x->dims[2] != 3) {
    throw FormatError(file.string() + ": X must be 32x32x3xN");
  }
  const auto n = x->dims[3];
  if (y->data.numel() != n) throw FormatError(file.string() + ": label count mismatch");
  // column-major [32(h), 32(w), 3, N] -> [N, 3, h, w]
  auto imgs = x->data.view({n, 3, 32, 32}).permute({0, 1, 3, 2}).contiguous();
  Dataset d;
  d.images = imgs.to(torch::kFloat32).div_(255.0);
  auto labels = y->data.to(torch::kLong);
  d.labels = torch::where(labels == 10, torch::zeros_like(labels), labels);
  d.classes = 10;
  if (d.labels.min().item<std::int64_t>() < 0 || d.labels.max().item<std::int64_t>() > 9) {
    throw FormatError(file.string() + ": SVHN label out of range");
  }
  return d;
}

const std::vector<std::string>& intel_classes() {
  static const std::vector<std::string> k{"buildings", "forest", "glacier", "mountain", "sea", "street"};
  return k;
}

Dataset load_intel(const fs::path& dir, std::int64_t side) {
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  for (std::size_t c = 0; c < intel_classes().size(); ++c) {
    const auto cdir = dir / intel_classes()[c];
    if (!fs::is_directory(cdir)) throw DataError("missing dataset directory " + cdir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cdir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      images.push_back(resize_images(load_jpeg(f).unsqueeze(0), side));
      labels.push_back(static_cast<std::int64_t>(c));
    }
  }
  if (images.empty()) throw DataError("no JPEG images under " + dir.string());
  return {torch::cat(images), torch::tensor(labels, torch::kLong), 6};
}

torch::Tensor resize_images(const torch::Tensor& images, std::int64_t side) {
  if (images.size(2) == side && images.size(3) == side) return images;
  auto out = F::interpolate(images, F::InterpolateFuncOptions()
                                        .size(std::vector<std::int64_t>{side, side})
                                        .mode(torch::kBilinear)
                                        .align_corners(false)
                                        .antialias(true));
  return out.clamp(0.0, 1.0);
}

torch::Tensor augment(const torch::Tensor& images, bool flip, double max_deg, torch::Generator& gen) {
  const auto b = images.size(0);
  auto out = images;
  if (flip) {
    auto mask = torch::rand({b}, gen) < 0.5;
    out = torch::where(mask.view({b, 1, 1, 1}), out.flip({3}), out);
  }
  if (max_deg > 0.0) {
    auto ang = (torch::rand({b}, gen, torch::kFloat32) * 2.0 - 1.0) * (max_deg * std::numbers::pi / 180.0);
    auto c = torch::cos(ang), s = torch::sin(ang);
    auto zero = torch::zeros_like(c);
    auto theta = torch::stack({torch::stack({c, -s, zero}, 1), torch::stack({s, c, zero}, 1)}, 1);
    auto grid = F::affine_grid(theta, out.sizes(), false);
    out = F::grid_sample(out, grid, F::GridSampleFuncOptions()
                                        .mode(torch::kBilinear)
                                        .padding_mode(torch::kBorder)
                                        .align_corners(false));
  }
  return out;
}

torch::Tensor stratified_sample(const torch::Tensor& labels, double fraction, torch::Generator& gen) {
  if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("sample fraction must be in (0, 1]");
  auto classes = std::get<0>(torch::_unique(labels, true));
  std::vector<torch::Tensor> picks;
  for (std::int64_t i = 0; i < classes.numel(); ++i) {
    auto idx = (labels == classes[i]).nonzero().flatten();
    const auto n = idx.numel();
    const auto k = std::max<std::int64_t>(1, std::llround(fraction * static_cast<double>(n)));
    auto perm = torch::randperm(n, gen, torch::kLong);
    picks.push_back(idx.index_select(0, perm.slice(0, 0, k)));
  }
  return torch::cat(picks);
}

Splits load_dataset(const DatasetSpec& spec) {
  spec.validate();
  const auto root = spec.resolved_root();
  Dataset train_pool, test;
  if (spec.name == "mnist") {
    train_pool = load_mnist(root, "train");
    test = load_mnist(root, "t10k");
  } else if (spec.name == "cifar10") {
    train_pool = load_cifar10(root, true);
    test = load_cifar10(root, false);
  } else if (spec.name == "svhn") {
    train_pool = load_svhn(root / "train_32x32.mat");
    test = load_svhn(root / "test_32x32.mat");
  } else {
    auto train_dir = fs::exists(root / "seg_train" / "seg_train") ? root / "seg_train" / "seg_train"
                                                                  : root / "seg_train";
    auto test_dir = fs::exists(root / "seg_test" / "seg_test") ? root / "seg_test" / "seg_test"
                                                               : root / "seg_test";
    const auto side = spec.resize > 0 ? spec.resize : 32;
    train_pool = load_intel(train_dir, side);
    test = load_intel(test_dir, side);
  }
  if (spec.resize > 0) {
    train_pool.images = resize_images(train_pool.images, spec.resize);
    test.images = resize_images(test.images, spec.resize);
  }

  auto gen = make_generator(spec.seed);
  const auto n = train_pool.size();
  auto perm = torch::randperm(n, gen, torch::kLong);
  auto val_count = static_cast<std::int64_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
  if (spec.val_limit > 0) val_count = std::min(val_count, spec.val_limit);
  Splits out;
  out.val = train_pool.subset(perm.slice(0, 0, val_count));
  auto rest = perm.slice(0, val_count);
  if (spec.train_limit > 0 && spec.train_limit < rest.numel()) rest = rest.slice(0, 0, spec.train_limit);
  out.train = train_pool.subset(rest);
  if (spec.test_limit > 0 && spec.test_limit < test.size()) {
    auto tperm = torch::randperm(test.size(), gen, torch::kLong).slice(0, 0, spec.test_limit);
    test = test.subset(std::get<0>(tperm.sort()));
  }
  out.test = test;
  out.train.classes = out.val.classes = out.test.classes = spec.classes();
  return out;
}

}  // namespace toast::data
