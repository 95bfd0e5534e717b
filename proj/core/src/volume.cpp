#include "medvit/volume.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {
namespace fs = std::filesystem;

namespace {

std::string shape_string(c10::IntArrayRef sizes) {
  std::ostringstream os;
  os << sizes;
  return os.str();
}

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + ": non-finite values in volume");
  }
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> bytes(size);
  if (size > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(size))) {
    throw IoError("short read from " + path.string());
  }
  return bytes;
}

void write_file(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
T byteswap_value(T value) {
  std::array<unsigned char, sizeof(T)> raw;
  std::memcpy(raw.data(), &value, sizeof(T));
  std::reverse(raw.begin(), raw.end());
  std::memcpy(&value, raw.data(), sizeof(T));
  return value;
}

void swap_bytes_inplace(char* data, std::size_t count, std::size_t width) {
  for (std::size_t i = 0; i < count; ++i) std::reverse(data + i * width, data + (i + 1) * width);
}

// ---- raw + JSON sidecar ---------------------------------------------------------

Volume load_raw(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  if (!fs::exists(path)) throw IoError("missing volume file " + path.string());
  if (!fs::exists(side)) throw IoError("missing sidecar " + side.string());

  nlohmann::json meta;
  try {
    std::ifstream in(side);
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed sidecar " + side.string() + ": " + e.what());
  }
  const auto shape = meta.at("shape").get<std::vector<std::int64_t>>();
  const auto dtype = meta.value("dtype", std::string("f32"));
  const auto order = meta.value("byte_order", std::string("little"));
  if (shape.size() != 4) throw ShapeError("sidecar shape must have 4 entries (C,W,D,H)");
  for (auto s : shape) {
    if (s < 1) throw ShapeError("sidecar shape entries must be positive");
  }
  if (dtype != "f32") throw IoError("unsupported sidecar dtype '" + dtype + "'");
  if (order != "little" && order != "big") throw IoError("unsupported byte_order '" + order + "'");

  auto bytes = read_file(path);
  std::int64_t count = 1;
  for (auto s : shape) count *= s;
  if (bytes.size() != static_cast<std::size_t>(count) * sizeof(float)) {
    throw ShapeError("payload of " + path.string() + " holds " +
                     std::to_string(bytes.size() / sizeof(float)) + " values, sidecar declares " +
                     std::to_string(count));
  }
  const bool file_little = order == "little";
  if (file_little != (std::endian::native == std::endian::little)) {
    swap_bytes_inplace(bytes.data(), static_cast<std::size_t>(count), sizeof(float));
  }
  auto tensor = torch::empty(shape, torch::kFloat32);
  std::memcpy(tensor.data_ptr<float>(), bytes.data(), bytes.size());
  return Volume(tensor);
}

void save_raw(const Volume& volume, const fs::path& path) {
  auto data = volume.data.to(torch::kFloat32).contiguous();
  std::vector<char> bytes(static_cast<std::size_t>(data.numel()) * sizeof(float));
  std::memcpy(bytes.data(), data.data_ptr<float>(), bytes.size());
  if constexpr (std::endian::native != std::endian::little) {
    swap_bytes_inplace(bytes.data(), static_cast<std::size_t>(data.numel()), sizeof(float));
  }
  nlohmann::json meta = {{"shape", data.sizes().vec()}, {"dtype", "f32"}, {"byte_order", "little"}};
  write_file(path, bytes.data(), bytes.size());
  const auto text = meta.dump(2) + "\n";
  write_file(sidecar_path(path), text.data(), text.size());
}

// ---- NIfTI-1 ---------------------------------------------------------------------

#pragma pack(push, 1)
struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348);

enum NiftiType : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
};

void swap_header(NiftiHeader& h) {
  h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
  for (auto& d : h.dim) d = byteswap_value(d);
  h.datatype = byteswap_value(h.datatype);
  h.bitpix = byteswap_value(h.bitpix);
  h.vox_offset = byteswap_value(h.vox_offset);
  h.scl_slope = byteswap_value(h.scl_slope);
  h.scl_inter = byteswap_value(h.scl_inter);
  for (auto& p : h.pixdim) p = byteswap_value(p);
}

template <typename T>
torch::Tensor decode_voxels(const char* src, std::int64_t count, bool swap) {
  auto out = torch::empty({count}, torch::kFloat64);
  auto* dst = out.data_ptr<double>();
  for (std::int64_t i = 0; i < count; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap_value(v);
    dst[i] = static_cast<double>(v);
  }
  return out;
}

Volume load_nifti(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing volume file " + path.string());
  const auto bytes = read_file(path);
  if (bytes.size() < sizeof(NiftiHeader)) throw IoError("truncated NIfTI header in " + path.string());
  NiftiHeader h;
  std::memcpy(&h, bytes.data(), sizeof(h));
  bool swap = false;
  if (h.sizeof_hdr != 348) {
    if (byteswap_value(h.sizeof_hdr) != 348) throw IoError("not a NIfTI-1 file: " + path.string());
    swap = true;
    swap_header(h);
  }
  const int ndim = h.dim[0];
  if (ndim < 1 || ndim > 5) throw ShapeError("unsupported NIfTI dimensionality");
  std::array<std::int64_t, 4> extent{1, 1, 1, 1};  // x, y, z, t
  for (int i = 0; i < std::min(ndim, 4); ++i) extent[static_cast<std::size_t>(i)] = std::max<std::int16_t>(h.dim[i + 1], 1);
  if (ndim == 5) extent[3] *= std::max<std::int16_t>(h.dim[5], 1);
  const std::int64_t count = extent[0] * extent[1] * extent[2] * extent[3];

  std::size_t width = 0;
  switch (h.datatype) {
    case kUint8: case kInt8: width = 1; break;
    case kInt16: case kUint16: width = 2; break;
    case kInt32: case kFloat32: width = 4; break;
    case kFloat64: width = 8; break;
    default: throw IoError("unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  const auto offset = static_cast<std::size_t>(h.vox_offset < 348.f ? 352.f : h.vox_offset);
  if (bytes.size() < offset + static_cast<std::size_t>(count) * width) {
    throw ShapeError("NIfTI payload shorter than declared dimensions in " + path.string());
  }
  const char* src = bytes.data() + offset;

  torch::Tensor flat;
  if (h.datatype == kFloat32 && !swap && (h.scl_slope == 0.f || (h.scl_slope == 1.f && h.scl_inter == 0.f))) {
    flat = torch::empty({count}, torch::kFloat32);
    std::memcpy(flat.data_ptr<float>(), src, static_cast<std::size_t>(count) * sizeof(float));
  } else {
    switch (h.datatype) {
      case kUint8: flat = decode_voxels<std::uint8_t>(src, count, swap); break;
      case kInt8: flat = decode_voxels<std::int8_t>(src, count, swap); break;
      case kInt16: flat = decode_voxels<std::int16_t>(src, count, swap); break;
      case kUint16: flat = decode_voxels<std::uint16_t>(src, count, swap); break;
      case kInt32: flat = decode_voxels<std::int32_t>(src, count, swap); break;
      case kFloat32: flat = decode_voxels<float>(src, count, swap); break;
      case kFloat64: flat = decode_voxels<double>(src, count, swap); break;
    }
    if (h.scl_slope != 0.f) flat = flat * static_cast<double>(h.scl_slope) + static_cast<double>(h.scl_inter);
    flat = flat.to(torch::kFloat32);
  }
  // File order is x fastest: (t, z, y, x) row-major. Volume wants (C, W, D, H) = (t, x, y, z).
  auto tensor = flat.view({extent[3], extent[2], extent[1], extent[0]}).permute({0, 3, 2, 1}).contiguous();
  return Volume(tensor);
}

void save_nifti(const Volume& volume, const fs::path& path) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  const auto c = volume.channels();
  const auto [w, d, hh] = volume.spatial_shape();
  h.dim[0] = c > 1 ? 4 : 3;
  h.dim[1] = static_cast<std::int16_t>(w);
  h.dim[2] = static_cast<std::int16_t>(d);
  h.dim[3] = static_cast<std::int16_t>(hh);
  h.dim[4] = static_cast<std::int16_t>(c);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  if (w > 32767 || d > 32767 || hh > 32767 || c > 32767) throw ShapeError("volume too large for NIfTI-1");
  h.datatype = kFloat32;
  h.bitpix = 32;
  for (auto& p : h.pixdim) p = 1.f;
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.scl_inter = 0.f;
  std::memcpy(h.magic, "n+1\0", 4);

  auto file_order = volume.data.to(torch::kFloat32).permute({0, 3, 2, 1}).contiguous();
  std::vector<char> bytes(352 + static_cast<std::size_t>(file_order.numel()) * sizeof(float), 0);
  std::memcpy(bytes.data(), &h, sizeof(h));
  std::memcpy(bytes.data() + 352, file_order.data_ptr<float>(),
              static_cast<std::size_t>(file_order.numel()) * sizeof(float));
  write_file(path, bytes.data(), bytes.size());
}

std::array<std::int64_t, 3> spatial_of(const torch::Tensor& t, int first) {
  return {t.size(first), t.size(first + 1), t.size(first + 2)};
}

}  // namespace

Volume::Volume(torch::Tensor tensor) : data(std::move(tensor)) {
  if (data.dim() != 4) throw ShapeError("volume tensor must be 4-D (C,W,D,H), got " + shape_string(data.sizes()));
}

LabelVolume::LabelVolume(torch::Tensor tensor) : labels(std::move(tensor)) {
  if (labels.dim() != 3) throw ShapeError("label volume must be 3-D (W,D,H), got " + shape_string(labels.sizes()));
  labels = labels.to(torch::kInt64);
}

void validate_labels(const LabelVolume& labels, const std::vector<std::int64_t>& label_set) {
  auto allowed = torch::tensor(label_set, torch::kInt64);
  if (!torch::isin(labels.labels, allowed).all().item<bool>()) {
    throw ConfigError("label volume contains values outside the declared label set");
  }
}

VolumeFormat format_from_path(const fs::path& path) {
  return path.extension() == ".nii" ? VolumeFormat::nifti1 : VolumeFormat::raw_sidecar;
}

fs::path sidecar_path(const fs::path& raw_path) {
  auto p = raw_path;
  p.replace_extension(".json");
  return p;
}

Volume load_volume(const fs::path& path, VolumeFormat format) {
  return format == VolumeFormat::nifti1 ? load_nifti(path) : load_raw(path);
}

void save_volume(const Volume& volume, const fs::path& path, VolumeFormat format) {
  if (format == VolumeFormat::nifti1) {
    save_nifti(volume, path);
  } else {
    save_raw(volume, path);
  }
}

LabelVolume load_label_volume(const fs::path& path) {
  auto vol = load_volume(path);
  if (vol.channels() != 1) throw ShapeError("label volume must have a single channel");
  auto values = vol.data[0];
  if (!torch::equal(values, values.round())) throw IoError("label volume holds non-integral values");
  return LabelVolume(values.to(torch::kInt64));
}

void save_label_volume(const LabelVolume& labels, const fs::path& path) {
  save_volume(Volume(labels.labels.to(torch::kFloat32).unsqueeze(0)), path);
}

Volume normalize_intensity(const Volume& volume) {
  require_finite(volume.data, "normalize_intensity");
  const auto c = volume.channels();
  auto flat = volume.data.reshape({c, -1});
  auto lo = std::get<0>(flat.min(1, true));
  auto hi = std::get<0>(flat.max(1, true));
  auto range = hi - lo;
  auto constant = range == 0;
  auto scaled = (flat - lo) / torch::where(constant, torch::ones_like(range), range);
  scaled = torch::where(constant.expand_as(scaled), torch::zeros_like(scaled), scaled);
  // Rounding in the division can leave the maximum a hair below one; pin the extremes.
  scaled = torch::where(flat == hi, torch::ones_like(scaled), scaled);
  scaled = torch::where(constant.expand_as(scaled) | (flat == lo), torch::zeros_like(scaled), scaled);
  return Volume(scaled.reshape(volume.data.sizes()).contiguous());
}

Volume average_pool_resize(const Volume& volume, std::int64_t factor) {
  if (factor < 1) throw ConfigError("pooling factor must be >= 1");
  const auto s = volume.spatial_shape();
  for (auto e : s) {
    if (factor > e) throw ShapeError("pooling factor exceeds a volume dimension");
  }
  if (factor == 1) return Volume(volume.data.clone());
  namespace F = torch::nn::functional;
  auto pooled = F::avg_pool3d(volume.data.unsqueeze(0),
                              F::AvgPool3dFuncOptions(factor).stride(factor).ceil_mode(false));
  return Volume(pooled.squeeze(0).contiguous());
}

std::array<std::int64_t, 3> crop_offsets(const std::array<std::int64_t, 3>& source,
                                         const std::array<std::int64_t, 3>& target) {
  std::array<std::int64_t, 3> off{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (target[i] < 1 || target[i] > source[i]) {
      throw ShapeError("crop target exceeds source along axis " + std::to_string(i));
    }
    off[i] = (source[i] - target[i]) / 2;
  }
  return off;
}

Volume center_crop(const Volume& volume, const std::array<std::int64_t, 3>& target) {
  const auto off = crop_offsets(volume.spatial_shape(), target);
  using torch::indexing::Slice;
  auto out = volume.data.index({Slice(), Slice(off[0], off[0] + target[0]), Slice(off[1], off[1] + target[1]),
                                Slice(off[2], off[2] + target[2])});
  return Volume(out.contiguous());
}

LabelVolume center_crop(const LabelVolume& labels, const std::array<std::int64_t, 3>& target) {
  const auto off = crop_offsets(spatial_of(labels.labels, 0), target);
  using torch::indexing::Slice;
  auto out = labels.labels.index({Slice(off[0], off[0] + target[0]), Slice(off[1], off[1] + target[1]),
                                  Slice(off[2], off[2] + target[2])});
  return LabelVolume(out.contiguous());
}

}  // namespace medvit
