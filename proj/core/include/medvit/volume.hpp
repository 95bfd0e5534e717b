#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/types.h>

namespace medvit {

// Dense image volume, float32 tensor of shape (C, W, D, H). W is the sagittal axis,
// D the coronal axis and H the axial axis; H varies fastest in memory.
struct Volume {
  torch::Tensor data;

  Volume() = default;
  explicit Volume(torch::Tensor tensor);

  std::int64_t channels() const { return data.size(0); }
  std::array<std::int64_t, 3> spatial_shape() const {
    return {data.size(1), data.size(2), data.size(3)};
  }
  std::vector<std::int64_t> shape() const { return data.sizes().vec(); }
};

// Integer label map of shape (W, D, H), int64 values.
struct LabelVolume {
  torch::Tensor labels;

  LabelVolume() = default;
  explicit LabelVolume(torch::Tensor tensor);

  std::array<std::int64_t, 3> spatial_shape() const {
    return {labels.size(0), labels.size(1), labels.size(2)};
  }
};

// BraTS-style label set: background, necrotic core, edema, enhancing tumour.
inline const std::vector<std::int64_t> kBratsLabels{0, 1, 2, 4};

// Throws if any label is not in `label_set` or the shape differs from `shape`.
void validate_labels(const LabelVolume& labels, const std::vector<std::int64_t>& label_set);

enum class VolumeFormat { raw_sidecar, nifti1 };

// Picks the format from the file extension (".nii" -> NIfTI-1, anything else raw).
VolumeFormat format_from_path(const std::filesystem::path& path);

// `path` names the raw payload (e.g. "s01.raw"); the sidecar lives next to it with a
// ".json" extension.
std::filesystem::path sidecar_path(const std::filesystem::path& raw_path);

Volume load_volume(const std::filesystem::path& path, VolumeFormat format);
inline Volume load_volume(const std::filesystem::path& path) {
  return load_volume(path, format_from_path(path));
}
void save_volume(const Volume& volume, const std::filesystem::path& path, VolumeFormat format);
inline void save_volume(const Volume& volume, const std::filesystem::path& path) {
  save_volume(volume, path, format_from_path(path));
}

// Label maps are stored as single-channel f32 volumes with integral values.
LabelVolume load_label_volume(const std::filesystem::path& path);
void save_label_volume(const LabelVolume& labels, const std::filesystem::path& path);

// Per-channel min-max normalisation to [0, 1]; constant channels become all-zero.
Volume normalize_intensity(const Volume& volume);

// Non-overlapping factor^3 mean pooling. Remainders along each axis are dropped.
Volume average_pool_resize(const Volume& volume, std::int64_t factor = 2);

// Spatially centred crop; the start offset on each axis is floor((src - tgt) / 2).
Volume center_crop(const Volume& volume, const std::array<std::int64_t, 3>& target);
LabelVolume center_crop(const LabelVolume& labels, const std::array<std::int64_t, 3>& target);
std::array<std::int64_t, 3> crop_offsets(const std::array<std::int64_t, 3>& source,
                                         const std::array<std::int64_t, 3>& target);

}  // namespace medvit
