#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/types.h>

#include "medvit/volume.hpp"

namespace medvit {

// Viewing planes. Integer codes are stable: they index segment embeddings and fix the
// channel order of fused feature volumes.
enum class PlaneId : int { sagittal = 0, coronal = 1, axial = 2 };

inline constexpr std::array<PlaneId, 3> kPlanes{PlaneId::sagittal, PlaneId::coronal, PlaneId::axial};

inline constexpr int plane_index(PlaneId p) { return static_cast<int>(p); }
// Spatial axis of a (W, D, H) volume that the plane slices along.
inline constexpr int plane_axis(PlaneId p) { return static_cast<int>(p); }
std::string_view plane_name(PlaneId p);
PlaneId plane_from_name(std::string_view name);

// Ordered 2D slices of one plane. `slices` has shape (N, C, a, b): sagittal slices are
// (D, H), coronal (W, H) and axial (W, D).
struct PlaneSliceSet {
  PlaneId plane = PlaneId::sagittal;
  torch::Tensor slices;

  std::int64_t count() const { return slices.size(0); }
};

// Channel-first 3D feature map (F, W, D, H).
struct FeatureVolume {
  torch::Tensor data;
  std::string provenance;

  std::int64_t channels() const { return data.size(0); }
};

// Tensor-level primitives; differentiable and usable on any (C, W, D, H) tensor.
torch::Tensor slices_of(const torch::Tensor& volume, PlaneId plane);
torch::Tensor stack_slices(const torch::Tensor& slices, PlaneId plane);

PlaneSliceSet decompose_plane(const Volume& volume, PlaneId plane);
std::array<PlaneSliceSet, 3> decompose(const Volume& volume);
Volume recompose(const PlaneSliceSet& slice_set);

// Replicates each slice's encoding vector over the slice's in-plane axes.
// `encodings` is (N, d_emb) with N equal to the target extent along the plane axis.
FeatureVolume broadcast_encodings(const torch::Tensor& encodings, PlaneId plane,
                                  const std::array<std::int64_t, 3>& target_shape);

// Concatenates per-plane maps in sagittal, coronal, axial order, then any extra scale
// maps in the order given (shallow to deep).
FeatureVolume fuse_planes(const std::array<FeatureVolume, 3>& planes,
                          const std::vector<FeatureVolume>& scale_maps = {});

}  // namespace medvit
