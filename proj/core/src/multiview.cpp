#include "medvit/multiview.hpp"

#include <torch/torch.h>

#include "medvit/error.hpp"

namespace medvit {

namespace {

// Permutation taking (C, W, D, H) to (N, C, a, b) for each plane.
constexpr std::array<std::array<std::int64_t, 4>, 3> kToSlices{{
    {1, 0, 2, 3},
    {2, 0, 1, 3},
    {3, 0, 1, 2},
}};
// Inverse permutations, (N, C, a, b) back to (C, W, D, H).
constexpr std::array<std::array<std::int64_t, 4>, 3> kFromSlices{{
    {1, 0, 2, 3},
    {1, 2, 0, 3},
    {1, 2, 3, 0},
}};

}  // namespace

std::string_view plane_name(PlaneId p) {
  switch (p) {
    case PlaneId::sagittal: return "sagittal";
    case PlaneId::coronal: return "coronal";
    case PlaneId::axial: return "axial";
  }
  return "unknown";
}

PlaneId plane_from_name(std::string_view name) {
  for (auto p : kPlanes) {
    if (plane_name(p) == name) return p;
  }
  throw ConfigError("unknown plane '" + std::string(name) + "'");
}

torch::Tensor slices_of(const torch::Tensor& volume, PlaneId plane) {
  if (volume.dim() != 4) throw ShapeError("slices_of expects a (C,W,D,H) tensor");
  return volume.permute(kToSlices[static_cast<std::size_t>(plane_index(plane))]).contiguous();
}

torch::Tensor stack_slices(const torch::Tensor& slices, PlaneId plane) {
  if (slices.dim() != 4) throw ShapeError("stack_slices expects an (N,C,a,b) tensor");
  return slices.permute(kFromSlices[static_cast<std::size_t>(plane_index(plane))]).contiguous();
}

PlaneSliceSet decompose_plane(const Volume& volume, PlaneId plane) {
  return PlaneSliceSet{plane, slices_of(volume.data, plane)};
}

std::array<PlaneSliceSet, 3> decompose(const Volume& volume) {
  return {decompose_plane(volume, PlaneId::sagittal), decompose_plane(volume, PlaneId::coronal),
          decompose_plane(volume, PlaneId::axial)};
}

Volume recompose(const PlaneSliceSet& slice_set) {
  if (!slice_set.slices.defined() || slice_set.slices.dim() != 4 || slice_set.slices.size(0) < 1) {
    throw ShapeError("recompose needs a non-empty (N,C,a,b) slice tensor");
  }
  return Volume(stack_slices(slice_set.slices, slice_set.plane));
}

FeatureVolume broadcast_encodings(const torch::Tensor& encodings, PlaneId plane,
                                  const std::array<std::int64_t, 3>& target_shape) {
  if (encodings.dim() != 2) throw ShapeError("encodings must be (N, d_emb)");
  const auto axis = static_cast<std::size_t>(plane_axis(plane));
  if (encodings.size(0) != target_shape[axis]) {
    throw ShapeError("encoding sequence length " + std::to_string(encodings.size(0)) +
                     " differs from the target extent " + std::to_string(target_shape[axis]) + " along the " +
                     std::string(plane_name(plane)) + " axis");
  }
  const auto d = encodings.size(1);
  std::vector<std::int64_t> view{d, 1, 1, 1};
  view[axis + 1] = encodings.size(0);
  auto data = encodings.t().reshape(view).expand({d, target_shape[0], target_shape[1], target_shape[2]});
  return FeatureVolume{data, std::string(plane_name(plane))};
}

FeatureVolume fuse_planes(const std::array<FeatureVolume, 3>& planes, const std::vector<FeatureVolume>& scale_maps) {
  std::vector<torch::Tensor> parts;
  std::string provenance;
  auto spatial = planes[0].data.sizes().slice(1).vec();
  auto add = [&](const FeatureVolume& f) {
    if (f.data.dim() != 4 || f.data.sizes().slice(1).vec() != spatial) {
      throw ShapeError("fuse_planes: spatial shape mismatch for '" + f.provenance + "'");
    }
    parts.push_back(f.data);
    if (!provenance.empty()) provenance += "+";
    provenance += f.provenance;
  };
  for (const auto& p : planes) add(p);
  for (const auto& m : scale_maps) add(m);
  return FeatureVolume{torch::cat(parts, 0), provenance};
}

}  // namespace medvit
