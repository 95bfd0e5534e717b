#pragma once

#include <array>
#include <cstdint>

#include <nlohmann/json_fwd.hpp>

#include "medvit/volume.hpp"

namespace medvit {

template <typename T>
struct Range {
  T lo{};
  T hi{};
};

// Parameters of the synthetic "brain" generator used for desk-scale experiments.
//
// Each sample is a smooth ellipsoidal head with nested anatomy shells, a dark central
// "ventricle" ellipsoid whose size depends on the disease class, an axial intensity
// gradient proportional to the sampled age, optional tumour blobs with BraTS-style
// nested labels and additive Gaussian noise.
struct PhantomSpec {
  std::array<std::int64_t, 3> grid{48, 48, 48};
  std::int64_t channels = 1;

  Range<std::int64_t> shell_count{2, 4};
  // Shell semi-axes as a fraction of the head semi-axes.
  Range<double> shell_size{0.35, 0.9};

  Range<std::int64_t> blob_count{0, 0};
  // Blob radius as a fraction of the smallest grid extent.
  Range<double> blob_radius{0.08, 0.16};
  Range<double> blob_intensity{0.75, 1.0};

  Range<double> age{20.0, 90.0};
  // Relative axial brightness slope per year away from the age midpoint.
  double age_gradient = 0.006;

  std::int64_t num_classes = 3;
  // Ventricle semi-axis fraction grows by this amount per class index.
  double class_deformation = 0.07;
  double base_ventricle = 0.12;

  double noise_std = 0.02;
  std::uint64_t seed = 0;

  // Throws ConfigError on degenerate or inverted ranges.
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& spec);
void from_json(const nlohmann::json& j, PhantomSpec& spec);

struct PhantomSample {
  Volume volume;
  LabelVolume labels;
  std::int64_t class_label = 0;
  double age = 0.0;
  // Ventricle semi-axis fraction actually used; exposed for generator statistics.
  double ventricle_fraction = 0.0;
};

// Deterministic generator; sample `index` depends only on (spec, spec.seed, index).
// Not thread-safe to share; create one per worker.
class PhantomGenerator {
 public:
  explicit PhantomGenerator(PhantomSpec spec);

  PhantomSample generate(std::uint64_t index) const;
  const PhantomSpec& spec() const { return spec_; }

 private:
  PhantomSpec spec_;
};

inline PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t index = 0) {
  return PhantomGenerator(spec).generate(index);
}

}  // namespace medvit
