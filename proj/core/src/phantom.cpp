#include "medvit/phantom.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "medvit/error.hpp"
#include "medvit/rng.hpp"

namespace medvit {

namespace {

template <typename T>
void check_range(const Range<T>& r, const char* name, T min_allowed) {
  if (r.lo > r.hi) throw ConfigError(std::string("phantom ") + name + ": lo > hi");
  if (r.lo < min_allowed) throw ConfigError(std::string("phantom ") + name + ": below minimum");
}

template <typename T>
T draw(Rng& rng, const Range<T>& r) {
  if constexpr (std::is_integral_v<T>) {
    return static_cast<T>(rng.between(r.lo, r.hi));
  } else {
    return rng.uniform(r.lo, r.hi);
  }
}

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> semi{};

  double radius2(double x, double y, double z) const {
    const double dx = (x - center[0]) / semi[0];
    const double dy = (y - center[1]) / semi[1];
    const double dz = (z - center[2]) / semi[2];
    return dx * dx + dy * dy + dz * dz;
  }
};

struct Blob {
  std::array<double, 3> center{};
  double radius = 1.0;
  double intensity = 1.0;
};

// Per-channel contrast of (edema, enhancing, necrotic) so multi-modal phantoms differ by channel.
constexpr std::array<std::array<double, 3>, 4> kBlobContrast{{
    {0.70, 1.00, 0.20},
    {0.55, 1.00, 0.15},
    {0.90, 0.70, 0.35},
    {1.00, 0.80, 0.30},
}};

template <typename T>
nlohmann::json range_json(const Range<T>& r) {
  return nlohmann::json::array({r.lo, r.hi});
}

template <typename T>
void read_range(const nlohmann::json& j, const char* key, Range<T>& r) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<T>>();
  if (v.size() != 2) throw ConfigError(std::string("phantom ") + key + " must be a [lo, hi] pair");
  r = {v[0], v[1]};
}

}  // namespace

void PhantomSpec::validate() const {
  for (auto g : grid) {
    if (g < 4) throw ConfigError("phantom grid extents must be >= 4");
  }
  if (channels < 1 || channels > 4) throw ConfigError("phantom channels must be in [1, 4]");
  check_range(shell_count, "shell_count", std::int64_t{0});
  check_range(shell_size, "shell_size", 0.0);
  if (shell_size.hi > 1.0) throw ConfigError("phantom shell_size must be <= 1");
  check_range(blob_count, "blob_count", std::int64_t{0});
  check_range(blob_radius, "blob_radius", 0.0);
  if (blob_radius.hi <= 0.0 && blob_count.hi > 0) throw ConfigError("phantom blob_radius must be positive");
  check_range(blob_intensity, "blob_intensity", 0.0);
  check_range(age, "age", 0.0);
  if (num_classes < 1) throw ConfigError("phantom num_classes must be >= 1");
  if (class_deformation < 0.0 || base_ventricle <= 0.0) throw ConfigError("phantom ventricle parameters invalid");
  if (base_ventricle + class_deformation * static_cast<double>(num_classes - 1) >= 0.8) {
    throw ConfigError("phantom ventricle would exceed the head");
  }
  if (noise_std < 0.0) throw ConfigError("phantom noise_std must be >= 0");
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{
      {"grid", s.grid},
      {"channels", s.channels},
      {"shell_count", range_json(s.shell_count)},
      {"shell_size", range_json(s.shell_size)},
      {"blob_count", range_json(s.blob_count)},
      {"blob_radius", range_json(s.blob_radius)},
      {"blob_intensity", range_json(s.blob_intensity)},
      {"age", range_json(s.age)},
      {"age_gradient", s.age_gradient},
      {"num_classes", s.num_classes},
      {"class_deformation", s.class_deformation},
      {"base_ventricle", s.base_ventricle},
      {"noise_std", s.noise_std},
      {"seed", s.seed},
  };
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  try {
    if (j.contains("grid")) {
      const auto g = j.at("grid").get<std::vector<std::int64_t>>();
      if (g.size() != 3) throw ConfigError("phantom grid must have three entries");
      s.grid = {g[0], g[1], g[2]};
    }
    s.channels = j.value("channels", s.channels);
    read_range(j, "shell_count", s.shell_count);
    read_range(j, "shell_size", s.shell_size);
    read_range(j, "blob_count", s.blob_count);
    read_range(j, "blob_radius", s.blob_radius);
    read_range(j, "blob_intensity", s.blob_intensity);
    read_range(j, "age", s.age);
    s.age_gradient = j.value("age_gradient", s.age_gradient);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.class_deformation = j.value("class_deformation", s.class_deformation);
    s.base_ventricle = j.value("base_ventricle", s.base_ventricle);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("phantom spec: ") + e.what());
  }
}

PhantomGenerator::PhantomGenerator(PhantomSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

PhantomSample PhantomGenerator::generate(std::uint64_t index) const {
  const auto& s = spec_;
  Rng rng(stream_seed(s.seed, index, 0x9f1a));
  const auto [nw, nd, nh] = s.grid;

  PhantomSample out;
  out.class_label = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.num_classes)));
  out.age = rng.uniform(s.age.lo, s.age.hi);

  Ellipsoid head;
  const std::array<std::int64_t, 3> dims{nw, nd, nh};
  for (std::size_t a = 0; a < 3; ++a) {
    const double ext = static_cast<double>(dims[a]);
    head.center[a] = 0.5 * (ext - 1.0) + rng.uniform(-0.04, 0.04) * ext;
    head.semi[a] = rng.uniform(0.38, 0.45) * ext;
  }

  const auto shells = draw(rng, s.shell_count);
  std::vector<double> fractions;
  for (std::int64_t i = 0; i < shells; ++i) fractions.push_back(draw(rng, s.shell_size));
  std::sort(fractions.begin(), fractions.end(), std::greater<>());
  std::vector<std::pair<Ellipsoid, double>> shell_list;
  for (double f : fractions) {
    Ellipsoid e;
    for (std::size_t a = 0; a < 3; ++a) {
      e.center[a] = head.center[a] + rng.uniform(-0.03, 0.03) * static_cast<double>(dims[a]);
      e.semi[a] = std::max(1.0, f * head.semi[a] * rng.uniform(0.92, 1.08));
    }
    shell_list.emplace_back(e, rng.uniform(0.45, 0.85));
  }

  Ellipsoid ventricle;
  const double vfrac = std::max(0.02, s.base_ventricle + s.class_deformation * static_cast<double>(out.class_label) +
                                          0.01 * rng.normal());
  out.ventricle_fraction = vfrac;
  for (std::size_t a = 0; a < 3; ++a) {
    ventricle.center[a] = head.center[a];
    // Class regimes also differ in elongation along the coronal axis.
    const double stretch = a == 1 ? 1.0 + 0.25 * static_cast<double>(out.class_label) : 1.0;
    ventricle.semi[a] = std::max(0.75, vfrac * stretch * head.semi[a]);
  }

  const auto blobs_n = draw(rng, s.blob_count);
  std::vector<Blob> blobs;
  const double min_extent = static_cast<double>(std::min({nw, nd, nh}));
  for (std::int64_t i = 0; i < blobs_n; ++i) {
    Blob b;
    for (std::size_t a = 0; a < 3; ++a) b.center[a] = head.center[a] + rng.uniform(-0.45, 0.45) * head.semi[a];
    b.radius = std::max(1.0, draw(rng, s.blob_radius) * min_extent);
    b.intensity = draw(rng, s.blob_intensity);
    blobs.push_back(b);
  }

  const double age_mid = 0.5 * (s.age.lo + s.age.hi);
  const double slope = s.age_gradient * (out.age - age_mid);

  auto volume = torch::zeros({s.channels, nw, nd, nh}, torch::kFloat32);
  auto labels = torch::zeros({nw, nd, nh}, torch::kInt64);
  auto* vox = volume.data_ptr<float>();
  auto* lab = labels.data_ptr<std::int64_t>();
  const std::int64_t plane = nw * nd * nh;

  for (std::int64_t i = 0; i < nw; ++i) {
    for (std::int64_t j = 0; j < nd; ++j) {
      for (std::int64_t k = 0; k < nh; ++k) {
        const double x = static_cast<double>(i), y = static_cast<double>(j), z = static_cast<double>(k);
        const std::int64_t at = (i * nd + j) * nh + k;
        double base = 0.0;
        if (head.radius2(x, y, z) <= 1.0) {
          base = 0.3;
          for (const auto& [e, value] : shell_list) {
            if (e.radius2(x, y, z) <= 1.0) base = value;
          }
          if (ventricle.radius2(x, y, z) <= 1.0) base = 0.08;
          const double axial = nh > 1 ? 2.0 * z / static_cast<double>(nh - 1) - 1.0 : 0.0;
          base *= 1.0 + slope * axial;
        }

        std::int64_t label = 0;
        double blob_value = 0.0;
        for (const auto& b : blobs) {
          const double dx = x - b.center[0], dy = y - b.center[1], dz = z - b.center[2];
          const double r = std::sqrt(dx * dx + dy * dy + dz * dz) / b.radius;
          if (r > 1.0) continue;
          std::int64_t here = r <= 0.35 ? 1 : (r <= 0.65 ? 4 : 2);
          // Nested blobs: keep the most "core" label (1 > 4 > 2 in severity order).
          auto rank = [](std::int64_t l) { return l == 1 ? 3 : (l == 4 ? 2 : (l == 2 ? 1 : 0)); };
          if (rank(here) > rank(label)) {
            label = here;
            blob_value = b.intensity;
          }
        }
        lab[at] = label;

        for (std::int64_t c = 0; c < s.channels; ++c) {
          double v = base;
          if (label != 0) {
            const auto& contrast = kBlobContrast[static_cast<std::size_t>(c)];
            const double w = label == 2 ? contrast[0] : (label == 4 ? contrast[1] : contrast[2]);
            v = blob_value * w;
          } else if (c > 0) {
            v = base * (1.0 - 0.15 * static_cast<double>(c));
          }
          if (s.noise_std > 0.0) v += s.noise_std * rng.normal();
          vox[c * plane + at] = static_cast<float>(v);
        }
      }
    }
  }

  out.volume = Volume(volume);
  out.labels = LabelVolume(labels);
  return out;
}

}  // namespace medvit
