#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/types.h>

#include "medvit/checkpoint.hpp"
#include "medvit/dataset.hpp"
#include "medvit/model.hpp"
#include "medvit/rng.hpp"
#include "medvit/train_engine.hpp"
#include "medvit/volume.hpp"

namespace medvit {

// Cubic Bezier with P0 = (0,0), P1 = (a,b), P2 = (c,d), P3 = (1,1).
struct BezierCurveParams {
  double a = 1.0 / 3.0;
  double b = 1.0 / 3.0;
  double c = 2.0 / 3.0;
  double d = 2.0 / 3.0;

  // Requires 0 <= a <= c <= 1 and 0 <= b <= d <= 1 so that both coordinates are monotone in t.
  void validate() const;
  double x_at(double t) const;
  double y_at(double t) const;
};

// a, b, c, d ~ U[0, 1], then (a, c) and (b, d) sorted ascending.
BezierCurveParams sample_bezier(Rng& rng);

// The exact map x -> y(t*) with x(t*) = x, solved by bisection to |dt| < 1e-12.
double bezier_map_exact(const BezierCurveParams& params, double x);

// Piecewise-linear lookup over a uniform x grid of `kBezierLutSize` exact samples.
inline constexpr std::int64_t kBezierLutSize = 4097;

class BezierLut {
 public:
  explicit BezierLut(const BezierCurveParams& params);
  double operator()(double x) const;
  // Elementwise map of a tensor with values in [0, 1]; the dtype is preserved.
  torch::Tensor apply(const torch::Tensor& values) const;
  const std::vector<double>& table() const { return table_; }

 private:
  std::vector<double> table_;
  torch::Tensor table_tensor_;
};

// Applies the intensity map to every voxel; throws on intensities outside [0, 1].
Volume bezier_transform(const Volume& volume, const BezierCurveParams& params);

// Mean over rows of max(0, |a - p| - |a - n| + margin) with L2 distances. Inputs are
// (N, d); a 1-D input is treated as a single row.
torch::Tensor triplet_loss(const torch::Tensor& anchors, const torch::Tensor& positives,
                           const torch::Tensor& negatives, double margin);

// Mean squared error over the masked rows only (averaged over rows and features).
torch::Tensor masked_prediction_loss(const torch::Tensor& predicted, const torch::Tensor& target,
                                     const std::vector<bool>& masked);

struct MaskPlan {
  std::array<std::vector<std::int64_t>, 3> indices;  // sorted, per plane
  double ratio = 0.1;
  std::uint64_t seed = 0;

  const std::vector<std::int64_t>& of(PlaneId plane) const {
    return indices[static_cast<std::size_t>(plane_index(plane))];
  }
};

// floor(ratio * n); throws when that is zero or the ratio is outside (0, 1).
std::int64_t mask_count(std::int64_t n, double ratio);
std::vector<std::int64_t> mask_indices(std::int64_t n, double ratio, std::uint64_t seed);
// lengths: slice counts per plane (W, D, H).
MaskPlan make_mask_plan(const std::array<std::int64_t, 3>& lengths, double ratio, std::uint64_t seed);

enum class MaskTarget {
  // Frozen embedding plus positional and segment encodings.
  encoding,
  // Frozen embedding only.
  embedding,
};

struct SslConfig {
  double margin = 1.0;
  double mask_ratio = 0.1;
  MaskTarget target = MaskTarget::encoding;
  bool freeze_segments = false;
  // Draw new Bezier parameters every epoch (otherwise once per sample).
  bool augment_per_epoch = true;
  // Negatives are the previous batch's subjects. When set, they are re-embedded by the
  // current encoder; otherwise the anchors stored when that batch was trained are used.
  bool refresh_negatives = true;
  // Compute losses without updating anything.
  bool dry_run = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const SslConfig& c);
void from_json(const nlohmann::json& j, SslConfig& c);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> history;
  std::string encoder_hash_before;
  std::string encoder_hash_after;
};

// Exemplar stage: trains the three plane encoders with the triplet loss. Negatives come
// from the previous batch (the buffer is emptied at every epoch start); the first batch of
// an epoch uses the other samples of the same batch.
PretrainResult pretrain_encoder(const Dataset& data, const ModelConfig& model, const TrainConfig& train,
                                const SslConfig& ssl);

// Masked stage: loads and freezes the encoders from a stage-1 checkpoint and trains the
// transformer, mask token and segment vectors. Throws if the encoder bytes change.
PretrainResult pretrain_transformer(const Dataset& data, const Checkpoint& encoder_checkpoint,
                                    const ModelConfig& model, const TrainConfig& train, const SslConfig& ssl,
                                    bool force = false);

}  // namespace medvit
