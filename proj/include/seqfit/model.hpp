#ifndef SEQFIT_MODEL_HPP
#define SEQFIT_MODEL_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqfit/autodiff.hpp"
#include "seqfit/geometry.hpp"

namespace seqfit {

struct ModelConfig {
  int n_in = 256;    // encoder input points per frame (after resampling)
  int n_out = 1024;  // points produced by the shape head
  int enc1_hidden = 64;
  int enc1_out = 128;
  int enc2_hidden = 256;
  int feat_dim = 512;
  int hidden_dim = 512;  // recurrent state width
  int shape_hidden1 = 512;
  int shape_hidden2 = 1024;
  int pose_hidden1 = 256;
  int pose_hidden2 = 64;

  bool operator==(const ModelConfig&) const = default;
};

// Applies json fields over defaults. Rejects unknown keys and non-positive
// dimensions with ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);

inline constexpr int kNumParams = 31;

// Parameter tensors in the canonical (checkpoint) order.
struct ModelWeights {
  ModelConfig cfg;
  std::vector<ad::Tensor> params;

  static const std::array<const char*, kNumParams>& names();
  static int index_of(std::string_view name);

  // Glorot-uniform weight matrices, zero biases, zero log-variances.
  static ModelWeights init(const ModelConfig& cfg, uint64_t seed);

  const ad::Tensor& at(std::string_view name) const;
  ad::Tensor& at(std::string_view name);
  size_t total_scalars() const;
};

// Parameter leaves registered on one tape, canonical order.
struct GraphWeights {
  std::vector<ad::ValueId> ids;

  ad::ValueId at(std::string_view name) const {
    return ids[static_cast<size_t>(ModelWeights::index_of(name))];
  }
};

GraphWeights weights_on_tape(ad::Tape& tape, const ModelWeights& w);

// Two-stage point feature encoder: per-point MLP, channel max pool, global
// feature concatenated back onto each point, second MLP, second max pool.
// points is {n,3}; result is {1,feat_dim}.
ad::ValueId encode_graph(ad::Tape& tape, const GraphWeights& w,
                         ad::ValueId points);

// Gated recurrent fusion of the frame feature into the running state. Both
// f {1,feat_dim} and h_prev {1,hidden_dim}; result {1,hidden_dim}.
ad::ValueId gru_graph(ad::Tape& tape, const GraphWeights& w, ad::ValueId f,
                      ad::ValueId h_prev);

struct DecodeGraph {
  ad::ValueId shape;  // {n_out,3}
  ad::ValueId pose4;  // {1,4} = (tx, ty, sin-like, cos-like)
};

DecodeGraph decode_graph(ad::Tape& tape, const ModelConfig& cfg,
                         const GraphWeights& w, ad::ValueId h);

// Turns a raw pose head output into a pose: heading from atan2 of the
// normalized trig pair, zero vertical offset. Throws DegenerateRotation when
// the pair's magnitude is below 1e-8.
PlanarPose pose_from_raw(double tx, double ty, double sin_like, double cos_like);

// Sorts lexicographically by (x, y, z) and drops exact duplicates, so every
// permutation or duplication of the same point set maps to one canonical
// cloud. All per-frame statistics (centroid, encoder sample) are computed
// from this form, which is what makes the pipeline order-insensitive at the
// bit level.
PointCloud canonical_form(const PointCloud& cloud);

// Canonical form resampled to n points with the given seed: without
// replacement when enough unique points exist, with replacement otherwise.
PointCloud prepare_encode_input(const PointCloud& cloud, int n, uint64_t seed);

// Shifts a world pose into the frame centered on `mean`. The vertical offset
// is dropped entirely (the decoder pins it to zero, so targets built with
// this function leave no unlearnable constant in the pose loss).
PlanarPose demean_pose(const PlanarPose& world, const Vec3& mean);

struct FrameEstimate {
  PointCloud shape;   // completed shape, world frame
  PlanarPose pose;    // world frame
  ad::Tensor hidden;  // recurrent state after this frame, {1,hidden_dim}
  bool skipped = false;
};

// Runs the full per-frame pipeline over a sequence with a zero initial
// recurrent state. Frames with fewer than 5 points are skipped: the
// recurrent state is carried unchanged and the previous world-frame estimate
// is shifted by the centroid displacement (zero for an empty frame). Skipped
// frames before the first processed frame report an empty shape and identity
// pose.
std::vector<FrameEstimate> estimate_sequence(const ModelWeights& w,
                                             std::span<const PointCloud> frames,
                                             uint64_t resample_seed = 0);

// Same pipeline and skip policy, but the recurrent state is reset to zero
// before every frame, so each estimate sees only its own frame.
std::vector<FrameEstimate> estimate_per_frame(const ModelWeights& w,
                                              std::span<const PointCloud> frames,
                                              uint64_t resample_seed = 0);

// Checkpoint container. `step` counts optimizer updates; `stage` is the
// training stage the checkpoint was written in (0 for a fresh init).
struct Checkpoint {
  ModelWeights weights;
  int64_t step = 0;
  int stage = 0;
};

void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w,
                     int64_t step, int stage);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace seqfit

#endif
