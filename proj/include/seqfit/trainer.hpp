#ifndef SEQFIT_TRAINER_HPP
#define SEQFIT_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "seqfit/dataset.hpp"
#include "seqfit/metrics.hpp"
#include "seqfit/model.hpp"

namespace seqfit {

struct TrainConfig {
  int stage = 1;  // 1: shape path, 2: pose head, 3: joint fine-tune
  double learning_rate = 1e-3;
  int epochs = 1;
  uint64_t seed = 0;
  double grad_clip_norm = 5.0;
  int bptt_max_len = 30;  // longer tracks split into chained windows
  int batch_tracks = 1;   // tracks whose gradients are averaged per step
};

// Which parameters may receive updates in a stage: stage 1 trains the
// encoder, recurrent cell and shape head; stage 2 only the pose head;
// stage 3 everything including the two log-variance scalars.
std::vector<bool> trainable_mask(int stage);

struct AdamState {
  std::vector<ad::Tensor> m, v;
  int64_t t = 0;

  static AdamState like(const ModelWeights& w);
};

// Global gradient-norm clip followed by one Adam update (beta1 0.9,
// beta2 0.999, eps 1e-8, bias correction). Parameters with mask[i] == false
// are left untouched.
void adam_step(ModelWeights& w, std::vector<ad::Tensor>& grads,
               const std::vector<bool>& mask, AdamState& state, double lr,
               double clip_norm);

struct TrainLogRow {
  int64_t step = 0;
  int stage = 0;
  double loss = 0.0;
  double l_cd = 0.0;
  double l_p = 0.0;
  double sigma_cd = 1.0;
  double sigma_p = 1.0;
};

void write_train_log_csv(const std::filesystem::path& path,
                         std::span<const TrainLogRow> rows);

struct TrainResult {
  ModelWeights weights;
  std::vector<TrainLogRow> log;
  int64_t final_step = 0;
};

// Runs one training stage over the tracks. Losses are averaged over the
// usable frames of each track (frames with fewer than 5 points contribute
// nothing, matching inference), then averaged over the tracks of a batch.
// `step0` offsets the step counter so chained stages log continuously.
TrainResult train_stage(std::span<const Track> tracks, const TrainConfig& cfg,
                        ModelWeights weights, int64_t step0 = 0);

enum class EvalMode { kSequential, kPerFrame };

struct EvalAggregates {
  double cd = 0.0;
  double emd = 0.0;
  double trans_err = 0.0;
  double rot_err = 0.0;
  double rot_err_folded = 0.0;  // heading error modulo the 180-degree flip
  int64_t frames = 0;
};

struct EvalResult {
  // One row per evaluated frame across all tracks; `frame` holds the
  // detection count (processed frames so far within the track, 1-based).
  std::vector<MetricReport> rows;
  EvalAggregates overall;
  std::vector<EvalAggregates> by_detections;  // index = detections - 1
};

using Predictor =
    std::function<std::vector<FrameEstimate>(std::span<const PointCloud>)>;

// Evaluation harness with an injectable predictor (the production predictor
// wraps estimate_sequence / estimate_per_frame). emd is computed on seeded
// subsamples of emd_points from each cloud so sizes match.
EvalResult evaluate_with(std::span<const Track> tracks, const Predictor& predict,
                         int emd_points, uint64_t seed);

EvalResult evaluate(std::span<const Track> tracks, const ModelWeights& w,
                    EvalMode mode, int emd_points, uint64_t seed);

nlohmann::json eval_to_json(const EvalResult& r);

// Four-panel line chart (cd, emd, translation, rotation vs detections) with
// one polyline per mode per panel.
void write_eval_svg(const std::filesystem::path& path,
                    const EvalResult& sequential, const EvalResult& per_frame);

}  // namespace seqfit

#endif
