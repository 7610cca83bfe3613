#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vtrfeat/diff.hpp"
#include "vtrfeat/features.hpp"
#include "vtrfeat/geometry.hpp"
#include "vtrfeat/matching.hpp"
#include "vtrfeat/synth.hpp"

namespace vtrfeat {

struct LossConfig {
  double lambda = 1.0;
  double keypoint_weight = 1.0;
  double gate_threshold = 0.5;
  double tau = kDefaultTemperature;
  int stride = 1;

  void validate() const;
};

enum class StopMetric { pose, total };

struct TrainConfig {
  double learning_rate = 1e-5;
  int batch_size = 4;
  int max_epochs = 20;
  int early_stop_patience = 5;
  /// Validation quantity watched by early stopping and best-checkpoint
  /// selection. The total loss is dominated by the keypoint sum, whose term
  /// count grows as more matches pass the gate.
  StopMetric stop_metric = StopMetric::pose;
  std::uint64_t seed = 0;
  /// Fixed per-batch summation order (always on; threads only split work).
  bool deterministic = true;
  /// Runs the loop with a zero step size (early-stopping checks).
  bool freeze_weights = false;

  void validate() const;
};

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// sum_i |(T'_gt p_s_i)_xy - (p_t_i)_xy|^2
double keypoint_loss(const Matrix& source, const Matrix& target, const PlanarPose& gt);
/// |r_est - r_gt|^2 + lambda |C_est C_gt^T - I|_F^2 on planar-embedded poses.
double pose_loss(const PlanarPose& est, const PlanarPose& gt, double lambda);

/// Standard bias-corrected Adam update in place.
void adam_step(Vector& params, const Vector& grads, AdamState& state, double lr);

namespace ad {
/// 1x1 keypoint loss of N x 3 source/target nodes.
NodeId keypoint_loss(Tape& t, NodeId source, NodeId target, const PlanarPose& gt);
/// 1x1 pose loss of a 3 x 4 [C | r] node, reduced to (r_x, r_y, yaw) first.
NodeId pose_loss(Tape& t, NodeId pose, const PlanarPose& gt, double lambda);
/// N x 3 stereo lift of N x 2 pixel coordinates with N x 1 disparities.
NodeId backproject(Tape& t, NodeId points, NodeId disparity, const CameraIntrinsics& K);
}  // namespace ad

/// Everything a training sample needs: images, ground-truth disparities and
/// the ground-truth relative pose T_ts.
struct TrainingPair {
  const Image* source;
  const Image* source_disparity;
  const Image* target;
  const Image* target_disparity;
  PlanarPose gt;
};

inline TrainingPair training_pair(const Sample& s) {
  return {&s.source.left, &s.source.disparity, &s.target.left, &s.target.disparity, s.pose};
}

/// Result of recording one sample's loss on a tape.
struct SampleLoss {
  bool skipped = false;
  std::string skip_reason;
  NodeId total;
  double keypoint = 0.0;
  double pose = 0.0;
  int gated = 0;
  PlanarPose estimate;
  Matrix keypoints;  // N x 2 source keypoints
  Matrix matches;    // N x 2 soft-matched target points
};

/// Records keypoint_weight * L_keypoint + L_pose for one pair on `tape`:
/// extractor on both images, soft matching, weights, stereo lift, the
/// ground-truth gate and the differentiable alignment. Sets `skipped` when
/// fewer than 4 pairs survive the gate or the alignment is degenerate.
SampleLoss record_sample_loss(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                              const TrainingPair& pair, const CameraIntrinsics& K, const LossConfig& cfg);

struct GradientCheck {
  double loss = 0.0;
  Vector analytic;
  Vector numeric;
  double rel_error = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|)
  double seconds = 0.0;
};

/// Tape gradient of one sample's loss against central differences with step
/// h * max(1, |w|) over every extractor weight. Each probe re-runs only the
/// stages downstream of the perturbed layer. Throws NumericError when the
/// sample (or a perturbed copy) would be skipped.
GradientCheck check_gradient(const TrainingPair& pair, const ExtractorWeights& weights, const CameraIntrinsics& K,
                             const LossConfig& cfg, double h = 1e-6);

struct BatchResult {
  double loss = 0.0;     // mean over contributing samples
  double pose = 0.0;     // mean pose loss over contributing samples
  int used = 0;
  int skipped = 0;
  Vector gradient;       // d(mean loss)/d(flattened weights); zero when used == 0
};

/// Mean total loss over `pairs` and its gradient with respect to every
/// extractor weight. Per-sample tapes may run in parallel; the sum is taken
/// in sample order.
BatchResult total_loss(const std::vector<TrainingPair>& pairs, const ExtractorWeights& weights,
                       const CameraIntrinsics& K, const LossConfig& cfg, bool with_gradient = true);

struct EvalResult {
  double loss = 0.0;       // mean total loss; skipped samples use the fallback
  double pose_loss = 0.0;  // mean pose loss; skipped samples use the fallback
  double pose_error = 0.0; // mean planar translation error (m)
  int skipped = 0;
};

/// Forward-only evaluation. A skipped sample contributes the loss of an
/// identity pose estimate so the average always covers the whole set.
EvalResult evaluate(const std::vector<TrainingPair>& pairs, const ExtractorWeights& weights,
                    const CameraIntrinsics& K, const LossConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_pose_loss = 0.0;
  double val_pose_err = 0.0;
};

struct TrainResult {
  ExtractorWeights best;
  int best_epoch = 0;
  int stopped_epoch = 0;
  std::vector<EpochRecord> history;
};

/// Epoch 0 evaluates the initial weights; epochs 1..max_epochs shuffle the
/// training pairs, step Adam once per batch and evaluate on validation. Stops
/// after `early_stop_patience` epochs without a strict improvement of the
/// validation metric. Throws ConfigError on an empty training set.
TrainResult train(const Dataset& data, const ExtractorWeights& init, const TrainConfig& tc, const LossConfig& lc,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// epoch,train_loss,val_loss,val_pose_err,val_pose_loss
std::string loss_curve_csv(const std::vector<EpochRecord>& history);
std::string to_string(StopMetric m);
StopMetric parse_stop_metric(const std::string& s);

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + one float32 blob per layer (weight rows are
// out x in x 3 x 3, then bias).

struct Checkpoint {
  ExtractorWeights weights;
  double tau = kDefaultTemperature;
};

void save_checkpoint(const std::filesystem::path& dir, const ExtractorWeights& weights, double tau);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace vtrfeat
