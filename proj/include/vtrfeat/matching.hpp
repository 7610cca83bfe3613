#pragma once

#include "vtrfeat/diff.hpp"
#include "vtrfeat/features.hpp"
#include "vtrfeat/geometry.hpp"

namespace vtrfeat {

/// Default softmax temperature for dense matching.
inline constexpr double kDefaultTemperature = 50.0;

struct MatchConfig {
  double tau = kDefaultTemperature;
  /// Target pixels considered: every `stride`-th column and row.
  int stride = 1;
};

/// Source keypoints softly matched into a target image.
struct MatchSet {
  KeypointSet source;
  Matrix target_points;       // N x 2
  Matrix target_descriptors;  // N x D
  Vector target_scores;       // N
  Vector weights;             // N, in [0, 1]

  int size() const { return source.size(); }
};

/// Zero-normalized cross correlation; 0 when either input has zero variance.
double zncc(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b);

struct SoftMatch {
  Vec2 point;
  Vector descriptor;
  double score = 0.0;
};

/// Expected target coordinate under softmax(tau * zncc) over all target
/// pixels, with descriptor and score sampled there.
SoftMatch soft_match(const Vector& source_descriptor, const DenseFeatureMap& target,
                     const MatchConfig& cfg = {});

/// Softmax rows (N x M) of tau * zncc between each source descriptor and the
/// considered target pixels.
Matrix match_probabilities(const Matrix& source_descriptors, const DenseFeatureMap& target,
                           const MatchConfig& cfg = {});

/// Pixel coordinates (M x 2) of the target pixels considered under `stride`.
Matrix target_pixel_coords(int width, int height, int stride);

/// w = (zncc(d_s, d_t) + 1) / 2 * s_s * s_t for every pair.
Vector match_weights(const MatchSet& m);

/// soft_match for every source keypoint, then match_weights. Output row i
/// always corresponds to source keypoint i.
MatchSet match_all(const KeypointSet& source, const DenseFeatureMap& target, const MatchConfig& cfg = {});

namespace ad {

/// Row-wise ZNCC of two N x D matrices -> N x 1.
NodeId zncc_rows(Tape& t, NodeId a, NodeId b);

/// Dense soft matching of N x D source descriptors into a D x HW target
/// descriptor map -> N x 2 expected coordinates.
NodeId soft_match_points(Tape& t, NodeId source_descriptors, NodeId target_map, int width, int height,
                         const MatchConfig& cfg);

/// (z + 1) / 2 * s_s * s_t, all N x 1.
NodeId match_weights(Tape& t, NodeId zncc, NodeId source_scores, NodeId target_scores);

}  // namespace ad

}  // namespace vtrfeat
