#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vtrfeat/estimator.hpp"
#include "vtrfeat/features.hpp"
#include "vtrfeat/geometry.hpp"
#include "vtrfeat/matching.hpp"
#include "vtrfeat/synth.hpp"

namespace vtrfeat {

/// Learned network or the analytic fallback, behind one interface.
class Extractor {
 public:
  static Extractor learned(ExtractorWeights weights);
  static Extractor analytic(int window = NetworkConfig{}.window);

  DenseFeatureMap run(const Image& image) const;
  int window() const { return window_; }
  bool is_learned() const { return weights_.has_value(); }
  const ExtractorWeights* weights() const { return weights_ ? &*weights_ : nullptr; }
  /// "learned:<hash>" or "analytic"; stored with maps so a map is never
  /// queried with a different extractor.
  std::string fingerprint() const;

 private:
  std::optional<ExtractorWeights> weights_;
  int window_ = 8;
};

enum class MatchMode { dense, sparse };
enum class DisparitySource { ground_truth, block_match };

std::string to_string(MatchMode m);
std::string to_string(DisparitySource d);
MatchMode parse_match_mode(const std::string& s);
DisparitySource parse_disparity_source(const std::string& s);

struct HarnessParams {
  MatchMode mode = MatchMode::dense;
  DisparitySource disparity = DisparitySource::ground_truth;
  MatchConfig match;
  RansacParams ransac{.iterations = 400, .inlier_threshold = 0.1, .min_inliers = 3, .seed = 0};
  int failure_threshold = 20;
  int block_window = 5;
  int max_disparity = 32;

  void validate() const;
};

struct MapVertex {
  int id = 0;
  SE3Pose pose;            // ground-truth T_wc
  KeypointSet keypoints;   // keypoints with a valid lift only
  Matrix points;           // N x 3, vertex camera frame
  Image image;             // left image the features came from
  Image disparity;         // used to lift dense matches
  DenseFeatureMap dense;
};

struct Map {
  std::string fingerprint;
  std::string condition;
  CameraIntrinsics K;
  std::vector<MapVertex> vertices;
};

/// One vertex per frame. Throws TeachFailure when a frame has fewer than 3
/// keypoints with a valid disparity.
Map teach(const Sequence& seq, const Extractor& extractor, const HarnessParams& params);

struct LocalizationResult {
  int frame = 0;
  int vertex = 0;
  SE3Pose pose;  // estimated T_vl (live camera in the vertex frame)
  int matches = 0;
  int inliers = 0;
  bool failure = false;
  std::string reason;
  double pose_error = 0.0;     // planar translation error against ground truth (m)
  double heading_error = 0.0;  // |wrapped yaw error| (rad)
  double seconds = 0.0;
};

/// Live features of one frame; reusable across vertices and maps.
struct LiveFrame {
  KeypointSet keypoints;  // valid lifts only
  Matrix points;          // N x 3, live camera frame
  DenseFeatureMap dense;
};

LiveFrame prepare_live(const StereoFrame& frame, const Extractor& extractor, const CameraIntrinsics& K,
                       const HarnessParams& params);

/// Matches the live frame against `vertex` and runs RANSAC. Never throws on
/// a bad match: RANSAC errors and consensus below the failure threshold set
/// `failure`. `seed_index` decorrelates RANSAC streams between frames.
LocalizationResult localize(const LiveFrame& live, const MapVertex& vertex, const CameraIntrinsics& K,
                            const HarnessParams& params, std::uint64_t seed_index = 0);
LocalizationResult localize(const StereoFrame& frame, const MapVertex& vertex, const Extractor& extractor,
                            const CameraIntrinsics& K, const HarnessParams& params, std::uint64_t seed_index = 0);

struct RunReport {
  std::string teach_condition;
  std::string repeat_condition;
  std::string extractor;
  std::vector<LocalizationResult> frames;
  double mean_inliers = 0.0;
  int failures = 0;
  double failure_fraction = 0.0;
  /// Planar translation RMSE over frames that localized; NaN when none did.
  double planar_rmse = 0.0;
};

/// Recomputes the aggregate fields from `frames`.
void summarize(RunReport& report);

/// Each frame localizes against the vertex nearest to it by ground-truth
/// position. Frames run in parallel; results stay in frame order.
RunReport repeat(const Sequence& seq, const Map& map, const Extractor& extractor, const HarnessParams& params);

/// Maps are taught once per teach condition and live features computed once
/// per repeat condition; the result holds one report per (teach, repeat)
/// pair, teach-major.
std::vector<RunReport> condition_sweep(const SequenceConfig& base, const std::vector<std::string>& teach_conditions,
                                       const std::vector<std::string>& repeat_conditions, double lateral_jitter,
                                       double heading_jitter, const Extractor& extractor,
                                       const HarnessParams& params);

// ---------------------------------------------------------------------------
// Reports. Per run: run_<k>.csv with columns
//   frame,vertex,matches,inliers,failure,pose_error,heading_error
// plus summary.csv and condition_matrix.csv (mean inliers, teach conditions
// as rows, repeat conditions as columns, square over the union of both).

void emit_report(const std::vector<RunReport>& reports, const std::filesystem::path& dir);
std::vector<RunReport> read_report(const std::filesystem::path& dir);
/// Parses one run CSV back into frames and recomputes the aggregates.
RunReport parse_run_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Map persistence: manifest.json plus per-vertex float32 image and
// disparity. Features are recomputed on load with the given extractor, which
// must match the stored fingerprint.

void save_map(const Map& map, const std::filesystem::path& dir);
Map load_map(const std::filesystem::path& dir, const Extractor& extractor, const HarnessParams& params);

}  // namespace vtrfeat
