#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vtrfeat/geometry.hpp"
#include "vtrfeat/image.hpp"

namespace vtrfeat {

struct SceneParams {
  double extent = 20.0;            // half-width of the area holding boxes (m)
  double block_cell = 2.0;         // one candidate box per cell
  double block_probability = 0.45;
  double block_height = 0.35;      // maximum box height (m)
  double edge_softness = 0.08;     // width of the smooth box edge (m)
  int octaves = 4;
  double base_frequency = 1.2;     // cycles per metre of the coarsest octave

  friend bool operator==(const SceneParams&, const SceneParams&) = default;
};

/// Textured heightfield: ground plane z = 0 plus smooth-edged raised boxes.
/// The world frame has z pointing down, so heights are negative z.
class Scene {
 public:
  static Scene generate(std::uint64_t seed, const SceneParams& params = {});

  std::uint64_t seed() const { return seed_; }
  const SceneParams& params() const { return params_; }

  /// Surface height above the ground at (x, y), >= 0.
  double height(double x, double y) const;
  /// Albedo in [0, 1] at (x, y).
  double texture(double x, double y) const;

  friend bool operator==(const Scene&, const Scene&) = default;

 private:
  struct Block {
    double cx = 0, cy = 0, hx = 0, hy = 0, h = 0;
    friend bool operator==(const Block&, const Block&) = default;
  };
  const Block* block_at(double x, double y) const;
  int cells_ = 0;
  std::uint64_t seed_ = 0;
  SceneParams params_;
  std::vector<Block> blocks_;     // cells_ x cells_, h = 0 where empty
  std::vector<double> lattice_;  // kLattice^2 values per octave
  std::vector<double> offsets_;  // per-octave (x, y) phase offsets
};

struct PhotometricParams {
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  double vignette = 0.0;
  double sigma = 0.0;

  bool valid() const { return gain > 0.0 && gamma > 0.0 && sigma >= 0.0; }
  static PhotometricParams identity() { return {}; }
  friend bool operator==(const PhotometricParams&, const PhotometricParams&) = default;
};

struct LightingCondition {
  std::string name;
  PhotometricParams photo;
};

/// The 8-condition day schedule, ordered night to dusk.
const std::vector<LightingCondition>& default_schedule();
const LightingCondition& find_condition(const std::string& name);
/// Conditions sorted by severity (noise over gain), strongest first.
std::vector<std::string> strongest_conditions(std::size_t count);

/// Default camera for the desk-scale images.
CameraIntrinsics default_intrinsics(int width = 64, int height = 48);
inline constexpr double kCameraHeight = 2.0;

/// Downward-looking camera at world (x, y, -height) with heading theta:
/// camera x/y axes are the world axes rotated by theta about z.
SE3Pose camera_pose(double x, double y, double theta, double height = kCameraHeight);

struct StereoFrame {
  Image left;
  Image right;
  Image disparity;  // ground truth, may be empty
  SE3Pose pose;     // T_wc of the left camera
};

/// Intensity and depth along the ray of continuous pixel (u, v) of the camera
/// at T_wc, before photometry.
struct RaySample {
  double intensity = 0.0;
  double depth = 0.0;
};
RaySample cast_ray(const Scene& scene, const SE3Pose& T_wc, const CameraIntrinsics& K, double u, double v);

/// Renders left/right images and left ground-truth disparity. Noise is drawn
/// from `noise_seed`. Throws InvalidViewpoint unless the camera is above the
/// surface and looking down.
StereoFrame render_stereo(const Scene& scene, const SE3Pose& T_wc, const CameraIntrinsics& K, int width, int height,
                          const PhotometricParams& photo, std::uint64_t noise_seed);

/// Applies gain, gamma, bias, vignette and noise to a clean image.
Image apply_photometric(const Image& clean, const PhotometricParams& photo, std::uint64_t noise_seed);

struct Sample {
  StereoFrame source;
  StereoFrame target;
  PlanarPose pose;  // T_ts as planar parameters
  std::string source_condition;
  std::string target_condition;
  PhotometricParams source_photo;
  PhotometricParams target_photo;
};

struct MotionBounds {
  double alpha = 0.5;
  double beta = 0.2;
  double gamma = 10.0 * 3.14159265358979323846 / 180.0;
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  int train_count = 200;
  int val_count = 50;
  int width = 64;
  int height = 48;
  MotionBounds bounds;
  /// Condition names drawn from; empty means the full default schedule.
  std::vector<std::string> conditions;
  SceneParams scene;
};

struct Dataset {
  DatasetConfig config;
  CameraIntrinsics K;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Deterministic in-memory generation; samples are independent given the
/// seed and may be generated in parallel.
Dataset generate_dataset(const DatasetConfig& config);

/// Writes manifest.json plus one blob per sample under `dir`.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);
/// generate_dataset then write_dataset.
Dataset make_dataset(const DatasetConfig& config, const std::filesystem::path& dir);

struct BlockMatchResult {
  Image disparity;
  std::vector<std::uint8_t> valid;
};

/// Integer disparity by minimum sum of absolute differences over a
/// (2r+1)^2 window, r = window / 2. Invalid at borders and where the left
/// window's variance is below `variance_floor`.
BlockMatchResult block_match_disparity(const Image& left, const Image& right, int window, int max_disparity,
                                       double variance_floor = 1e-6);

// ---------------------------------------------------------------------------
// Sequences for teach and repeat.

struct SequenceConfig {
  std::uint64_t scene_seed = 0;
  std::uint64_t seed = 0;
  int frames = 50;
  int width = 64;
  int height = 48;
  double spacing = 0.25;       // metres between frames along the path
  double curvature = 0.02;     // heading change per metre (rad)
  double lateral_jitter = 0.0; // repeat path offset amplitude (m)
  double heading_jitter = 0.0; // repeat heading offset amplitude (rad)
  std::string condition = "noon";
  SceneParams scene;
};

struct Sequence {
  SequenceConfig config;
  CameraIntrinsics K;
  std::vector<StereoFrame> frames;
};

/// Frames along a gently curving path. The nominal path depends only on the
/// scene seed and path shape; the jitter and the photometric noise come from
/// `config.seed`.
Sequence generate_sequence(const SequenceConfig& config);

void write_sequence(const Sequence& seq, const std::filesystem::path& dir);
Sequence read_sequence(const std::filesystem::path& dir);

}  // namespace vtrfeat
