#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vtrfeat/diff.hpp"
#include "vtrfeat/image.hpp"

namespace vtrfeat {

/// Layer widths and keypoint window of the encoder-decoder extractor.
struct NetworkConfig {
  std::vector<int> channels{8, 16, 32};
  int window = 8;
  std::string activation = "tanh";
  std::uint64_t seed = 0;

  int descriptor_dim() const;
  int encoder_blocks() const { return static_cast<int>(channels.size()); }
};

/// One 3x3 convolution: weight is out x (in * 9), bias is out.
struct ConvLayer {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  Matrix weight;
  Vector bias;
};

/// Encoder blocks, bottleneck and the two decoder branches (keypoint logits,
/// scores). Layer order is fixed; see layer_names().
class ExtractorWeights {
 public:
  ExtractorWeights() = default;

  /// Uniform in +-sqrt(1/fan_in) from config.seed.
  static ExtractorWeights initialize(const NetworkConfig& config);
  /// Same shapes, every weight and bias zero.
  static ExtractorWeights zeros(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const ConvLayer& layer(const std::string& name) const;

  std::size_t parameter_count() const;
  /// Weights then bias, layer by layer.
  Vector flatten() const;
  void assign(const Vector& flat);

  /// Shapes chain correctly and all values are finite.
  bool consistent() const;

 private:
  NetworkConfig config_;
  std::vector<ConvLayer> layers_;
};

/// Dense per-pixel outputs. Maps are stored channel x (H*W) with pixel index
/// y * W + x.
struct DenseFeatureMap {
  int width = 0;
  int height = 0;
  Matrix descriptors;  // D x HW
  Matrix scores;       // 1 x HW, in [0, 1]
  Matrix logits;       // 1 x HW

  int dim() const { return static_cast<int>(descriptors.rows()); }
  bool consistent() const;
};

/// Sub-pixel keypoints (u, v) with descriptors and scores.
struct KeypointSet {
  Matrix coords;       // N x 2
  Matrix descriptors;  // N x D
  Vector scores;       // N

  int size() const { return static_cast<int>(coords.rows()); }
};

/// Network forward pass (value level).
DenseFeatureMap forward(const Image& image, const ExtractorWeights& weights);

/// Soft keypoint per window: softmax of the logits over the window, then the
/// expected pixel coordinate. Windows are enumerated row-major.
Matrix detect_keypoints(const Matrix& logits, int width, int height, int window);

/// Bilinear interpolation of every channel of `map` (C x HW) at q = (u, v).
/// Throws OutOfBounds unless q lies in [0, W-1] x [0, H-1].
Vector bilinear_sample(const Matrix& map, int width, int height, double u, double v);

/// Keypoints, descriptors and scores for a dense map.
KeypointSet extract_keypoints(const DenseFeatureMap& features, int window);

/// Non-learned fallback: zero-normalized multi-scale patch statistics as
/// descriptors, normalized gradient magnitude as scores, corner response as
/// logits.
DenseFeatureMap analytic_features(const Image& image);

/// Dimension of analytic_features descriptors.
int analytic_descriptor_dim();

// ---------------------------------------------------------------------------
// Tape-level forward pass.

/// Parameter (or constant) nodes for every layer, same order as layers().
struct WeightNodes {
  std::vector<NodeId> weight;
  std::vector<NodeId> bias;
};

WeightNodes register_weights(Tape& tape, const ExtractorWeights& weights, bool trainable);

struct FeatureNodes {
  int width = 0;
  int height = 0;
  NodeId descriptors;
  NodeId scores;
  NodeId logits;
};

/// Records the forward pass on `tape`. When `need_logits` is false the
/// keypoint decoder is skipped (target images only need descriptors and
/// scores).
FeatureNodes forward(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                     const Image& image, bool need_logits = true);

// The same pass in stages, so callers can feed cached upstream values back in
// as constants.

struct EncoderNodes {
  int width = 0;
  int height = 0;
  NodeId descriptors;  // D x HW
  NodeId pooled;       // input of the bottleneck
};

EncoderNodes forward_encoder(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                             const Image& image);
/// `width` and `height` are the full image size.
NodeId forward_bottleneck(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights, NodeId pooled,
                          int width, int height);
/// "kp" gives the logit map, "score" the sigmoid score map.
NodeId forward_branch(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                      const std::string& branch, NodeId bottleneck, int width, int height);

namespace ad {

/// Same-padded 3x3 convolution of x (Cin x HW).
NodeId conv3x3(Tape& t, NodeId x, NodeId weight, NodeId bias, int width, int height);
NodeId tanh(Tape& t, NodeId x);
NodeId sigmoid(Tape& t, NodeId x);
/// 2x2 average pooling; width and height must be even.
NodeId avg_pool2(Tape& t, NodeId x, int width, int height);
/// Nearest-neighbour 2x upsampling.
NodeId upsample_nearest2(Tape& t, NodeId x, int width, int height);
/// Bilinear resize (pixel-centre convention, edge-clamped).
NodeId resize_bilinear(Tape& t, NodeId x, int width, int height, int out_width, int out_height);
/// Stacks channel blocks.
NodeId concat_rows(Tape& t, const std::vector<NodeId>& parts);
/// N x 2 soft keypoints from a 1 x HW logit map.
NodeId window_keypoints(Tape& t, NodeId logits, int width, int height, int window);
/// N x C samples of `map` (C x HW) at `points` (N x 2).
NodeId bilinear_sample(Tape& t, NodeId map, NodeId points, int width, int height);

}  // namespace ad

}  // namespace vtrfeat
