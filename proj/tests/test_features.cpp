#include <random>

#include "doctest.h"
#include "support.hpp"
#include "vtrfeat/errors.hpp"
#include "vtrfeat/features.hpp"

using namespace vtrfeat;
using vtrfeat::testing::random_matrix;

namespace {

// Pixel values k/256 so that affine changes with small integer coefficients
// stay exact in float.
Image random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> k(0, 255);
  Image img(w, h);
  for (float& v : img.data) v = static_cast<float>(k(rng)) / 256.0f;
  return img;
}

}  // namespace

TEST_CASE("forward output shapes and descriptor dimension") {
  NetworkConfig cfg;
  cfg.seed = 3;
  const ExtractorWeights w = ExtractorWeights::initialize(cfg);
  CHECK(w.consistent());
  CHECK(cfg.descriptor_dim() == 56);
  const DenseFeatureMap f = forward(random_image(64, 48, 1), w);
  CHECK(f.width == 64);
  CHECK(f.height == 48);
  CHECK(f.dim() == 56);
  CHECK(f.consistent());
  CHECK(f.scores.minCoeff() > 0.0);
  CHECK(f.scores.maxCoeff() < 1.0);
}

TEST_CASE("zero weights give scores of one half") {
  const ExtractorWeights w = ExtractorWeights::zeros(NetworkConfig{});
  const DenseFeatureMap f = forward(random_image(64, 48, 2), w);
  CHECK((f.scores.array() == 0.5).all());
}

TEST_CASE("forward is deterministic for a fixed seed") {
  NetworkConfig cfg;
  cfg.seed = 11;
  const Image img = random_image(32, 24, 5);
  const DenseFeatureMap a = forward(img, ExtractorWeights::initialize(cfg));
  const DenseFeatureMap b = forward(img, ExtractorWeights::initialize(cfg));
  CHECK(a.descriptors == b.descriptors);
  CHECK(a.scores == b.scores);
  CHECK(a.logits == b.logits);
}

TEST_CASE("forward rejects sizes not divisible by the pooling factor") {
  const ExtractorWeights w = ExtractorWeights::initialize(NetworkConfig{});
  CHECK_THROWS_AS(forward(random_image(30, 24, 1), w), ShapeError);
}

TEST_CASE("flatten and assign round trip") {
  NetworkConfig cfg;
  cfg.seed = 4;
  ExtractorWeights w = ExtractorWeights::initialize(cfg);
  const Vector flat = w.flatten();
  CHECK(flat.size() == static_cast<Eigen::Index>(w.parameter_count()));
  ExtractorWeights z = ExtractorWeights::zeros(cfg);
  z.assign(flat);
  CHECK(z.flatten() == flat);
  const double bound = std::sqrt(1.0 / 9.0);
  CHECK(w.layer("enc0").weight.cwiseAbs().maxCoeff() <= bound);
}

TEST_CASE("detect_keypoints") {
  SUBCASE("uniform logits give window centres") {
    const Matrix kp = detect_keypoints(Matrix::Zero(1, 64 * 48), 64, 48, 16);
    CHECK(kp.rows() == 12);
    CHECK(kp(0, 0) == doctest::Approx(7.5).epsilon(1e-14));
    CHECK(kp(0, 1) == doctest::Approx(7.5).epsilon(1e-14));
  }
  SUBCASE("saturated logit selects its pixel") {
    Matrix l = Matrix::Zero(1, 64 * 48);
    l(0, 4 * 64 + 3) = 50.0;
    const Matrix kp = detect_keypoints(l, 64, 48, 16);
    CHECK(std::abs(kp(0, 0) - 3.0) <= 1e-3);
    CHECK(std::abs(kp(0, 1) - 4.0) <= 1e-3);
  }
  SUBCASE("window 8 on 64x48 gives 48 keypoints") {
    CHECK(detect_keypoints(Matrix::Zero(1, 64 * 48), 64, 48, 8).rows() == 48);
  }
  SUBCASE("keypoints lie inside their windows and shift with the logits") {
    std::mt19937_64 rng(8);
    const int W = 64, H = 48, win = 16;
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix l = random_matrix(rng, 1, W * H, -5.0, 5.0);
      const Matrix kp = detect_keypoints(l, W, H, win);
      for (int i = 0; i < kp.rows(); ++i) {
        const int wx = i % (W / win), wy = i / (W / win);
        CHECK(kp(i, 0) >= wx * win);
        CHECK(kp(i, 0) <= wx * win + win - 1);
        CHECK(kp(i, 1) >= wy * win);
        CHECK(kp(i, 1) <= wy * win + win - 1);
      }
      // Shift right by one window: keypoint of window (wx, wy) in the shifted
      // map equals keypoint of (wx - 1, wy) plus one window.
      Matrix s = Matrix::Zero(1, W * H);
      for (int y = 0; y < H; ++y)
        for (int x = win; x < W; ++x) s(0, y * W + x) = l(0, y * W + x - win);
      const Matrix ks = detect_keypoints(s, W, H, win);
      const int nx = W / win;
      for (int wy = 0; wy < H / win; ++wy)
        for (int wx = 1; wx < nx; ++wx) {
          CHECK(ks(wy * nx + wx, 0) == doctest::Approx(kp(wy * nx + wx - 1, 0) + win).epsilon(1e-13));
          CHECK(ks(wy * nx + wx, 1) == doctest::Approx(kp(wy * nx + wx - 1, 1)).epsilon(1e-13));
        }
    }
  }
}

TEST_CASE("bilinear_sample") {
  std::mt19937_64 rng(21);
  const int W = 7, H = 5;
  const Matrix m = random_matrix(rng, 3, W * H);
  CHECK(bilinear_sample(m, W, H, 2.0, 3.0) == Vector(m.col(3 * W + 2)));
  const Vector mid = bilinear_sample(m, W, H, 2.5, 1.0);
  CHECK((mid - 0.5 * (m.col(W + 2) + m.col(W + 3))).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK_THROWS_AS(bilinear_sample(m, W, H, -0.1, 1.0), OutOfBounds);
  CHECK_THROWS_AS(bilinear_sample(m, W, H, 1.0, H - 0.9), OutOfBounds);
  CHECK_NOTHROW(bilinear_sample(m, W, H, W - 1.0, H - 1.0));

  std::uniform_real_distribution<double> uu(0.0, W - 1.0), vv(0.0, H - 1.0);
  for (int i = 0; i < 500; ++i) {
    const double u = uu(rng), v = vv(rng);
    Vector ref = Vector::Zero(3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double wgt = std::max(0.0, 1.0 - std::abs(u - x)) * std::max(0.0, 1.0 - std::abs(v - y));
        ref += wgt * m.col(y * W + x);
      }
    CHECK((bilinear_sample(m, W, H, u, v) - ref).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("extract_keypoints samples descriptors and scores") {
  NetworkConfig cfg;
  cfg.seed = 2;
  const DenseFeatureMap f = forward(random_image(64, 48, 9), ExtractorWeights::initialize(cfg));
  const KeypointSet k = extract_keypoints(f, 8);
  CHECK(k.size() == 48);
  CHECK(k.descriptors.cols() == 56);
  for (int i = 0; i < k.size(); ++i) {
    const Vector d = bilinear_sample(f.descriptors, 64, 48, k.coords(i, 0), k.coords(i, 1));
    CHECK((k.descriptors.row(i).transpose() - d).norm() == 0.0);
  }
}

TEST_CASE("analytic features") {
  const Image img = random_image(64, 48, 13);
  const DenseFeatureMap a = analytic_features(img);
  CHECK(a.consistent());
  CHECK(a.dim() == analytic_descriptor_dim());
  const DenseFeatureMap b = analytic_features(img);
  CHECK(a.descriptors == b.descriptors);
  CHECK(a.scores == b.scores);

  Image g = img;
  for (float& v : g.data) v = 2.0f * v + 5.0f;
  const DenseFeatureMap c = analytic_features(g);
  CHECK((a.descriptors - c.descriptors).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK((a.scores - c.scores).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(a.scores.minCoeff() >= 0.0);
  CHECK(a.scores.maxCoeff() <= 1.0);
}
