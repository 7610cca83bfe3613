#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "vtrfeat/errors.hpp"
#include "vtrfeat/io.hpp"
#include "vtrfeat/training.hpp"

using namespace vtrfeat;
using vtrfeat::testing::gradient_pair;
using vtrfeat::testing::random_matrix;
using vtrfeat::testing::rel_error;
using vtrfeat::testing::TempDir;

namespace {

Matrix transform(const SE3Pose& T, const Matrix& p) {
  return (p * T.rotation().transpose()).rowwise() + T.translation().transpose();
}

PlanarPose random_planar(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), g(-std::numbers::pi, std::numbers::pi);
  return {u(rng), u(rng), g(rng)};
}

Dataset small_dataset(std::uint64_t seed, int train, int val) {
  DatasetConfig cfg;
  cfg.seed = seed;
  cfg.width = 32;
  cfg.height = 24;
  cfg.train_count = train;
  cfg.val_count = val;
  return generate_dataset(cfg);
}

}  // namespace

TEST_CASE("keypoint loss") {
  std::mt19937_64 rng(1);
  const PlanarPose gt{0.3, -0.1, 0.2};
  const Matrix src = random_matrix(rng, 10, 3, -2.0, 2.0);
  Matrix tgt = transform(planar_to_se3(gt), src);
  CHECK(keypoint_loss(src, tgt, gt) < 1e-24);

  Matrix off = tgt;
  off(3, 0) += 1.0;
  CHECK(keypoint_loss(src, off, gt) == doctest::Approx(1.0).epsilon(1e-12));

  off = tgt;
  off(3, 2) += 5.0;
  CHECK(keypoint_loss(src, off, gt) < 1e-24);

  // z-invariance on random instances
  for (int k = 0; k < 100; ++k) {
    const PlanarPose p = random_planar(rng);
    const Matrix s = random_matrix(rng, 8, 3, -3.0, 3.0);
    const Matrix t = random_matrix(rng, 8, 3, -3.0, 3.0);
    Matrix tz = t;
    tz.col(2) += random_matrix(rng, 8, 1, -10.0, 10.0);
    CHECK(std::abs(keypoint_loss(s, t, p) - keypoint_loss(s, tz, p)) <= 1e-12);
  }
  CHECK_THROWS_AS(keypoint_loss(src, tgt.topRows(4), gt), ShapeError);
}

TEST_CASE("pose loss") {
  const PlanarPose gt{0.2, 0.1, 0.3};
  CHECK(pose_loss(gt, gt, 1.0) <= 1e-12);
  CHECK(pose_loss({1.2, 0.1, 0.3}, gt, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pose_loss({0.2, 0.1, 0.3 + std::numbers::pi / 2}, gt, 1.0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(pose_loss({0.2, 0.1, 0.3 + std::numbers::pi / 2}, gt, 0.5) == doctest::Approx(2.0).epsilon(1e-12));

  std::mt19937_64 rng(2);
  for (int k = 0; k < 100; ++k) {
    const PlanarPose a = random_planar(rng), b = random_planar(rng);
    CHECK(pose_loss(a, a, 1.0) <= 1e-12);
    CHECK(pose_loss(a, b, 1.0) >= 0.0);
    // Rotation term: closed form, and only the heading difference matters.
    const PlanarPose a0{0.0, 0.0, a.gamma}, b0{0.0, 0.0, b.gamma};
    const double closed = 4.0 * (1.0 - std::cos(a.gamma - b.gamma));
    CHECK(std::abs(pose_loss(a0, b0, 1.0) - closed) <= 1e-12);
    const double shift = random_planar(rng).gamma;
    CHECK(std::abs(pose_loss({0, 0, a.gamma + shift}, {0, 0, b.gamma + shift}, 1.0) - closed) <= 1e-12);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters alone") {
    Vector x(3);
    x << 1.0, -2.0, 0.5;
    const Vector x0 = x;
    AdamState s;
    adam_step(x, Vector::Zero(3), s, 0.1);
    CHECK(x == x0);
    CHECK(s.step == 1);
  }
  SUBCASE("first step moves each coordinate by about lr") {
    Vector x = Vector::Zero(4);
    Vector g(4);
    g << 3.0, -0.2, 1e-3, -50.0;
    AdamState s;
    adam_step(x, g, s, 1e-2);
    for (int i = 0; i < 4; ++i) {
      CHECK(std::abs(x[i]) == doctest::Approx(1e-2 * std::abs(g[i]) / (std::abs(g[i]) + 1e-8)).epsilon(1e-9));
      CHECK(x[i] * g[i] < 0.0);
    }
  }
  SUBCASE("converges on a quadratic") {
    Vector x = Vector::Zero(1);
    AdamState s;
    for (int k = 0; k < 200; ++k) adam_step(x, Vector::Constant(1, 2.0 * (x[0] - 2.0)), s, 0.1);
    CHECK(std::abs(x[0] - 2.0) < 0.05);
  }
  SUBCASE("lr = 0 is bitwise inert") {
    std::mt19937_64 rng(3);
    Vector x = random_matrix(rng, 50, 1).col(0);
    const Vector x0 = x;
    AdamState s;
    for (int k = 0; k < 5; ++k) adam_step(x, random_matrix(rng, 50, 1).col(0), s, 0.0);
    CHECK(std::memcmp(x.data(), x0.data(), sizeof(double) * 50) == 0);
  }
}

TEST_CASE("tape losses match finite differences") {
  std::mt19937_64 rng(4);
  const PlanarPose gt{0.3, -0.2, 0.4};

  auto [a1, n1] = gradient_pair(
      [&](Tape& t, const std::vector<NodeId>& x) { return ad::keypoint_loss(t, x[0], x[1], gt); },
      {random_matrix(rng, 6, 3), random_matrix(rng, 6, 3)}, 11);
  CHECK(rel_error(a1, n1) < 1e-7);

  // 3 x 4 [C | r]: a perturbed rotation keeps atan2 well conditioned.
  Matrix pose(3, 4);
  pose.leftCols<3>() = rot_z(0.7) + 0.05 * random_matrix(rng, 3, 3);
  pose.col(3) = random_matrix(rng, 3, 1);
  auto [a2, n2] = gradient_pair(
      [&](Tape& t, const std::vector<NodeId>& x) { return ad::pose_loss(t, x[0], gt, 1.3); }, {pose}, 12);
  CHECK(rel_error(a2, n2) < 1e-7);

  Tape t;
  const NodeId pn = t.constant(pose);
  const PlanarPose est = se3_to_planar(SE3Pose(pose.leftCols<3>(), pose.col(3)));
  CHECK(t.value(ad::pose_loss(t, pn, gt, 1.3))(0, 0) ==
        doctest::Approx(pose_loss({pose(0, 3), pose(1, 3), std::atan2(pose(1, 0), pose(0, 0))}, gt, 1.3))
            .epsilon(1e-12));
  CHECK(est.gamma == doctest::Approx(std::atan2(pose(1, 0), pose(0, 0))));

  const CameraIntrinsics K = default_intrinsics(32, 24);
  Matrix pts = random_matrix(rng, 5, 2, 2.0, 20.0);
  Matrix disp = random_matrix(rng, 5, 1, 2.0, 8.0);
  auto [a3, n3] = gradient_pair(
      [&](Tape& tp, const std::vector<NodeId>& x) { return ad::backproject(tp, x[0], x[1], K); }, {pts, disp}, 13);
  CHECK(rel_error(a3, n3) < 1e-7);
  {
    Tape tp;
    const Matrix& out = tp.value(ad::backproject(tp, tp.constant(pts), tp.constant(disp), K));
    for (int i = 0; i < 5; ++i) {
      const Vec3 ref = backproject({pts(i, 0), pts(i, 1), disp(i, 0)}, K);
      CHECK((out.row(i).transpose() - ref).norm() < 1e-12);
    }
  }
}

TEST_CASE("sample loss composition") {
  const Dataset d = small_dataset(5, 6, 1);
  const ExtractorWeights w = ExtractorWeights::initialize(NetworkConfig{});
  int checked = 0;
  for (const Sample& s : d.train) {
    LossConfig cfg;
    Tape t;
    const SampleLoss full = record_sample_loss(t, register_weights(t, w, false), w, training_pair(s), d.K, cfg);
    if (full.skipped) continue;
    CHECK(t.value(full.total)(0, 0) == doctest::Approx(full.keypoint + full.pose).epsilon(1e-12));
    CHECK(full.pose == doctest::Approx(pose_loss(full.estimate, s.pose, cfg.lambda)).epsilon(1e-9));
    CHECK(full.gated >= 4);

    cfg.keypoint_weight = 0.0;
    Tape t2;
    const SampleLoss pose_only = record_sample_loss(t2, register_weights(t2, w, false), w, training_pair(s), d.K, cfg);
    CHECK(t2.value(pose_only.total)(0, 0) == doctest::Approx(full.pose).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("batch gradient matches finite differences") {
  const Dataset d = small_dataset(6, 3, 1);
  std::vector<TrainingPair> pairs;
  for (const Sample& s : d.train) pairs.push_back(training_pair(s));
  const ExtractorWeights w = ExtractorWeights::initialize(NetworkConfig{.seed = 2});
  const LossConfig cfg;
  const BatchResult b = total_loss(pairs, w, d.K, cfg);
  REQUIRE(b.used > 0);
  CHECK(b.gradient.size() == static_cast<Eigen::Index>(w.parameter_count()));

  // A seeded subset of coordinates, brute force.
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<Eigen::Index> pick(0, b.gradient.size() - 1);
  const Vector flat = w.flatten();
  Vector analytic(40), numeric(40);
  for (int k = 0; k < 40; ++k) {
    const Eigen::Index i = pick(rng);
    const double h = 1e-6 * std::max(1.0, std::abs(flat[i]));
    auto at = [&](double delta) {
      Vector x = flat;
      x[i] += delta;
      ExtractorWeights p = w;
      p.assign(x);
      const BatchResult r = total_loss(pairs, p, d.K, cfg, false);
      REQUIRE(r.used == b.used);
      return r.loss;
    };
    analytic[k] = b.gradient[i];
    numeric[k] = (at(h) - at(-h)) / (2.0 * h);
  }
  CHECK(rel_error(analytic, numeric) < 1e-4);

  const BatchResult again = total_loss(pairs, w, d.K, cfg);
  CHECK(again.loss == b.loss);
  CHECK(again.gradient == b.gradient);
}

TEST_CASE("training loop") {
  const Dataset d = small_dataset(8, 8, 4);
  const ExtractorWeights init = ExtractorWeights::initialize(NetworkConfig{.seed = 3});
  LossConfig lc;

  SUBCASE("fixed seed gives identical curves") {
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.max_epochs = 3;
    tc.seed = 9;
    const TrainResult a = train(d, init, tc, lc);
    const TrainResult b = train(d, init, tc, lc);
    CHECK(loss_curve_csv(a.history) == loss_curve_csv(b.history));
    CHECK(a.best.flatten() == b.best.flatten());
    CHECK(a.history.size() == 4);
    CHECK(loss_curve_csv(a.history).rfind("epoch,train_loss,val_loss,val_pose_err,val_pose_loss\n", 0) == 0);
  }

  SUBCASE("frozen weights stop after exactly `patience` stale epochs") {
    TrainConfig tc;
    tc.freeze_weights = true;
    tc.early_stop_patience = 3;
    tc.max_epochs = 20;
    const TrainResult r = train(d, init, tc, lc);
    CHECK(r.stopped_epoch == 3);
    CHECK(r.best_epoch == 0);
    REQUIRE(r.history.size() == 4);
    for (const auto& e : r.history) CHECK(e.val_pose_loss == r.history[0].val_pose_loss);
    CHECK(r.best.flatten() == init.flatten());
  }

  SUBCASE("the total-loss stop rule behaves the same on frozen weights") {
    TrainConfig tc;
    tc.freeze_weights = true;
    tc.early_stop_patience = 2;
    tc.stop_metric = StopMetric::total;
    CHECK(train(d, init, tc, lc).stopped_epoch == 2);
  }

  SUBCASE("bad inputs") {
    Dataset empty = d;
    empty.train.clear();
    CHECK_THROWS_AS(train(empty, init, TrainConfig{}, lc), ConfigError);
    TrainConfig bad;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(train(d, init, bad, lc), ConfigError);
    bad = TrainConfig{};
    bad.early_stop_patience = 0;
    CHECK_THROWS_AS(train(d, init, bad, lc), ConfigError);
    LossConfig lb;
    lb.lambda = -1.0;
    CHECK_THROWS_AS(train(d, init, TrainConfig{}, lb), ConfigError);
    CHECK_THROWS_AS(parse_stop_metric("median"), ConfigError);
  }
}

TEST_CASE("desk-scale training lowers validation pose loss") {
  // 200 pairs at 32x24, 20 epochs at most.
  const Dataset d = small_dataset(1, 200, 50);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_epochs = 20;
  tc.seed = 1;
  const TrainResult r = train(d, ExtractorWeights::initialize(NetworkConfig{.seed = 1}), tc, LossConfig{});
  double best = r.history[0].val_pose_loss;
  for (const auto& e : r.history) best = std::min(best, e.val_pose_loss);
  MESSAGE("epoch-0 val pose loss " << r.history[0].val_pose_loss << ", best " << best << " at epoch "
                                   << r.best_epoch);
  CHECK(best <= 0.5 * r.history[0].val_pose_loss);
  CHECK(r.history[static_cast<std::size_t>(r.best_epoch)].val_pose_loss == best);
}

TEST_CASE("checkpoints") {
  const ExtractorWeights w = ExtractorWeights::initialize(NetworkConfig{.seed = 4});
  TempDir dir("ckpt");
  save_checkpoint(dir.path(), w, 37.5);
  const Checkpoint c = load_checkpoint(dir.path());
  CHECK(c.tau == 37.5);
  CHECK(c.weights.config().channels == w.config().channels);
  CHECK(c.weights.config().window == w.config().window);
  // float32 storage
  const Vector a = w.flatten(), b = c.weights.flatten();
  REQUIRE(a.size() == b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));

  // A second round trip is exact.
  TempDir dir2("ckpt2");
  save_checkpoint(dir2.path(), c.weights, c.tau);
  CHECK(vtrfeat::testing::same_tree(dir.path(), dir2.path()));
  CHECK(load_checkpoint(dir2.path()).weights.flatten() == b);

  const io::json m = io::read_json(dir.path() / "manifest.json");
  CHECK(m.at("layers").size() == w.layers().size());
  CHECK(m.at("layers")[0].at("weight_shape") == io::json::array({8, 1, 3, 3}));

  TempDir empty("ckpt_empty");
  CHECK_THROWS_AS(load_checkpoint(empty.path()), IoError);
  std::filesystem::remove(dir.path() / m.at("layers")[0].at("blob").get<std::string>());
  CHECK_THROWS_AS(load_checkpoint(dir.path()), IoError);
}
