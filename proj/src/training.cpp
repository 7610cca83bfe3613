#include "vtrfeat/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/estimator.hpp"
#include "vtrfeat/io.hpp"
#include "vtrfeat/parallel.hpp"

namespace vtrfeat {

namespace fs = std::filesystem;

void LossConfig::validate() const {
  if (!(lambda > 0.0) || !(keypoint_weight >= 0.0) || !(gate_threshold > 0.0) || !(tau > 0.0) || stride < 1)
    throw ConfigError("loss config: lambda, gate_threshold and tau must be positive, keypoint_weight >= 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("train config: max_epochs must be >= 0");
  if (early_stop_patience < 1) throw ConfigError("train config: patience must be >= 1");
}

double keypoint_loss(const Matrix& source, const Matrix& target, const PlanarPose& gt) {
  if (source.rows() != target.rows() || source.cols() != 3 || target.cols() != 3)
    throw ShapeError("keypoint_loss: expected matching N x 3 inputs");
  const SE3Pose T = planar_to_se3(gt);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < source.rows(); ++i) {
    const Vec3 p = T.apply(source.row(i).transpose());
    loss += (p.head<2>() - target.row(i).head<2>().transpose()).squaredNorm();
  }
  return loss;
}

double pose_loss(const PlanarPose& est, const PlanarPose& gt, double lambda) {
  const SE3Pose a = planar_to_se3(est);
  const SE3Pose b = planar_to_se3(gt);
  const double dr = (a.translation() - b.translation()).squaredNorm();
  const double dc = (a.rotation() * b.rotation().transpose() - Mat3::Identity()).squaredNorm();
  return dr + lambda * dc;
}

void adam_step(Vector& params, const Vector& grads, AdamState& s, double lr) {
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient size mismatch");
  if (s.m.size() == 0) s.m = Vector::Zero(params.size());
  if (s.v.size() == 0) s.v = Vector::Zero(params.size());
  if (s.m.size() != params.size() || s.v.size() != params.size())
    throw ShapeError("adam_step: moment size mismatch");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseProduct(grads);
  if (lr == 0.0) return;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double mh = s.m[i] / c1;
    const double vh = s.v[i] / c2;
    params[i] -= lr * mh / (std::sqrt(vh) + s.eps);
  }
}

namespace ad {

NodeId keypoint_loss(Tape& t, NodeId source, NodeId target, const PlanarPose& gt) {
  const Matrix& ps = t.value(source);
  const Matrix& pt = t.value(target);
  if (ps.rows() != pt.rows() || ps.cols() != 3 || pt.cols() != 3)
    throw ShapeError("keypoint_loss: expected matching N x 3 inputs");
  const SE3Pose T = planar_to_se3(gt);
  const Mat3 C = T.rotation();
  Matrix res = Matrix::Zero(ps.rows(), 3);  // xy residuals, z column stays zero
  for (Eigen::Index i = 0; i < ps.rows(); ++i) {
    const Vec3 p = T.apply(ps.row(i).transpose());
    res(i, 0) = p.x() - pt(i, 0);
    res(i, 1) = p.y() - pt(i, 1);
  }
  Matrix out(1, 1);
  out(0, 0) = res.squaredNorm();
  return t.record("keypoint_loss", std::move(out), {source, target},
                  [source, target, res, C](const Matrix& g, Tape& tp) {
                    const double s = 2.0 * g(0, 0);
                    if (tp.requires_grad(source)) tp.accumulate(source, s * res * C);
                    if (tp.requires_grad(target)) tp.accumulate(target, -s * res);
                  });
}

NodeId pose_loss(Tape& t, NodeId pose, const PlanarPose& gt, double lambda) {
  const Matrix& T = t.value(pose);
  if (T.rows() != 3 || T.cols() != 4) throw ShapeError("pose_loss: expected a 3 x 4 pose");
  const double c = T(0, 0), s = T(1, 0);
  const double yaw = std::atan2(s, c);
  const double ex = T(0, 3) - gt.alpha;
  const double ey = T(1, 3) - gt.beta;
  const double dg = yaw - gt.gamma;
  Matrix out(1, 1);
  out(0, 0) = ex * ex + ey * ey + lambda * 4.0 * (1.0 - std::cos(dg));
  return t.record("pose_loss", std::move(out), {pose}, [pose, c, s, ex, ey, dg, lambda](const Matrix& g, Tape& tp) {
    const double r2 = c * c + s * s;
    const double dyaw = g(0, 0) * lambda * 4.0 * std::sin(dg);
    Matrix grad = Matrix::Zero(3, 4);
    grad(0, 3) = 2.0 * ex * g(0, 0);
    grad(1, 3) = 2.0 * ey * g(0, 0);
    grad(0, 0) = -dyaw * s / r2;
    grad(1, 0) = dyaw * c / r2;
    tp.accumulate(pose, grad);
  });
}

NodeId backproject(Tape& t, NodeId points, NodeId disparity, const CameraIntrinsics& K) {
  const Matrix& q = t.value(points);
  const Matrix& d = t.value(disparity);
  if (q.cols() != 2 || d.cols() != 1 || d.rows() != q.rows())
    throw ShapeError("backproject: expected N x 2 points and N x 1 disparities");
  Matrix out(q.rows(), 3);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const Vec3 p = vtrfeat::backproject({q(i, 0), q(i, 1), d(i, 0)}, K);
    out.row(i) = p.transpose();
  }
  return t.record("backproject", std::move(out), {points, disparity}, [points, disparity, K](const Matrix& g, Tape& tp) {
    const Matrix& q = tp.value(points);
    const Matrix& d = tp.value(disparity);
    Matrix gq(q.rows(), 2), gd(q.rows(), 1);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const Mat3 J = backproject_jacobian({q(i, 0), q(i, 1), d(i, 0)}, K);
      const Vec3 v = J.transpose() * g.row(i).transpose();
      gq(i, 0) = v[0];
      gq(i, 1) = v[1];
      gd(i, 0) = v[2];
    }
    tp.accumulate(points, gq);
    tp.accumulate(disparity, gd);
  });
}

}  // namespace ad

namespace {

Matrix image_row(const Image& img) {
  Matrix m(1, static_cast<Eigen::Index>(img.size()));
  for (std::size_t i = 0; i < img.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = img.data[i];
  return m;
}

Vector flatten_gradient(const GradientMap& g, const WeightNodes& nodes, const ExtractorWeights& weights) {
  Vector flat = Vector::Zero(static_cast<Eigen::Index>(weights.parameter_count()));
  Eigen::Index k = 0;
  auto put = [&](NodeId id, Eigen::Index n) {
    auto it = g.find(id.index);
    if (it != g.end()) flat.segment(k, n) = Eigen::Map<const Vector>(it->second.data(), n);
    k += n;
  };
  const auto& layers = weights.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    put(nodes.weight[i], layers[i].weight.size());
    put(nodes.bias[i], layers[i].bias.size());
  }
  return flat;
}

double planar_translation_error(const PlanarPose& a, const PlanarPose& b) {
  return std::hypot(a.alpha - b.alpha, a.beta - b.beta);
}

}  // namespace

namespace {

// Everything after the feature maps. `cached_kp` / `cached_qt` replace the
// keypoint and soft-match stages with constants when those are known not to
// change.
SampleLoss record_tail(Tape& tape, const FeatureNodes& fs, const FeatureNodes& ft, int window,
                       const TrainingPair& pair, const CameraIntrinsics& K, const LossConfig& cfg,
                       const Matrix* cached_kp = nullptr, const Matrix* cached_qt = nullptr) {
  SampleLoss out;
  const int W = fs.width, H = fs.height;
  const NodeId kp = cached_kp ? tape.constant(*cached_kp) : ad::window_keypoints(tape, fs.logits, W, H, window);
  const NodeId desc_s = ad::bilinear_sample(tape, fs.descriptors, kp, W, H);
  const NodeId score_s = ad::bilinear_sample(tape, fs.scores, kp, W, H);

  const NodeId q_t = cached_qt ? tape.constant(*cached_qt)
                               : ad::soft_match_points(tape, desc_s, ft.descriptors, W, H, {cfg.tau, cfg.stride});
  const NodeId desc_t = ad::bilinear_sample(tape, ft.descriptors, q_t, W, H);
  const NodeId score_t = ad::bilinear_sample(tape, ft.scores, q_t, W, H);
  const NodeId w = ad::match_weights(tape, ad::zncc_rows(tape, desc_s, desc_t), score_s, score_t);

  const NodeId disp_s = ad::bilinear_sample(tape, tape.constant(image_row(*pair.source_disparity)), kp, W, H);
  const NodeId disp_t = ad::bilinear_sample(tape, tape.constant(image_row(*pair.target_disparity)), q_t, W, H);
  const NodeId p_s = ad::backproject(tape, kp, disp_s, K);
  const NodeId p_t = ad::backproject(tape, q_t, disp_t, K);

  out.keypoints = tape.value(kp);
  out.matches = tape.value(q_t);
  const std::vector<int> keep =
      gt_outlier_gate(tape.value(p_s), tape.value(p_t), planar_to_se3(pair.gt), cfg.gate_threshold);
  out.gated = static_cast<int>(keep.size());
  if (keep.size() < 4) {
    out.skipped = true;
    out.skip_reason = "fewer than 4 gated matches";
    return out;
  }
  const NodeId gs = ad::gather_rows(tape, p_s, keep);
  const NodeId gt = ad::gather_rows(tape, p_t, keep);
  const NodeId gw = ad::gather_rows(tape, w, keep);

  NodeId pose;
  try {
    pose = ad::weighted_alignment(tape, gs, gt, gw);
  } catch (const NumericError& e) {
    out.skipped = true;
    out.skip_reason = e.what();
    return out;
  }
  const Matrix& T = tape.value(pose);
  out.estimate = {T(0, 3), T(1, 3), std::atan2(T(1, 0), T(0, 0))};

  const NodeId lp = ad::pose_loss(tape, pose, pair.gt, cfg.lambda);
  const NodeId lk = ad::keypoint_loss(tape, gs, gt, pair.gt);
  out.pose = tape.value(lp)(0, 0);
  out.keypoint = tape.value(lk)(0, 0);
  out.total = ad::add(tape, ad::scale(tape, lk, cfg.keypoint_weight), lp);
  return out;
}

void check_pair(const TrainingPair& pair) {
  const int W = pair.source->width, H = pair.source->height;
  for (const Image* img : {pair.target, pair.source_disparity, pair.target_disparity})
    if (img->width != W || img->height != H) throw ShapeError("training pair: image sizes differ");
}

}  // namespace

SampleLoss record_sample_loss(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                              const TrainingPair& pair, const CameraIntrinsics& K, const LossConfig& cfg) {
  check_pair(pair);
  const FeatureNodes fs = forward(tape, nodes, weights, *pair.source, true);
  const FeatureNodes ft = forward(tape, nodes, weights, *pair.target, false);
  return record_tail(tape, fs, ft, weights.config().window, pair, K, cfg);
}

GradientCheck check_gradient(const TrainingPair& pair, const ExtractorWeights& weights, const CameraIntrinsics& K,
                             const LossConfig& cfg, double h) {
  cfg.validate();
  check_pair(pair);
  const auto t0 = std::chrono::steady_clock::now();
  GradientCheck out;
  const int window = weights.config().window;

  // Analytic gradient plus the cached stage values at the unperturbed weights.
  struct Cache {
    Matrix descriptors, pooled, bottleneck, scores;
  } cs, ct;
  Matrix logits, kp, qt;
  {
    Tape tape;
    const WeightNodes nodes = register_weights(tape, weights, true);
    const FeatureNodes fs = forward(tape, nodes, weights, *pair.source, true);
    const FeatureNodes ft = forward(tape, nodes, weights, *pair.target, false);
    const SampleLoss sl = record_tail(tape, fs, ft, window, pair, K, cfg);
    if (sl.skipped) throw NumericError("check_gradient: sample skipped (" + sl.skip_reason + ")");
    out.loss = tape.value(sl.total)(0, 0);
    out.analytic = flatten_gradient(tape.backward(sl.total), nodes, weights);
    kp = sl.keypoints;
    qt = sl.matches;
  }
  {
    Tape tape;
    const WeightNodes nodes = register_weights(tape, weights, false);
    for (auto [img, c] : {std::pair{pair.source, &cs}, std::pair{pair.target, &ct}}) {
      const EncoderNodes e = forward_encoder(tape, nodes, weights, *img);
      const NodeId b = forward_bottleneck(tape, nodes, weights, e.pooled, e.width, e.height);
      c->descriptors = tape.value(e.descriptors);
      c->pooled = tape.value(e.pooled);
      c->bottleneck = tape.value(b);
      c->scores = tape.value(forward_branch(tape, nodes, weights, "score", b, e.width, e.height));
      if (img == pair.source) logits = tape.value(forward_branch(tape, nodes, weights, "kp", b, e.width, e.height));
    }
  }

  const int W = pair.source->width, H = pair.source->height;
  enum class Stage { Encoder, Bottleneck, Keypoint, Score };
  auto staged_loss = [&](const ExtractorWeights& wts, Stage stage) {
    Tape tape;
    const WeightNodes nodes = register_weights(tape, wts, false);
    FeatureNodes fs{W, H, tape.constant(cs.descriptors), tape.constant(cs.scores), tape.constant(logits)};
    FeatureNodes ft{W, H, tape.constant(ct.descriptors), tape.constant(ct.scores), NodeId{}};
    const Matrix* ckp = nullptr;
    const Matrix* cqt = nullptr;
    switch (stage) {
      case Stage::Encoder:
        fs = forward(tape, nodes, wts, *pair.source, true);
        ft = forward(tape, nodes, wts, *pair.target, false);
        break;
      case Stage::Bottleneck: {
        const NodeId bs = forward_bottleneck(tape, nodes, wts, tape.constant(cs.pooled), W, H);
        const NodeId bt = forward_bottleneck(tape, nodes, wts, tape.constant(ct.pooled), W, H);
        fs.scores = forward_branch(tape, nodes, wts, "score", bs, W, H);
        fs.logits = forward_branch(tape, nodes, wts, "kp", bs, W, H);
        ft.scores = forward_branch(tape, nodes, wts, "score", bt, W, H);
        break;
      }
      case Stage::Keypoint:
        fs.logits = forward_branch(tape, nodes, wts, "kp", tape.constant(cs.bottleneck), W, H);
        break;
      case Stage::Score:
        fs.scores = forward_branch(tape, nodes, wts, "score", tape.constant(cs.bottleneck), W, H);
        ft.scores = forward_branch(tape, nodes, wts, "score", tape.constant(ct.bottleneck), W, H);
        ckp = &kp;
        cqt = &qt;
        break;
    }
    const SampleLoss sl = record_tail(tape, fs, ft, window, pair, K, cfg, ckp, cqt);
    if (sl.skipped) throw NumericError("check_gradient: perturbed sample skipped (" + sl.skip_reason + ")");
    return tape.value(sl.total)(0, 0);
  };

  ExtractorWeights work = weights;
  out.numeric = Vector::Zero(out.analytic.size());
  Eigen::Index k = 0;
  for (ConvLayer& l : work.layers()) {
    Stage stage = Stage::Encoder;
    if (l.name == "bottleneck") stage = Stage::Bottleneck;
    else if (l.name.rfind("kp_", 0) == 0) stage = Stage::Keypoint;
    else if (l.name.rfind("score_", 0) == 0) stage = Stage::Score;
    auto probe = [&](double& x) {
      const double x0 = x;
      const double step = h * std::max(1.0, std::abs(x0));
      x = x0 + step;
      const double fp = staged_loss(work, stage);
      x = x0 - step;
      const double fm = staged_loss(work, stage);
      x = x0;
      out.numeric[k++] = (fp - fm) / (2.0 * step);
    };
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) probe(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) probe(l.bias[i]);
  }
  const double den = std::max({out.analytic.norm(), out.numeric.norm(), 1e-300});
  out.rel_error = (out.analytic - out.numeric).norm() / den;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

namespace {

struct PerSample {
  bool used = false;
  double loss = 0.0;
  double pose = 0.0;
  Vector grad;
};

}  // namespace

BatchResult total_loss(const std::vector<TrainingPair>& pairs, const ExtractorWeights& weights,
                       const CameraIntrinsics& K, const LossConfig& cfg, bool with_gradient) {
  cfg.validate();
  std::vector<PerSample> per(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    Tape tape;
    const WeightNodes nodes = register_weights(tape, weights, with_gradient);
    const SampleLoss sl = record_sample_loss(tape, nodes, weights, pairs[i], K, cfg);
    if (sl.skipped) return;
    PerSample& r = per[i];
    if (with_gradient) {
      try {
        r.grad = flatten_gradient(tape.backward(sl.total), nodes, weights);
      } catch (const DegenerateGradient&) {
        return;
      }
    }
    r.used = true;
    r.loss = tape.value(sl.total)(0, 0);
    r.pose = sl.pose;
  });

  BatchResult out;
  out.gradient = Vector::Zero(static_cast<Eigen::Index>(weights.parameter_count()));
  for (const PerSample& r : per) {
    if (!r.used) {
      ++out.skipped;
      continue;
    }
    ++out.used;
    out.loss += r.loss;
    out.pose += r.pose;
    if (with_gradient) out.gradient += r.grad;
  }
  if (out.used > 0) {
    const double inv = 1.0 / out.used;
    out.loss *= inv;
    out.pose *= inv;
    out.gradient *= inv;
  }
  return out;
}

EvalResult evaluate(const std::vector<TrainingPair>& pairs, const ExtractorWeights& weights,
                    const CameraIntrinsics& K, const LossConfig& cfg) {
  cfg.validate();
  struct Row {
    double loss = 0.0, pose = 0.0, err = 0.0;
    bool skipped = false;
  };
  std::vector<Row> rows(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    Tape tape;
    const WeightNodes nodes = register_weights(tape, weights, false);
    const SampleLoss sl = record_sample_loss(tape, nodes, weights, pairs[i], K, cfg);
    Row& r = rows[i];
    if (sl.skipped) {
      r.skipped = true;
      r.pose = pose_loss(PlanarPose{}, pairs[i].gt, cfg.lambda);
      r.loss = r.pose;
      r.err = planar_translation_error(PlanarPose{}, pairs[i].gt);
      return;
    }
    r.loss = tape.value(sl.total)(0, 0);
    r.pose = sl.pose;
    r.err = planar_translation_error(sl.estimate, pairs[i].gt);
  });
  EvalResult out;
  if (rows.empty()) return out;
  for (const Row& r : rows) {
    out.loss += r.loss;
    out.pose_loss += r.pose;
    out.pose_error += r.err;
    out.skipped += r.skipped ? 1 : 0;
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  out.loss *= inv;
  out.pose_loss *= inv;
  out.pose_error *= inv;
  return out;
}

TrainResult train(const Dataset& data, const ExtractorWeights& init, const TrainConfig& tc, const LossConfig& lc,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  tc.validate();
  lc.validate();
  if (data.train.empty()) throw ConfigError("train: empty training set");
  if (data.val.empty()) throw ConfigError("train: empty validation set");

  std::vector<TrainingPair> train_pairs, val_pairs;
  for (const Sample& s : data.train) train_pairs.push_back(training_pair(s));
  for (const Sample& s : data.val) val_pairs.push_back(training_pair(s));

  ExtractorWeights current = init;
  Vector params = current.flatten();
  AdamState adam;
  const double lr = tc.freeze_weights ? 0.0 : tc.learning_rate;

  TrainResult result;
  auto record = [&](const EpochRecord& rec) {
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  };

  EpochRecord first;
  first.epoch = 0;
  first.train_loss = evaluate(train_pairs, current, data.K, lc).loss;
  {
    const EvalResult v = evaluate(val_pairs, current, data.K, lc);
    first.val_loss = v.loss;
    first.val_pose_loss = v.pose_loss;
    first.val_pose_err = v.pose_error;
  }
  record(first);
  result.best = current;
  auto watched = [&](const EpochRecord& r) { return tc.stop_metric == StopMetric::pose ? r.val_pose_loss : r.val_loss; };
  double best = watched(first);
  int stale = 0;

  std::vector<std::size_t> order(train_pairs.size());
  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(io::derive_seed(tc.seed, 10, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double loss_sum = 0.0;
    int used = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<TrainingPair> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size)); ++j)
        batch.push_back(train_pairs[order[j]]);
      const BatchResult b = total_loss(batch, current, data.K, lc, true);
      if (b.used == 0) continue;
      loss_sum += b.loss * b.used;
      used += b.used;
      adam_step(params, b.gradient, adam, lr);
      current.assign(params);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = used > 0 ? loss_sum / used : std::nan("");
    const EvalResult v = evaluate(val_pairs, current, data.K, lc);
    rec.val_loss = v.loss;
    rec.val_pose_loss = v.pose_loss;
    rec.val_pose_err = v.pose_error;
    record(rec);
    result.stopped_epoch = epoch;

    if (watched(rec) < best) {
      best = watched(rec);
      result.best = current;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= tc.early_stop_patience) {
      break;
    }
  }
  return result;
}

std::string to_string(StopMetric m) { return m == StopMetric::pose ? "pose" : "total"; }

StopMetric parse_stop_metric(const std::string& s) {
  if (s == "pose") return StopMetric::pose;
  if (s == "total") return StopMetric::total;
  throw ConfigError("unknown stop metric '" + s + "' (expected pose or total)");
}

std::string loss_curve_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss,val_pose_err,val_pose_loss\n";
  for (const EpochRecord& r : history)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_pose_err << ',' << r.val_pose_loss
       << '\n';
  return os.str();
}

void save_checkpoint(const fs::path& dir, const ExtractorWeights& weights, double tau) {
  const NetworkConfig& cfg = weights.config();
  io::json layers = io::json::array();
  for (const ConvLayer& l : weights.layers()) {
    std::vector<float> blob;
    blob.reserve(static_cast<std::size_t>(l.weight.size() + l.bias.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) blob.push_back(static_cast<float>(l.weight(r, c)));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) blob.push_back(static_cast<float>(l.bias[r]));
    const std::string file = l.name + ".f32";
    io::write_f32(dir / file, blob);
    layers.push_back({{"name", l.name},
                      {"in_channels", l.in_channels},
                      {"out_channels", l.out_channels},
                      {"weight_shape", {l.out_channels, l.in_channels, 3, 3}},
                      {"bias_shape", {l.out_channels}},
                      {"blob", file}});
  }
  io::json m = {{"format", "vtrfeat-checkpoint"},
                {"version", 1},
                {"channels", cfg.channels},
                {"window", cfg.window},
                {"activation", cfg.activation},
                {"seed", cfg.seed},
                {"descriptor_dim", cfg.descriptor_dim()},
                {"tau", tau},
                {"layers", layers}};
  io::write_json(dir / "manifest.json", m);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const io::json m = io::read_json(dir / "manifest.json");
  Checkpoint ck;
  try {
    if (m.at("format").get<std::string>() != "vtrfeat-checkpoint")
      throw IoError("not a checkpoint: " + (dir / "manifest.json").string());
    NetworkConfig cfg;
    cfg.channels = m.at("channels").get<std::vector<int>>();
    cfg.window = m.at("window").get<int>();
    cfg.activation = m.at("activation").get<std::string>();
    cfg.seed = m.at("seed").get<std::uint64_t>();
    if (cfg.activation != "tanh") throw IoError("unsupported activation '" + cfg.activation + "'");
    ck.tau = m.at("tau").get<double>();
    ck.weights = ExtractorWeights::zeros(cfg);
    const io::json& layers = m.at("layers");
    auto& dst = ck.weights.layers();
    if (layers.size() != dst.size()) throw IoError("checkpoint layer count mismatch in " + dir.string());
    for (std::size_t i = 0; i < dst.size(); ++i) {
      ConvLayer& l = dst[i];
      const io::json& e = layers[i];
      if (e.at("name").get<std::string>() != l.name || e.at("in_channels").get<int>() != l.in_channels ||
          e.at("out_channels").get<int>() != l.out_channels)
        throw IoError("checkpoint layer " + std::to_string(i) + " does not match the network config");
      const fs::path blob_path = dir / e.at("blob").get<std::string>();
      const std::vector<float> blob = io::read_f32(blob_path);
      if (blob.size() != static_cast<std::size_t>(l.weight.size() + l.bias.size()))
        throw IoError("unexpected blob size in " + blob_path.string());
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = blob[k++];
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = blob[k++];
    }
  } catch (const io::json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  if (!ck.weights.consistent()) throw IoError("checkpoint has non-finite values: " + dir.string());
  return ck;
}

}  // namespace vtrfeat
