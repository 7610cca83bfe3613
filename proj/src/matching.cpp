#include "vtrfeat/matching.hpp"

#include <cmath>
#include <memory>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/parallel.hpp"

namespace vtrfeat {

namespace {

constexpr double kVarianceFloor = 1e-12;

// Columns centred and scaled to unit norm, so zncc(a, b) = a_hat . b_hat.
struct NormalizedCols {
  Matrix unit;   // D x M
  Vector norm;   // M, zero for zero-variance columns
};

NormalizedCols normalize_cols(const Matrix& x) {
  NormalizedCols out{Matrix(x.rows(), x.cols()), Vector(x.cols())};
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    out.unit.col(j) = x.col(j).array() - mean;
    const double n = out.unit.col(j).norm();
    if (n > kVarianceFloor) {
      out.unit.col(j) /= n;
      out.norm[j] = n;
    } else {
      out.unit.col(j).setZero();
      out.norm[j] = 0.0;
    }
  }
  return out;
}

// Adjoint of column normalization: given dL/d(unit), returns dL/dx.
Matrix normalize_cols_backward(const NormalizedCols& nc, const Matrix& g_unit) {
  Matrix gx(g_unit.rows(), g_unit.cols());
  for (Eigen::Index j = 0; j < g_unit.cols(); ++j) {
    if (nc.norm[j] == 0.0) {
      gx.col(j).setZero();
      continue;
    }
    const auto u = nc.unit.col(j);
    Vector gc = (g_unit.col(j) - u * u.dot(g_unit.col(j))) / nc.norm[j];
    gx.col(j) = gc.array() - gc.mean();
  }
  return gx;
}

Matrix gather_pixels(const Matrix& map, int width, int height, int stride) {
  if (stride == 1) return map;
  const int nx = (width + stride - 1) / stride, ny = (height + stride - 1) / stride;
  Matrix out(map.rows(), nx * ny);
  for (int y = 0, k = 0; y < height; y += stride)
    for (int x = 0; x < width; x += stride) out.col(k++) = map.col(y * width + x);
  return out;
}

void check_cfg(const MatchConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw ConfigError("matching: tau must be positive");
  if (cfg.stride < 1) throw ConfigError("matching: stride must be >= 1");
}

// Shared dense-matching forward: probabilities and expected coordinates.
struct DenseMatch {
  NormalizedCols src;  // D x N
  NormalizedCols tgt;  // D x M
  Matrix prob;         // N x M
  Matrix points;       // N x 2
};

DenseMatch dense_match(const Matrix& source_descriptors, const Matrix& target_map, int width, int height,
                       const MatchConfig& cfg, const Matrix& coords) {
  check_cfg(cfg);
  if (source_descriptors.cols() != target_map.rows())
    throw ShapeError("matching: source and target descriptor dimensions differ");
  if (target_map.cols() != static_cast<Eigen::Index>(width) * height)
    throw ShapeError("matching: target map does not match width * height");
  DenseMatch m;
  m.src = normalize_cols(source_descriptors.transpose());
  m.tgt = normalize_cols(gather_pixels(target_map, width, height, cfg.stride));
  m.prob = cfg.tau * (m.src.unit.transpose() * m.tgt.unit);
  for (Eigen::Index i = 0; i < m.prob.rows(); ++i) {
    const double mx = m.prob.row(i).maxCoeff();
    m.prob.row(i) = (m.prob.row(i).array() - mx).exp().matrix();
    m.prob.row(i) /= m.prob.row(i).sum();
  }
  m.points = m.prob * coords;
  return m;
}

}  // namespace

double zncc(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (a.size() != b.size()) throw ShapeError("zncc: length mismatch");
  if (a.size() < 2) throw ShapeError("zncc: need at least 2 elements");
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double na = ca.norm(), nb = cb.norm();
  if (na <= kVarianceFloor || nb <= kVarianceFloor) return 0.0;
  return ca.dot(cb) / (na * nb);
}

Matrix target_pixel_coords(int width, int height, int stride) {
  const int nx = (width + stride - 1) / stride, ny = (height + stride - 1) / stride;
  Matrix c(nx * ny, 2);
  int k = 0;
  for (int y = 0; y < height; y += stride)
    for (int x = 0; x < width; x += stride) {
      c(k, 0) = x;
      c(k, 1) = y;
      ++k;
    }
  return c;
}

Matrix match_probabilities(const Matrix& source_descriptors, const DenseFeatureMap& target,
                           const MatchConfig& cfg) {
  const Matrix coords = target_pixel_coords(target.width, target.height, cfg.stride);
  return dense_match(source_descriptors, target.descriptors, target.width, target.height, cfg, coords).prob;
}

SoftMatch soft_match(const Vector& source_descriptor, const DenseFeatureMap& target, const MatchConfig& cfg) {
  const Matrix coords = target_pixel_coords(target.width, target.height, cfg.stride);
  const DenseMatch m =
      dense_match(source_descriptor.transpose(), target.descriptors, target.width, target.height, cfg, coords);
  SoftMatch out;
  out.point = m.points.row(0).transpose();
  out.descriptor = bilinear_sample(target.descriptors, target.width, target.height, out.point.x(), out.point.y());
  out.score = bilinear_sample(target.scores, target.width, target.height, out.point.x(), out.point.y())[0];
  return out;
}

Vector match_weights(const MatchSet& m) {
  const Eigen::Index n = m.source.coords.rows();
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = zncc(m.source.descriptors.row(i).transpose(), m.target_descriptors.row(i).transpose());
    w[i] = 0.5 * (z + 1.0) * m.source.scores[i] * m.target_scores[i];
  }
  return w;
}

MatchSet match_all(const KeypointSet& source, const DenseFeatureMap& target, const MatchConfig& cfg) {
  check_cfg(cfg);
  if (source.descriptors.cols() != target.descriptors.rows())
    throw ShapeError("match_all: descriptor dimensions differ");
  const Eigen::Index n = source.coords.rows();
  const Matrix coords = target_pixel_coords(target.width, target.height, cfg.stride);
  const NormalizedCols tgt = normalize_cols(gather_pixels(target.descriptors, target.width, target.height, cfg.stride));

  MatchSet m;
  m.source = source;
  m.target_points.resize(n, 2);
  m.target_descriptors.resize(n, target.descriptors.rows());
  m.target_scores.resize(n);

  // Per-keypoint work is independent; rows are written by index.
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t k) {
    const auto i = static_cast<Eigen::Index>(k);
    const NormalizedCols src = normalize_cols(source.descriptors.row(i).transpose());
    Eigen::RowVectorXd s = cfg.tau * (src.unit.transpose() * tgt.unit);
    const double mx = s.maxCoeff();
    s = (s.array() - mx).exp().matrix();
    s /= s.sum();
    const Eigen::RowVector2d q = s * coords;
    m.target_points.row(i) = q;
    m.target_descriptors.row(i) =
        bilinear_sample(target.descriptors, target.width, target.height, q.x(), q.y()).transpose();
    m.target_scores[i] = bilinear_sample(target.scores, target.width, target.height, q.x(), q.y())[0];
  });
  m.weights = match_weights(m);
  return m;
}

namespace ad {

NodeId zncc_rows(Tape& t, NodeId a, NodeId b) {
  const Matrix& x = t.value(a);
  const Matrix& y = t.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ShapeError("zncc_rows: shapes differ");
  auto na = std::make_shared<NormalizedCols>(normalize_cols(x.transpose()));
  auto nb = std::make_shared<NormalizedCols>(normalize_cols(y.transpose()));
  Matrix z = (na->unit.cwiseProduct(nb->unit)).colwise().sum().transpose();
  return t.record("zncc", std::move(z), {a, b}, [a, b, na, nb](const Matrix& g, Tape& tp) {
    // g: N x 1; d z_i / d a_hat_i = b_hat_i.
    const Matrix gs = g.col(0).transpose().replicate(na->unit.rows(), 1);
    if (tp.requires_grad(a))
      tp.accumulate(a, normalize_cols_backward(*na, nb->unit.cwiseProduct(gs)).transpose());
    if (tp.requires_grad(b))
      tp.accumulate(b, normalize_cols_backward(*nb, na->unit.cwiseProduct(gs)).transpose());
  });
}

NodeId soft_match_points(Tape& t, NodeId source_descriptors, NodeId target_map, int width, int height,
                         const MatchConfig& cfg) {
  auto coords = std::make_shared<Matrix>(target_pixel_coords(width, height, cfg.stride));
  auto m = std::make_shared<DenseMatch>(
      dense_match(t.value(source_descriptors), t.value(target_map), width, height, cfg, *coords));
  Matrix points = m->points;
  const double tau = cfg.tau;
  const int stride = cfg.stride;
  return t.record(
      "soft_match", std::move(points), {source_descriptors, target_map},
      [source_descriptors, target_map, coords, m, tau, width, height, stride](const Matrix& g, Tape& tp) {
        // q = P C; P = softmax(tau * A^T B) row-wise.
        const Matrix gp = g * coords->transpose();  // N x M
        Matrix gs(gp.rows(), gp.cols());
        for (Eigen::Index i = 0; i < gp.rows(); ++i) {
          const double dot = m->prob.row(i).dot(gp.row(i));
          gs.row(i) = m->prob.row(i).cwiseProduct((gp.row(i).array() - dot).matrix());
        }
        gs *= tau;
        if (tp.requires_grad(source_descriptors)) {
          const Matrix g_src_unit = m->tgt.unit * gs.transpose();  // D x N
          tp.accumulate(source_descriptors, normalize_cols_backward(m->src, g_src_unit).transpose());
        }
        if (tp.requires_grad(target_map)) {
          const Matrix g_tgt_unit = m->src.unit * gs;  // D x M
          const Matrix g_sub = normalize_cols_backward(m->tgt, g_tgt_unit);
          if (stride == 1) {
            tp.accumulate(target_map, g_sub);
          } else {
            Matrix full = Matrix::Zero(g_sub.rows(), static_cast<Eigen::Index>(width) * height);
            for (int y = 0, k = 0; y < height; y += stride)
              for (int x = 0; x < width; x += stride) full.col(y * width + x) = g_sub.col(k++);
            tp.accumulate(target_map, full);
          }
        }
      });
}

NodeId match_weights(Tape& t, NodeId zncc, NodeId source_scores, NodeId target_scores) {
  const Matrix& z = t.value(zncc);
  const Matrix& ss = t.value(source_scores);
  const Matrix& st = t.value(target_scores);
  if (z.cols() != 1 || ss.rows() != z.rows() || st.rows() != z.rows() || ss.cols() != 1 || st.cols() != 1)
    throw ShapeError("match_weights: expected N x 1 inputs");
  Matrix w = (0.5 * (z.array() + 1.0) * ss.array() * st.array()).matrix();
  return t.record("match_weights", std::move(w), {zncc, source_scores, target_scores},
                  [zncc, source_scores, target_scores](const Matrix& g, Tape& tp) {
                    const auto z = tp.value(zncc).array();
                    const auto ss = tp.value(source_scores).array();
                    const auto st = tp.value(target_scores).array();
                    const auto ga = g.array();
                    if (tp.requires_grad(zncc)) tp.accumulate(zncc, (0.5 * ga * ss * st).matrix());
                    if (tp.requires_grad(source_scores))
                      tp.accumulate(source_scores, (0.5 * ga * (z + 1.0) * st).matrix());
                    if (tp.requires_grad(target_scores))
                      tp.accumulate(target_scores, (0.5 * ga * (z + 1.0) * ss).matrix());
                  });
}

}  // namespace ad

}  // namespace vtrfeat
