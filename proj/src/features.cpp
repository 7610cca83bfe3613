#include "vtrfeat/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "vtrfeat/errors.hpp"

namespace vtrfeat {

namespace {

constexpr int kTaps = 9;

std::vector<ConvLayer> make_layers(const NetworkConfig& cfg) {
  if (cfg.channels.empty()) throw ConfigError("network: at least one encoder block required");
  for (int c : cfg.channels)
    if (c <= 0) throw ConfigError("network: channel counts must be positive");
  if (cfg.activation != "tanh") throw ConfigError("network: unsupported activation '" + cfg.activation + "'");

  const auto& ch = cfg.channels;
  const int k = static_cast<int>(ch.size());
  std::vector<ConvLayer> layers;
  auto add = [&](std::string name, int in, int out) {
    ConvLayer l;
    l.name = std::move(name);
    l.in_channels = in;
    l.out_channels = out;
    l.weight = Matrix::Zero(out, in * kTaps);
    l.bias = Vector::Zero(out);
    layers.push_back(std::move(l));
  };
  int in = 1;
  for (int i = 0; i < k; ++i) {
    add("enc" + std::to_string(i), in, ch[i]);
    in = ch[i];
  }
  add("bottleneck", ch[k - 1], ch[k - 1]);
  for (const std::string branch : {"kp", "score"}) {
    int c = ch[k - 1];
    for (int j = 0; j + 1 < k; ++j) {
      add(branch + "_dec" + std::to_string(j), c, ch[k - 2 - j]);
      c = ch[k - 2 - j];
    }
    add(branch + "_head", c, 1);
  }
  return layers;
}

// (index, weight) taps for one output pixel of a bilinear resize.
struct ResizeTap {
  int idx[4];
  double w[4];
};

std::vector<ResizeTap> resize_taps(int w, int h, int ow, int oh) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(ow) * oh);
  const double sx = static_cast<double>(w) / ow;
  const double sy = static_cast<double>(h) / oh;
  for (int y = 0; y < oh; ++y) {
    const double fy_src = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(std::floor(fy_src));
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = fy_src - y0;
    for (int x = 0; x < ow; ++x) {
      const double fx_src = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(std::floor(fx_src));
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = fx_src - x0;
      ResizeTap& t = taps[static_cast<std::size_t>(y) * ow + x];
      t.idx[0] = y0 * w + x0;
      t.idx[1] = y0 * w + x1;
      t.idx[2] = y1 * w + x0;
      t.idx[3] = y1 * w + x1;
      t.w[0] = (1 - fx) * (1 - fy);
      t.w[1] = fx * (1 - fy);
      t.w[2] = (1 - fx) * fy;
      t.w[3] = fx * fy;
    }
  }
  return taps;
}

// Rows of the transposed im2col matrix: colsT(p, c*9 + k).
Matrix im2col_t(const Matrix& x, int w, int h) {
  const int cin = static_cast<int>(x.rows());
  const Matrix xt = x.transpose();  // HW x C, one contiguous column per channel
  Matrix cols(static_cast<Eigen::Index>(w) * h, cin * kTaps);
  for (int c = 0; c < cin; ++c) {
    const double* src = xt.col(c).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = cols.col(c * kTaps + ky * 3 + kx).data();
        const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
        for (int y = 0; y < h; ++y) {
          double* row = dst + y * w;
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) {
            std::fill(row, row + w, 0.0);
            continue;
          }
          const double* s = src + sy * w + (kx - 1);
          for (int xx = 0; xx < x0; ++xx) row[xx] = 0.0;
          for (int xx = x0; xx < x1; ++xx) row[xx] = s[xx];
          for (int xx = x1; xx < w; ++xx) row[xx] = 0.0;
        }
      }
    }
  }
  return cols;
}

Matrix col2im_t(const Matrix& cols, int cin, int w, int h) {
  Matrix xt = Matrix::Zero(static_cast<Eigen::Index>(w) * h, cin);
  for (int c = 0; c < cin; ++c) {
    double* dst = xt.col(c).data();
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = cols.col(c * kTaps + ky * 3 + kx).data();
        const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          double* d = dst + sy * w + (kx - 1);
          const double* r = src + y * w;
          for (int xx = x0; xx < x1; ++xx) d[xx] += r[xx];
        }
      }
    }
  }
  return xt.transpose();
}

void check_map(const Matrix& m, int w, int h, const char* op) {
  if (m.cols() != static_cast<Eigen::Index>(w) * h)
    throw ShapeError(std::string(op) + ": map size does not match width * height");
}

// Locates the bilinear cell for a coordinate in [0, n-1]; n >= 2.
inline void cell(double q, int n, int& i0, double& f) {
  i0 = std::min(static_cast<int>(std::floor(q)), n - 2);
  i0 = std::max(i0, 0);
  f = q - i0;
}

void check_inside(double u, double v, int w, int h) {
  if (!(u >= 0.0 && u <= w - 1 && v >= 0.0 && v <= h - 1))
    throw OutOfBounds("bilinear_sample: point (" + std::to_string(u) + ", " + std::to_string(v) +
                      ") outside the image");
}

}  // namespace

int NetworkConfig::descriptor_dim() const {
  int d = 0;
  for (int c : channels) d += c;
  return d;
}

ExtractorWeights ExtractorWeights::zeros(const NetworkConfig& config) {
  ExtractorWeights w;
  w.config_ = config;
  w.layers_ = make_layers(config);
  return w;
}

ExtractorWeights ExtractorWeights::initialize(const NetworkConfig& config) {
  ExtractorWeights w = zeros(config);
  std::mt19937_64 rng(config.seed);
  for (ConvLayer& l : w.layers_) {
    const double bound = std::sqrt(1.0 / (l.in_channels * kTaps));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = dist(rng);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = dist(rng);
  }
  return w;
}

const ConvLayer& ExtractorWeights::layer(const std::string& name) const {
  for (const ConvLayer& l : layers_)
    if (l.name == name) return l;
  throw ConfigError("network: no layer named '" + name + "'");
}

std::size_t ExtractorWeights::parameter_count() const {
  std::size_t n = 0;
  for (const ConvLayer& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Vector ExtractorWeights::flatten() const {
  Vector flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index k = 0;
  for (const ConvLayer& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) flat[k++] = l.weight.data()[i];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) flat[k++] = l.bias[i];
  }
  return flat;
}

void ExtractorWeights::assign(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
    throw ShapeError("ExtractorWeights::assign: wrong parameter count");
  Eigen::Index k = 0;
  for (ConvLayer& l : layers_) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = flat[k++];
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = flat[k++];
  }
}

bool ExtractorWeights::consistent() const {
  std::vector<ConvLayer> expected;
  try {
    expected = make_layers(config_);
  } catch (const Error&) {
    return false;
  }
  if (expected.size() != layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const ConvLayer& a = layers_[i];
    const ConvLayer& b = expected[i];
    if (a.name != b.name || a.in_channels != b.in_channels || a.out_channels != b.out_channels ||
        a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() ||
        a.bias.size() != b.bias.size())
      return false;
    if (!a.weight.allFinite() || !a.bias.allFinite()) return false;
  }
  return true;
}

bool DenseFeatureMap::consistent() const {
  const Eigen::Index hw = static_cast<Eigen::Index>(width) * height;
  if (descriptors.cols() != hw || scores.rows() != 1 || scores.cols() != hw || logits.rows() != 1 ||
      logits.cols() != hw)
    return false;
  return scores.minCoeff() >= 0.0 && scores.maxCoeff() <= 1.0;
}

namespace ad {

NodeId conv3x3(Tape& t, NodeId x, NodeId weight, NodeId bias, int width, int height) {
  const Matrix& in = t.value(x);
  const Matrix& W = t.value(weight);
  const Matrix& b = t.value(bias);
  check_map(in, width, height, "conv3x3");
  if (W.cols() != in.rows() * kTaps || b.rows() != W.rows() || b.cols() != 1)
    throw ShapeError("conv3x3: weight/bias shapes do not match input channels");
  const Matrix cols = im2col_t(in, width, height);
  Matrix out = W * cols.transpose();
  out.colwise() += b.col(0);
  return t.record("conv3x3", std::move(out), {x, weight, bias},
                  [x, weight, bias, width, height](const Matrix& g, Tape& tp) {
                    const Matrix& in = tp.value(x);
                    if (tp.requires_grad(weight)) {
                      const Matrix cols = im2col_t(in, width, height);
                      tp.accumulate(weight, g * cols);
                    }
                    if (tp.requires_grad(bias)) tp.accumulate(bias, g.rowwise().sum());
                    if (tp.requires_grad(x)) {
                      const Matrix gcols = g.transpose() * tp.value(weight);
                      tp.accumulate(x, col2im_t(gcols, static_cast<int>(in.rows()), width, height));
                    }
                  });
}

NodeId tanh(Tape& t, NodeId x) {
  // 1 - 2 / (exp(2x) + 1) vectorizes; saturates cleanly to +-1.
  Matrix y = (1.0 - 2.0 / ((2.0 * t.value(x).array()).exp() + 1.0)).matrix();
  const NodeId self{static_cast<int>(t.size())};
  return t.record("tanh", std::move(y), {x}, [x, self](const Matrix& g, Tape& tp) {
    tp.accumulate(x, (g.array() * (1.0 - tp.value(self).array().square())).matrix());
  });
}

NodeId sigmoid(Tape& t, NodeId x) {
  Matrix y = (1.0 / (1.0 + (-t.value(x).array()).exp())).matrix();
  const NodeId self{static_cast<int>(t.size())};
  return t.record("sigmoid", std::move(y), {x}, [x, self](const Matrix& g, Tape& tp) {
    const auto y = tp.value(self).array();
    tp.accumulate(x, (g.array() * y * (1.0 - y)).matrix());
  });
}

NodeId avg_pool2(Tape& t, NodeId x, int width, int height) {
  const Matrix& in = t.value(x);
  check_map(in, width, height, "avg_pool2");
  if (width % 2 || height % 2) throw ShapeError("avg_pool2: width and height must be even");
  const int ow = width / 2, oh = height / 2;
  Matrix out(in.rows(), ow * oh);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      const int p = (2 * y) * width + 2 * xx;
      out.col(y * ow + xx) =
          0.25 * (in.col(p) + in.col(p + 1) + in.col(p + width) + in.col(p + width + 1));
    }
  return t.record("avg_pool2", std::move(out), {x}, [x, width, height](const Matrix& g, Tape& tp) {
    const int ow = width / 2, oh = height / 2;
    Matrix gx(g.rows(), width * height);
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const int p = (2 * y) * width + 2 * xx;
        const auto gq = 0.25 * g.col(y * ow + xx);
        gx.col(p) = gq;
        gx.col(p + 1) = gq;
        gx.col(p + width) = gq;
        gx.col(p + width + 1) = gq;
      }
    tp.accumulate(x, gx);
  });
}

NodeId upsample_nearest2(Tape& t, NodeId x, int width, int height) {
  const Matrix& in = t.value(x);
  check_map(in, width, height, "upsample_nearest2");
  const int ow = width * 2, oh = height * 2;
  Matrix out(in.rows(), ow * oh);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) out.col(y * ow + xx) = in.col((y / 2) * width + xx / 2);
  return t.record("upsample_nearest2", std::move(out), {x},
                  [x, width, height](const Matrix& g, Tape& tp) {
                    const int ow = width * 2, oh = height * 2;
                    Matrix gx = Matrix::Zero(g.rows(), width * height);
                    for (int y = 0; y < oh; ++y)
                      for (int xx = 0; xx < ow; ++xx) gx.col((y / 2) * width + xx / 2) += g.col(y * ow + xx);
                    tp.accumulate(x, gx);
                  });
}

NodeId resize_bilinear(Tape& t, NodeId x, int width, int height, int out_width, int out_height) {
  const Matrix& in = t.value(x);
  check_map(in, width, height, "resize_bilinear");
  auto taps = std::make_shared<std::vector<ResizeTap>>(resize_taps(width, height, out_width, out_height));
  Matrix out(in.rows(), static_cast<Eigen::Index>(taps->size()));
  for (std::size_t p = 0; p < taps->size(); ++p) {
    const ResizeTap& tp = (*taps)[p];
    out.col(static_cast<Eigen::Index>(p)) = tp.w[0] * in.col(tp.idx[0]) + tp.w[1] * in.col(tp.idx[1]) +
                                            tp.w[2] * in.col(tp.idx[2]) + tp.w[3] * in.col(tp.idx[3]);
  }
  const Eigen::Index hw = in.cols();
  return t.record("resize_bilinear", std::move(out), {x}, [x, taps, hw](const Matrix& g, Tape& tp) {
    Matrix gx = Matrix::Zero(g.rows(), hw);
    for (std::size_t p = 0; p < taps->size(); ++p) {
      const ResizeTap& r = (*taps)[p];
      const auto gp = g.col(static_cast<Eigen::Index>(p));
      for (int k = 0; k < 4; ++k) gx.col(r.idx[k]) += r.w[k] * gp;
    }
    tp.accumulate(x, gx);
  });
}

NodeId concat_rows(Tape& t, const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = t.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (NodeId p : parts) {
    if (t.value(p).cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += t.value(p).rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (NodeId p : parts) {
    offsets.push_back(r);
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
  }
  return t.record("concat", std::move(out), parts, [parts, offsets](const Matrix& g, Tape& tp) {
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (tp.requires_grad(parts[i])) tp.accumulate(parts[i], g.middleRows(offsets[i], tp.value(parts[i]).rows()));
  });
}

NodeId window_keypoints(Tape& t, NodeId logits, int width, int height, int window) {
  const Matrix& l = t.value(logits);
  check_map(l, width, height, "window_keypoints");
  if (l.rows() != 1) throw ShapeError("window_keypoints: logits must be a single channel");
  Matrix kp = detect_keypoints(l, width, height, window);
  const NodeId self{static_cast<int>(t.size())};
  return t.record("window_keypoints", std::move(kp), {logits}, [logits, width, height, window, self](const Matrix& g, Tape& tp) {
    const Matrix& kp = tp.value(self);
    const Matrix& l = tp.value(logits);
    Matrix gl = Matrix::Zero(1, l.cols());
    const int nx = width / window, ny = height / window;
    std::vector<double> p(static_cast<std::size_t>(window) * window);
    for (int wy = 0; wy < ny; ++wy)
      for (int wx = 0; wx < nx; ++wx) {
        const int k = wy * nx + wx;
        double m = -std::numeric_limits<double>::infinity();
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x) m = std::max(m, l(0, (wy * window + y) * width + wx * window + x));
        double z = 0.0;
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x) {
            const double e = std::exp(l(0, (wy * window + y) * width + wx * window + x) - m);
            p[static_cast<std::size_t>(y) * window + x] = e;
            z += e;
          }
        // d/dl_j sum_i p_i c_i = p_j (c_j - kp)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x) {
            const double pj = p[static_cast<std::size_t>(y) * window + x] / z;
            const double cu = wx * window + x, cv = wy * window + y;
            gl(0, (wy * window + y) * width + wx * window + x) =
                pj * (g(k, 0) * (cu - kp(k, 0)) + g(k, 1) * (cv - kp(k, 1)));
          }
      }
    tp.accumulate(logits, gl);
  });
}

NodeId bilinear_sample(Tape& t, NodeId map, NodeId points, int width, int height) {
  const Matrix& m = t.value(map);
  const Matrix& q = t.value(points);
  check_map(m, width, height, "bilinear_sample");
  if (q.cols() != 2) throw ShapeError("bilinear_sample: points must be N x 2");
  Matrix out(q.rows(), m.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    out.row(i) = vtrfeat::bilinear_sample(m, width, height, q(i, 0), q(i, 1)).transpose();
  return t.record("bilinear_sample", std::move(out), {map, points},
                  [map, points, width, height](const Matrix& g, Tape& tp) {
                    const Matrix& m = tp.value(map);
                    const Matrix& q = tp.value(points);
                    const bool gm = tp.requires_grad(map);
                    const bool gq = tp.requires_grad(points);
                    Matrix gmap = gm ? Matrix::Zero(m.rows(), m.cols()) : Matrix();
                    Matrix gpts = gq ? Matrix::Zero(q.rows(), 2) : Matrix();
                    for (Eigen::Index i = 0; i < q.rows(); ++i) {
                      int x0, y0;
                      double fx, fy;
                      cell(q(i, 0), width, x0, fx);
                      cell(q(i, 1), height, y0, fy);
                      const int p00 = y0 * width + x0;
                      const int p10 = p00 + 1, p01 = p00 + width, p11 = p00 + width + 1;
                      const auto gi = g.row(i).transpose();
                      if (gm) {
                        gmap.col(p00) += (1 - fx) * (1 - fy) * gi;
                        gmap.col(p10) += fx * (1 - fy) * gi;
                        gmap.col(p01) += (1 - fx) * fy * gi;
                        gmap.col(p11) += fx * fy * gi;
                      }
                      if (gq) {
                        const auto du = (1 - fy) * (m.col(p10) - m.col(p00)) + fy * (m.col(p11) - m.col(p01));
                        const auto dv = (1 - fx) * (m.col(p01) - m.col(p00)) + fx * (m.col(p11) - m.col(p10));
                        gpts(i, 0) = gi.dot(du);
                        gpts(i, 1) = gi.dot(dv);
                      }
                    }
                    if (gm) tp.accumulate(map, gmap);
                    if (gq) tp.accumulate(points, gpts);
                  });
}

}  // namespace ad

Vector bilinear_sample(const Matrix& map, int width, int height, double u, double v) {
  check_map(map, width, height, "bilinear_sample");
  if (width < 2 || height < 2) throw ShapeError("bilinear_sample: map must be at least 2 x 2");
  check_inside(u, v, width, height);
  int x0, y0;
  double fx, fy;
  cell(u, width, x0, fx);
  cell(v, height, y0, fy);
  const int p00 = y0 * width + x0;
  return (1 - fx) * (1 - fy) * map.col(p00) + fx * (1 - fy) * map.col(p00 + 1) +
         (1 - fx) * fy * map.col(p00 + width) + fx * fy * map.col(p00 + width + 1);
}

Matrix detect_keypoints(const Matrix& logits, int width, int height, int window) {
  check_map(logits, width, height, "detect_keypoints");
  if (window <= 0 || width % window || height % window)
    throw ShapeError("detect_keypoints: window must divide width and height");
  const int nx = width / window, ny = height / window;
  Matrix kp(nx * ny, 2);
  for (int wy = 0; wy < ny; ++wy)
    for (int wx = 0; wx < nx; ++wx) {
      double m = -std::numeric_limits<double>::infinity();
      for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x) m = std::max(m, logits(0, (wy * window + y) * width + wx * window + x));
      double z = 0.0, su = 0.0, sv = 0.0;
      for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x) {
          const double e = std::exp(logits(0, (wy * window + y) * width + wx * window + x) - m);
          z += e;
          su += e * (wx * window + x);
          sv += e * (wy * window + y);
        }
      kp(wy * nx + wx, 0) = su / z;
      kp(wy * nx + wx, 1) = sv / z;
    }
  return kp;
}

WeightNodes register_weights(Tape& tape, const ExtractorWeights& weights, bool trainable) {
  WeightNodes n;
  for (const ConvLayer& l : weights.layers()) {
    Matrix b = l.bias;
    if (trainable) {
      n.weight.push_back(tape.parameter(l.weight));
      n.bias.push_back(tape.parameter(std::move(b)));
    } else {
      n.weight.push_back(tape.constant(l.weight));
      n.bias.push_back(tape.constant(std::move(b)));
    }
  }
  return n;
}

namespace {

void check_forward(const WeightNodes& nodes, const ExtractorWeights& weights, int width, int height) {
  const int factor = 1 << weights.config().encoder_blocks();
  if (width <= 0 || height <= 0 || width % factor || height % factor)
    throw ShapeError("forward: image size must be divisible by " + std::to_string(factor));
  if (nodes.weight.size() != weights.layers().size()) throw ShapeError("forward: weight nodes do not match layers");
}

NodeId conv_layer(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights, NodeId x,
                  const std::string& name, int w, int h) {
  const auto& layers = weights.layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return ad::conv3x3(tape, x, nodes.weight[i], nodes.bias[i], w, h);
  throw ConfigError("forward: missing layer " + name);
}

}  // namespace

EncoderNodes forward_encoder(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                             const Image& image) {
  check_forward(nodes, weights, image.width, image.height);
  const int k = weights.config().encoder_blocks();
  const int W = image.width, H = image.height;

  // Per-image standardization of the input intensities.
  Matrix in(1, static_cast<Eigen::Index>(W) * H);
  double mean = 0.0;
  for (float v : image.data) mean += v;
  mean /= static_cast<double>(image.data.size());
  double var = 0.0;
  for (float v : image.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(image.data.size()));
  const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
  for (std::size_t p = 0; p < image.data.size(); ++p)
    in(0, static_cast<Eigen::Index>(p)) = (image.data[p] - mean) * inv;

  NodeId x = tape.constant(std::move(in));
  int w = W, h = H;
  std::vector<NodeId> resized;
  for (int i = 0; i < k; ++i) {
    NodeId e = ad::tanh(tape, conv_layer(tape, nodes, weights, x, "enc" + std::to_string(i), w, h));
    resized.push_back(w == W ? e : ad::resize_bilinear(tape, e, w, h, W, H));
    x = ad::avg_pool2(tape, e, w, h);
    w /= 2;
    h /= 2;
  }
  return {W, H, ad::concat_rows(tape, resized), x};
}

NodeId forward_bottleneck(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights, NodeId pooled,
                          int width, int height) {
  check_forward(nodes, weights, width, height);
  const int f = 1 << weights.config().encoder_blocks();
  return ad::tanh(tape, conv_layer(tape, nodes, weights, pooled, "bottleneck", width / f, height / f));
}

NodeId forward_branch(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                      const std::string& branch, NodeId bottleneck, int width, int height) {
  check_forward(nodes, weights, width, height);
  if (branch != "kp" && branch != "score") throw ConfigError("forward: unknown branch " + branch);
  const int k = weights.config().encoder_blocks();
  NodeId y = bottleneck;
  int w = width >> k, h = height >> k;
  for (int j = 0; j < k; ++j) {
    y = ad::upsample_nearest2(tape, y, w, h);
    w *= 2;
    h *= 2;
    if (j + 1 < k) y = ad::tanh(tape, conv_layer(tape, nodes, weights, y, branch + "_dec" + std::to_string(j), w, h));
  }
  const NodeId head = conv_layer(tape, nodes, weights, y, branch + "_head", w, h);
  return branch == "score" ? ad::sigmoid(tape, head) : head;
}

FeatureNodes forward(Tape& tape, const WeightNodes& nodes, const ExtractorWeights& weights,
                     const Image& image, bool need_logits) {
  const EncoderNodes enc = forward_encoder(tape, nodes, weights, image);
  const NodeId b = forward_bottleneck(tape, nodes, weights, enc.pooled, enc.width, enc.height);
  FeatureNodes out;
  out.width = enc.width;
  out.height = enc.height;
  out.descriptors = enc.descriptors;
  out.scores = forward_branch(tape, nodes, weights, "score", b, enc.width, enc.height);
  if (need_logits) out.logits = forward_branch(tape, nodes, weights, "kp", b, enc.width, enc.height);
  return out;
}

DenseFeatureMap forward(const Image& image, const ExtractorWeights& weights) {
  Tape tape;
  const WeightNodes nodes = register_weights(tape, weights, false);
  const FeatureNodes f = forward(tape, nodes, weights, image, true);
  DenseFeatureMap m;
  m.width = f.width;
  m.height = f.height;
  m.descriptors = tape.value(f.descriptors);
  m.scores = tape.value(f.scores);
  m.logits = tape.value(f.logits);
  return m;
}

KeypointSet extract_keypoints(const DenseFeatureMap& features, int window) {
  KeypointSet ks;
  ks.coords = detect_keypoints(features.logits, features.width, features.height, window);
  const Eigen::Index n = ks.coords.rows();
  ks.descriptors.resize(n, features.descriptors.rows());
  ks.scores.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = ks.coords(i, 0), v = ks.coords(i, 1);
    ks.descriptors.row(i) = bilinear_sample(features.descriptors, features.width, features.height, u, v).transpose();
    ks.scores[i] = bilinear_sample(features.scores, features.width, features.height, u, v)[0];
  }
  return ks;
}

// ---------------------------------------------------------------------------
// Analytic features.

namespace {

constexpr int kScales[3] = {1, 2, 4};
constexpr int kGrid = 3;

// Box mean over a (2r+1)^2 neighbourhood with edge clamping.
std::vector<double> box_mean(const std::vector<double>& img, int w, int h, int r) {
  std::vector<double> tmp(img.size()), out(img.size());
  const double norm = 1.0 / (2 * r + 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -r; d <= r; ++d) s += img[static_cast<std::size_t>(y) * w + std::clamp(x + d, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = s * norm;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -r; d <= r; ++d) s += tmp[static_cast<std::size_t>(std::clamp(y + d, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = s * norm;
    }
  return out;
}

// Zero mean, unit norm; zero-variance groups become zero.
void zero_normalize(double* v, int n) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += v[i];
  mean /= n;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    v[i] -= mean;
    ss += v[i] * v[i];
  }
  const double norm = std::sqrt(ss);
  const double scale = norm > 1e-12 ? 1.0 / norm : 0.0;
  for (int i = 0; i < n; ++i) v[i] *= scale;
}

}  // namespace

int analytic_descriptor_dim() { return 3 * (kGrid * kGrid * 3); }

DenseFeatureMap analytic_features(const Image& image) {
  const int w = image.width, h = image.height;
  if (w < 2 || h < 2) throw ShapeError("analytic_features: image too small");
  std::vector<double> img(image.data.begin(), image.data.end());
  const int dim = analytic_descriptor_dim();

  DenseFeatureMap f;
  f.width = w;
  f.height = h;
  f.descriptors = Matrix::Zero(dim, static_cast<Eigen::Index>(w) * h);
  f.scores = Matrix::Zero(1, static_cast<Eigen::Index>(w) * h);
  f.logits = Matrix::Zero(1, static_cast<Eigen::Index>(w) * h);

  auto at = [&](const std::vector<double>& m, int x, int y) {
    return m[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
  };

  int offset = 0;
  for (int s : kScales) {
    const std::vector<double> B = box_mean(img, w, h, s);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double* d = f.descriptors.col(y * w + x).data() + offset;
        int k = 0;
        for (int gy = -1; gy <= 1; ++gy)
          for (int gx = -1; gx <= 1; ++gx) d[k++] = at(B, x + 2 * s * gx, y + 2 * s * gy);
        zero_normalize(d, kGrid * kGrid);
        double* gr = d + kGrid * kGrid;
        k = 0;
        for (int gy = -1; gy <= 1; ++gy)
          for (int gx = -1; gx <= 1; ++gx) {
            const int cx = x + 2 * s * gx, cy = y + 2 * s * gy;
            gr[k] = at(B, cx + s, cy) - at(B, cx - s, cy);
            gr[k + kGrid * kGrid] = at(B, cx, cy + s) - at(B, cx, cy - s);
            ++k;
          }
        zero_normalize(gr, 2 * kGrid * kGrid);
      }
    offset += 3 * kGrid * kGrid;
  }

  // Scores: gradient magnitude at the finest scale, normalized by its maximum.
  const std::vector<double> B1 = box_mean(img, w, h, 1);
  std::vector<double> gx(img.size()), gy(img.size());
  double gmax = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      gx[p] = 0.5 * (at(B1, x + 1, y) - at(B1, x - 1, y));
      gy[p] = 0.5 * (at(B1, x, y + 1) - at(B1, x, y - 1));
      gmax = std::max(gmax, std::hypot(gx[p], gy[p]));
    }
  // Harris response from the 5x5 structure tensor.
  std::vector<double> xx(img.size()), yy(img.size()), xy(img.size());
  for (std::size_t p = 0; p < img.size(); ++p) {
    xx[p] = gx[p] * gx[p];
    yy[p] = gy[p] * gy[p];
    xy[p] = gx[p] * gy[p];
  }
  const std::vector<double> Sxx = box_mean(xx, w, h, 2), Syy = box_mean(yy, w, h, 2), Sxy = box_mean(xy, w, h, 2);
  std::vector<double> R(img.size());
  double rmax = 0.0;
  for (std::size_t p = 0; p < img.size(); ++p) {
    R[p] = Sxx[p] * Syy[p] - Sxy[p] * Sxy[p] - 0.04 * (Sxx[p] + Syy[p]) * (Sxx[p] + Syy[p]);
    rmax = std::max(rmax, std::abs(R[p]));
  }
  for (std::size_t p = 0; p < img.size(); ++p) {
    const auto i = static_cast<Eigen::Index>(p);
    f.scores(0, i) = gmax > 0.0 ? std::hypot(gx[p], gy[p]) / gmax : 0.0;
    f.logits(0, i) = rmax > 0.0 ? 10.0 * R[p] / rmax : 0.0;
  }
  return f;
}

}  // namespace vtrfeat
