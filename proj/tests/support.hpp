#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <functional>
#include <random>
#include <vector>

#include <unistd.h>

#include "vtrfeat/diff.hpp"

namespace vtrfeat::testing {

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

/// max_i |a_i - b_i| / (max(|a_i|, |b_i|) + floor)
inline double max_rel_error(const Vector& a, const Vector& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double den = std::max(std::abs(a[i]), std::abs(b[i])) + floor;
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

/// |a - b|_2 / max(|a|_2, |b|_2): the gradient-check metric. Component-wise
/// ratios are dominated by central-difference roundoff on near-zero entries.
inline double rel_error(const Vector& a, const Vector& b) {
  const double den = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / den;
}

using GraphFn = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

/// Contracts the graph output with a fixed random matrix to get a scalar and
/// returns (tape gradient, central-difference gradient) over all inputs,
/// flattened in input order.
inline std::pair<Vector, Vector> gradient_pair(const GraphFn& graph, const std::vector<Matrix>& inputs,
                                               std::uint64_t seed, double h = 1e-6) {
  Matrix proj;
  {
    Tape t;
    std::vector<NodeId> ids;
    for (const Matrix& m : inputs) ids.push_back(t.constant(m));
    const Matrix& out = t.value(graph(t, ids));
    std::mt19937_64 rng(seed);
    proj = random_matrix(rng, out.rows(), out.cols());
  }
  auto eval = [&](const std::vector<Matrix>& xs, Vector* grad) {
    Tape t;
    std::vector<NodeId> ids;
    for (const Matrix& m : xs) ids.push_back(grad ? t.parameter(m) : t.constant(m));
    const NodeId out = graph(t, ids);
    const NodeId loss = ad::sum(t, ad::mul(t, out, t.constant(proj)));
    if (grad) {
      GradientMap g = t.backward(loss);
      Eigen::Index total = 0;
      for (const Matrix& m : xs) total += m.size();
      grad->resize(total);
      Eigen::Index k = 0;
      for (NodeId id : ids) {
        const Matrix& gm = g.at(id.index);
        for (Eigen::Index i = 0; i < gm.size(); ++i) (*grad)[k++] = gm.data()[i];
      }
    }
    return t.value(loss)(0, 0);
  };

  Vector analytic;
  eval(inputs, &analytic);
  Vector flat(analytic.size());
  {
    Eigen::Index k = 0;
    for (const Matrix& m : inputs)
      for (Eigen::Index i = 0; i < m.size(); ++i) flat[k++] = m.data()[i];
  }
  auto f = [&](const Vector& x) {
    std::vector<Matrix> xs = inputs;
    Eigen::Index k = 0;
    for (Matrix& m : xs)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = x[k++];
    return eval(xs, nullptr);
  };
  return {analytic, finite_diff(f, flat, h, true)};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vtrfeat_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// True when both trees hold the same relative paths with identical bytes.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) return false;
  for (const auto& f : fa)
    if (read_bytes(a / f) != read_bytes(b / f)) return false;
  return true;
}

}  // namespace vtrfeat::testing
