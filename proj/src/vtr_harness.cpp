#include "vtrfeat/vtr_harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/io.hpp"
#include "vtrfeat/parallel.hpp"

namespace vtrfeat {

namespace fs = std::filesystem;

Extractor Extractor::learned(ExtractorWeights weights) {
  if (!weights.consistent()) throw ConfigError("extractor: inconsistent weights");
  Extractor e;
  e.window_ = weights.config().window;
  e.weights_ = std::move(weights);
  return e;
}

Extractor Extractor::analytic(int window) {
  if (window < 1) throw ConfigError("extractor: window must be >= 1");
  Extractor e;
  e.window_ = window;
  return e;
}

DenseFeatureMap Extractor::run(const Image& image) const {
  return weights_ ? forward(image, *weights_) : analytic_features(image);
}

std::string Extractor::fingerprint() const {
  if (!weights_) return "analytic:w" + std::to_string(window_);
  // FNV-1a over the flattened weights.
  std::uint64_t h = 1469598103934665603ull;
  const Vector flat = weights_->flatten();
  const auto* bytes = reinterpret_cast<const unsigned char*>(flat.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(flat.size()) * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << "learned:" << std::hex << h;
  return os.str();
}

std::string to_string(MatchMode m) { return m == MatchMode::dense ? "dense" : "sparse"; }
std::string to_string(DisparitySource d) { return d == DisparitySource::ground_truth ? "ground_truth" : "block_match"; }

MatchMode parse_match_mode(const std::string& s) {
  if (s == "dense") return MatchMode::dense;
  if (s == "sparse") return MatchMode::sparse;
  throw ConfigError("unknown match mode '" + s + "' (expected dense or sparse)");
}

DisparitySource parse_disparity_source(const std::string& s) {
  if (s == "ground_truth") return DisparitySource::ground_truth;
  if (s == "block_match") return DisparitySource::block_match;
  throw ConfigError("unknown disparity source '" + s + "' (expected ground_truth or block_match)");
}

void HarnessParams::validate() const {
  if (!(match.tau > 0.0) || match.stride < 1) throw ConfigError("harness: tau > 0 and stride >= 1 required");
  if (ransac.iterations < 1 || !(ransac.inlier_threshold > 0.0))
    throw ConfigError("harness: ransac iterations >= 1 and inlier_threshold > 0 required");
  if (failure_threshold < 0) throw ConfigError("harness: failure_threshold must be >= 0");
  if (block_window < 1 || max_disparity < 1) throw ConfigError("harness: block_window and max_disparity must be >= 1");
}

namespace {

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Image working_disparity(const StereoFrame& f, const HarnessParams& params) {
  if (params.disparity == DisparitySource::ground_truth) {
    if (f.disparity.empty()) throw DataError("harness: frame has no ground-truth disparity");
    return f.disparity;
  }
  BlockMatchResult bm = block_match_disparity(f.left, f.right, params.block_window, params.max_disparity);
  for (std::size_t i = 0; i < bm.valid.size(); ++i)
    if (!bm.valid[i]) bm.disparity.data[i] = 0.0f;
  return std::move(bm.disparity);
}

// Bilinear disparity at (u, v); nullopt unless all four neighbours are valid.
std::optional<double> sample_disparity(const Image& d, double u, double v) {
  if (!(u >= 0.0 && v >= 0.0 && u <= d.width - 1 && v <= d.height - 1)) return std::nullopt;
  const int x0 = std::min(static_cast<int>(u), std::max(d.width - 2, 0));
  const int y0 = std::min(static_cast<int>(v), std::max(d.height - 2, 0));
  const int x1 = std::min(x0 + 1, d.width - 1), y1 = std::min(y0 + 1, d.height - 1);
  const double a = u - x0, b = v - y0;
  const double d00 = d.at(x0, y0), d10 = d.at(x1, y0), d01 = d.at(x0, y1), d11 = d.at(x1, y1);
  if (!(d00 > kMinDisparity && d10 > kMinDisparity && d01 > kMinDisparity && d11 > kMinDisparity)) return std::nullopt;
  return (1 - a) * (1 - b) * d00 + a * (1 - b) * d10 + (1 - a) * b * d01 + a * b * d11;
}

struct Lifted {
  KeypointSet keypoints;
  Matrix points;
};

Lifted lift_keypoints(const KeypointSet& kp, const Image& disparity, const CameraIntrinsics& K) {
  std::vector<int> keep;
  std::vector<Vec3> pts;
  for (int i = 0; i < kp.size(); ++i) {
    const auto d = sample_disparity(disparity, kp.coords(i, 0), kp.coords(i, 1));
    if (!d) continue;
    keep.push_back(i);
    pts.push_back(backproject({kp.coords(i, 0), kp.coords(i, 1), *d}, K));
  }
  Lifted out;
  const auto n = static_cast<Eigen::Index>(keep.size());
  out.keypoints.coords.resize(n, 2);
  out.keypoints.descriptors.resize(n, kp.descriptors.cols());
  out.keypoints.scores.resize(n);
  out.points.resize(n, 3);
  for (Eigen::Index j = 0; j < n; ++j) {
    out.keypoints.coords.row(j) = kp.coords.row(keep[j]);
    out.keypoints.descriptors.row(j) = kp.descriptors.row(keep[j]);
    out.keypoints.scores(j) = kp.scores(keep[j]);
    out.points.row(j) = pts[j].transpose();
  }
  return out;
}

MapVertex make_vertex(int id, const StereoFrame& f, const Image& disparity, const Extractor& extractor,
                      const CameraIntrinsics& K) {
  MapVertex v;
  v.id = id;
  v.pose = f.pose;
  v.image = f.left;
  v.disparity = disparity;
  v.dense = extractor.run(f.left);
  Lifted l = lift_keypoints(extract_keypoints(v.dense, extractor.window()), disparity, K);
  if (l.keypoints.size() < 3)
    throw TeachFailure("teach: frame " + std::to_string(id) + " has " + std::to_string(l.keypoints.size()) +
                       " keypoints with valid disparity (need 3)");
  v.keypoints = std::move(l.keypoints);
  v.points = std::move(l.points);
  return v;
}

void ground_truth_errors(LocalizationResult& r, const SE3Pose& T_wl, const SE3Pose& T_wv) {
  const SE3Pose gt = T_wv.inverse().compose(T_wl);
  const PlanarPose e = se3_to_planar(r.pose), g = se3_to_planar(gt);
  r.pose_error = std::hypot(e.alpha - g.alpha, e.beta - g.beta);
  r.heading_error = std::abs(std::remainder(e.gamma - g.gamma, 2.0 * std::numbers::pi));
}

std::uint64_t ransac_seed(const HarnessParams& params, std::uint64_t index) {
  return io::derive_seed(params.ransac.seed, 40, index);
}

// Mutual best ZNCC among keypoints.
AlignmentProblem sparse_problem(const LiveFrame& live, const MapVertex& vertex) {
  const int n = live.keypoints.size(), m = vertex.keypoints.size();
  Matrix z(n, m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      z(i, j) = zncc(live.keypoints.descriptors.row(i).transpose(), vertex.keypoints.descriptors.row(j).transpose());
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n && m > 0; ++i) {
    Eigen::Index j = 0, back = 0;
    z.row(i).maxCoeff(&j);
    z.col(j).maxCoeff(&back);
    if (back == i) pairs.emplace_back(i, static_cast<int>(j));
  }
  AlignmentProblem p;
  p.source.resize(static_cast<Eigen::Index>(pairs.size()), 3);
  p.target.resize(static_cast<Eigen::Index>(pairs.size()), 3);
  p.weights.resize(static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs[k];
    const auto r = static_cast<Eigen::Index>(k);
    p.source.row(r) = live.points.row(i);
    p.target.row(r) = vertex.points.row(j);
    p.weights(r) = (z(i, j) + 1.0) / 2.0 * live.keypoints.scores(i) * vertex.keypoints.scores(j);
  }
  return p;
}

AlignmentProblem dense_problem(const LiveFrame& live, const MapVertex& vertex, const CameraIntrinsics& K,
                               const HarnessParams& params) {
  const MatchSet ms = match_all(live.keypoints, vertex.dense, params.match);
  std::vector<Eigen::Index> keep;
  std::vector<Vec3> target;
  for (Eigen::Index i = 0; i < ms.size(); ++i) {
    const double u = ms.target_points(i, 0), v = ms.target_points(i, 1);
    const auto d = sample_disparity(vertex.disparity, u, v);
    if (!d) continue;
    keep.push_back(i);
    target.push_back(backproject({u, v, *d}, K));
  }
  AlignmentProblem p;
  const auto n = static_cast<Eigen::Index>(keep.size());
  p.source.resize(n, 3);
  p.target.resize(n, 3);
  p.weights.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    p.source.row(k) = live.points.row(keep[k]);
    p.target.row(k) = target[k].transpose();
    p.weights(k) = ms.weights(keep[k]);
  }
  return p;
}

}  // namespace

Map teach(const Sequence& seq, const Extractor& extractor, const HarnessParams& params) {
  params.validate();
  if (seq.frames.empty()) throw TeachFailure("teach: empty sequence");
  Map map;
  map.fingerprint = extractor.fingerprint();
  map.condition = seq.config.condition;
  map.K = seq.K;
  map.vertices.resize(seq.frames.size());
  parallel_for(seq.frames.size(), [&](std::size_t k) {
    const StereoFrame& f = seq.frames[k];
    map.vertices[k] = make_vertex(static_cast<int>(k), f, working_disparity(f, params), extractor, seq.K);
  });
  return map;
}

LiveFrame prepare_live(const StereoFrame& frame, const Extractor& extractor, const CameraIntrinsics& K,
                       const HarnessParams& params) {
  LiveFrame live;
  live.dense = extractor.run(frame.left);
  Lifted l = lift_keypoints(extract_keypoints(live.dense, extractor.window()), working_disparity(frame, params), K);
  live.keypoints = std::move(l.keypoints);
  live.points = std::move(l.points);
  return live;
}

LocalizationResult localize(const LiveFrame& live, const MapVertex& vertex, const CameraIntrinsics& K,
                            const HarnessParams& params, std::uint64_t seed_index) {
  const auto t0 = std::chrono::steady_clock::now();
  LocalizationResult r;
  r.vertex = vertex.id;
  if (live.keypoints.size() > 0 && live.keypoints.descriptors.cols() != vertex.dense.dim())
    throw ShapeError("localize: descriptor dimensions differ between live frame and map");
  const AlignmentProblem prob =
      params.mode == MatchMode::dense ? dense_problem(live, vertex, K, params) : sparse_problem(live, vertex);
  r.matches = static_cast<int>(prob.source.rows());
  RansacParams rp = params.ransac;
  rp.seed = ransac_seed(params, seed_index);
  try {
    const RansacResult rr = ransac_pose(prob, rp);
    r.pose = rr.pose;
    r.inliers = rr.inlier_count;
    r.failure = r.inliers < params.failure_threshold;
    if (r.failure) r.reason = "inliers below threshold";
  } catch (const NumericError& e) {
    r.failure = true;
    r.inliers = 0;
    r.reason = e.kind();
  }
  r.seconds = elapsed(t0);
  return r;
}

LocalizationResult localize(const StereoFrame& frame, const MapVertex& vertex, const Extractor& extractor,
                            const CameraIntrinsics& K, const HarnessParams& params, std::uint64_t seed_index) {
  params.validate();
  const auto t0 = std::chrono::steady_clock::now();
  LocalizationResult r = localize(prepare_live(frame, extractor, K, params), vertex, K, params, seed_index);
  if (!r.failure) ground_truth_errors(r, frame.pose, vertex.pose);
  r.seconds = elapsed(t0);
  return r;
}

void summarize(RunReport& report) {
  const auto n = report.frames.size();
  double inliers = 0.0, sq = 0.0;
  int ok = 0;
  report.failures = 0;
  for (const auto& f : report.frames) {
    inliers += f.inliers;
    if (f.failure) {
      ++report.failures;
    } else {
      sq += f.pose_error * f.pose_error;
      ++ok;
    }
  }
  report.mean_inliers = n ? inliers / static_cast<double>(n) : 0.0;
  report.failure_fraction = n ? static_cast<double>(report.failures) / static_cast<double>(n) : 0.0;
  report.planar_rmse = ok ? std::sqrt(sq / ok) : std::numeric_limits<double>::quiet_NaN();
}

namespace {

std::size_t nearest_vertex(const Map& map, const SE3Pose& T_wl) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < map.vertices.size(); ++k) {
    const Vec3 d = map.vertices[k].pose.translation() - T_wl.translation();
    const double dist = d.head<2>().squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = k;
    }
  }
  return best;
}

RunReport repeat_prepared(const Sequence& seq, const std::vector<LiveFrame>& live, const Map& map,
                          const Extractor& extractor, const HarnessParams& params) {
  RunReport report;
  report.teach_condition = map.condition;
  report.repeat_condition = seq.config.condition;
  report.extractor = extractor.fingerprint();
  report.frames.resize(seq.frames.size());
  parallel_for(seq.frames.size(), [&](std::size_t k) {
    const MapVertex& v = map.vertices[nearest_vertex(map, seq.frames[k].pose)];
    LocalizationResult r = localize(live[k], v, map.K, params, k);
    r.frame = static_cast<int>(k);
    if (!r.failure) ground_truth_errors(r, seq.frames[k].pose, v.pose);
    report.frames[k] = r;
  });
  summarize(report);
  return report;
}

std::vector<LiveFrame> prepare_all(const Sequence& seq, const Extractor& extractor, const HarnessParams& params) {
  std::vector<LiveFrame> live(seq.frames.size());
  parallel_for(seq.frames.size(),
               [&](std::size_t k) { live[k] = prepare_live(seq.frames[k], extractor, seq.K, params); });
  return live;
}

void check_map(const Map& map, const Extractor& extractor) {
  if (map.vertices.empty()) throw DataError("repeat: map has no vertices");
  if (map.fingerprint != extractor.fingerprint())
    throw DataError("repeat: map was taught with extractor " + map.fingerprint + ", got " + extractor.fingerprint());
}

}  // namespace

RunReport repeat(const Sequence& seq, const Map& map, const Extractor& extractor, const HarnessParams& params) {
  params.validate();
  check_map(map, extractor);
  return repeat_prepared(seq, prepare_all(seq, extractor, params), map, extractor, params);
}

std::vector<RunReport> condition_sweep(const SequenceConfig& base, const std::vector<std::string>& teach_conditions,
                                       const std::vector<std::string>& repeat_conditions, double lateral_jitter,
                                       double heading_jitter, const Extractor& extractor,
                                       const HarnessParams& params) {
  params.validate();
  std::vector<Map> maps;
  for (const auto& c : teach_conditions) {
    SequenceConfig cfg = base;
    cfg.condition = c;
    cfg.lateral_jitter = 0.0;
    cfg.heading_jitter = 0.0;
    cfg.seed = io::derive_seed(base.seed, 50, maps.size());
    maps.push_back(teach(generate_sequence(cfg), extractor, params));
  }
  std::vector<Sequence> seqs;
  std::vector<std::vector<LiveFrame>> lives;
  for (const auto& c : repeat_conditions) {
    SequenceConfig cfg = base;
    cfg.condition = c;
    cfg.lateral_jitter = lateral_jitter;
    cfg.heading_jitter = heading_jitter;
    cfg.seed = io::derive_seed(base.seed, 51, seqs.size());
    seqs.push_back(generate_sequence(cfg));
    lives.push_back(prepare_all(seqs.back(), extractor, params));
  }
  std::vector<RunReport> out;
  for (const Map& m : maps)
    for (std::size_t j = 0; j < seqs.size(); ++j) out.push_back(repeat_prepared(seqs[j], lives[j], m, extractor, params));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

constexpr const char* kRunHeader = "frame,vertex,matches,inliers,failure,pose_error,heading_error";
constexpr const char* kSummaryHeader =
    "run,teach_condition,repeat_condition,extractor,frames,mean_inliers,failures,failure_fraction,planar_rmse";

std::string run_file(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%03zu.csv", k);
  return buf;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> ordered_conditions(const std::vector<RunReport>& reports) {
  std::vector<std::string> names;
  auto add = [&](const std::string& c) {
    if (std::find(names.begin(), names.end(), c) == names.end()) names.push_back(c);
  };
  for (const auto& c : default_schedule()) {
    for (const auto& r : reports)
      if (r.teach_condition == c.name || r.repeat_condition == c.name) {
        add(c.name);
        break;
      }
  }
  for (const auto& r : reports) {
    add(r.teach_condition);
    add(r.repeat_condition);
  }
  return names;
}

double parse_double(const std::string& s, const fs::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    throw IoError("report: bad number '" + s + "' in " + path.string());
  }
}

}  // namespace

void emit_report(const std::vector<RunReport>& reports, const fs::path& dir) {
  if (reports.empty()) throw ConfigError("emit_report: no reports");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("emit_report: cannot create " + dir.string() + ": " + ec.message());

  std::ostringstream summary;
  summary.precision(17);
  summary << kSummaryHeader << '\n';
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const RunReport& r = reports[k];
    std::ostringstream os;
    os.precision(17);
    os << kRunHeader << '\n';
    for (const auto& f : r.frames)
      os << f.frame << ',' << f.vertex << ',' << f.matches << ',' << f.inliers << ',' << (f.failure ? 1 : 0) << ','
         << f.pose_error << ',' << f.heading_error << '\n';
    io::write_text(dir / run_file(k), os.str());
    summary << run_file(k) << ',' << r.teach_condition << ',' << r.repeat_condition << ',' << r.extractor << ','
            << r.frames.size() << ',' << r.mean_inliers << ',' << r.failures << ',' << r.failure_fraction << ','
            << r.planar_rmse << '\n';
  }
  io::write_text(dir / "summary.csv", summary.str());

  const auto names = ordered_conditions(reports);
  std::map<std::pair<std::string, std::string>, double> cell;
  for (const auto& r : reports) cell[{r.teach_condition, r.repeat_condition}] = r.mean_inliers;
  std::ostringstream m;
  m.precision(17);
  m << "teach\\repeat";
  for (const auto& c : names) m << ',' << c;
  m << '\n';
  for (const auto& row : names) {
    m << row;
    for (const auto& col : names) {
      m << ',';
      if (auto it = cell.find({row, col}); it != cell.end()) m << it->second;
    }
    m << '\n';
  }
  io::write_text(dir / "condition_matrix.csv", m.str());
}

RunReport parse_run_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("report: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kRunHeader) throw IoError("report: bad header in " + path.string());
  RunReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() != 7) throw IoError("report: expected 7 columns in " + path.string());
    LocalizationResult f;
    f.frame = static_cast<int>(parse_double(c[0], path));
    f.vertex = static_cast<int>(parse_double(c[1], path));
    f.matches = static_cast<int>(parse_double(c[2], path));
    f.inliers = static_cast<int>(parse_double(c[3], path));
    f.failure = c[4] == "1";
    f.pose_error = parse_double(c[5], path);
    f.heading_error = parse_double(c[6], path);
    r.frames.push_back(f);
  }
  summarize(r);
  return r;
}

std::vector<RunReport> read_report(const fs::path& dir) {
  const fs::path sp = dir / "summary.csv";
  std::ifstream in(sp);
  if (!in) throw IoError("report: cannot open " + sp.string());
  std::string line;
  if (!std::getline(in, line) || line != kSummaryHeader) throw IoError("report: bad header in " + sp.string());
  std::vector<RunReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() != 9) throw IoError("report: expected 9 columns in " + sp.string());
    RunReport r = parse_run_csv(dir / c[0]);
    r.teach_condition = c[1];
    r.repeat_condition = c[2];
    r.extractor = c[3];
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Map persistence

void save_map(const Map& map, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_map: cannot create " + dir.string() + ": " + ec.message());
  io::json vertices = io::json::array();
  for (const MapVertex& v : map.vertices) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "vertex_%05d.f32", v.id);
    io::write_planes(dir / buf, {&v.image, &v.disparity});
    vertices.push_back({{"id", v.id},
                        {"file", buf},
                        {"pose", io::to_json(v.pose)},
                        {"width", v.image.width},
                        {"height", v.image.height},
                        {"keypoints", v.keypoints.size()}});
  }
  io::write_json(dir / "manifest.json", {{"format", "vtrfeat-map"},
                                         {"version", 1},
                                         {"fingerprint", map.fingerprint},
                                         {"condition", map.condition},
                                         {"K", io::to_json(map.K)},
                                         {"vertices", vertices}});
}

Map load_map(const fs::path& dir, const Extractor& extractor, const HarnessParams& params) {
  params.validate();
  const io::json j = io::read_json(dir / "manifest.json");
  try {
    if (j.at("format") != "vtrfeat-map" || j.at("version") != 1) throw IoError("load_map: not a map: " + dir.string());
    Map map;
    map.fingerprint = j.at("fingerprint").get<std::string>();
    map.condition = j.at("condition").get<std::string>();
    map.K = io::intrinsics_from_json(j.at("K"));
    if (map.fingerprint != extractor.fingerprint())
      throw DataError("load_map: map was taught with extractor " + map.fingerprint + ", got " +
                      extractor.fingerprint());
    const auto& vs = j.at("vertices");
    map.vertices.resize(vs.size());
    parallel_for(vs.size(), [&](std::size_t k) {
      const auto& e = vs[k];
      const int w = e.at("width"), h = e.at("height");
      auto planes = io::read_planes(dir / e.at("file").get<std::string>(), w, h, 2);
      StereoFrame f;
      f.left = std::move(planes[0]);
      f.pose = io::pose_from_json(e.at("pose"));
      map.vertices[k] = make_vertex(e.at("id"), f, planes[1], extractor, map.K);
      if (map.vertices[k].keypoints.size() != e.at("keypoints").get<int>())
        throw IoError("load_map: vertex " + std::to_string(k) + " keypoint count changed on reload");
    });
    return map;
  } catch (const io::json::exception& e) {
    throw IoError("load_map: malformed manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace vtrfeat
