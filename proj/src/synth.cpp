#include "vtrfeat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "vtrfeat/errors.hpp"
#include "vtrfeat/io.hpp"
#include "vtrfeat/parallel.hpp"

namespace vtrfeat {

namespace fs = std::filesystem;

namespace {

constexpr int kLattice = 256;
constexpr double kMarchStep = 0.02;
constexpr int kBisections = 48;

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double smooth_edge(double inside, double softness) {
  if (inside <= 0.0) return 0.0;
  if (inside >= softness) return 1.0;
  const double t = inside / softness;
  return t * t * (3.0 - 2.0 * t);
}

// Seed streams for derive_seed.
enum Stream : std::uint64_t {
  kSceneStream = 1,
  kTrainStream = 2,
  kValStream = 3,
  kPathStream = 4,
  kJitterStream = 5,
  kFrameNoiseStream = 6,
};

}  // namespace

// ---------------------------------------------------------------------------
// Scene

Scene Scene::generate(std::uint64_t seed, const SceneParams& params) {
  if (params.octaves < 1 || !(params.block_cell > 0.0) || !(params.extent > 0.0))
    throw ConfigError("scene: octaves >= 1, block_cell > 0 and extent > 0 required");
  Scene s;
  s.seed_ = seed;
  s.params_ = params;
  std::mt19937_64 rng(io::derive_seed(seed, kSceneStream));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  s.lattice_.resize(static_cast<std::size_t>(params.octaves) * kLattice * kLattice);
  for (double& v : s.lattice_) v = u01(rng);
  s.offsets_.resize(static_cast<std::size_t>(params.octaves) * 2);
  for (double& v : s.offsets_) v = u01(rng) * kLattice;

  s.cells_ = static_cast<int>(std::ceil(2.0 * params.extent / params.block_cell));
  s.blocks_.resize(static_cast<std::size_t>(s.cells_) * s.cells_);
  const double cell = params.block_cell;
  for (int j = 0; j < s.cells_; ++j)
    for (int i = 0; i < s.cells_; ++i) {
      Block& b = s.blocks_[static_cast<std::size_t>(j) * s.cells_ + i];
      const bool present = u01(rng) < params.block_probability;
      const double hx = cell * (0.12 + 0.2 * u01(rng));
      const double hy = cell * (0.12 + 0.2 * u01(rng));
      const double x0 = -params.extent + i * cell, y0 = -params.extent + j * cell;
      b.cx = x0 + hx + (cell - 2 * hx) * u01(rng);
      b.cy = y0 + hy + (cell - 2 * hy) * u01(rng);
      b.hx = hx;
      b.hy = hy;
      b.h = present ? params.block_height * (0.4 + 0.6 * u01(rng)) : 0.0;
    }
  return s;
}

const Scene::Block* Scene::block_at(double x, double y) const {
  const double cell = params_.block_cell;
  const int i = static_cast<int>(std::floor((x + params_.extent) / cell));
  const int j = static_cast<int>(std::floor((y + params_.extent) / cell));
  if (i < 0 || j < 0 || i >= cells_ || j >= cells_) return nullptr;
  return &blocks_[static_cast<std::size_t>(j) * cells_ + i];
}

double Scene::height(double x, double y) const {
  const Block* b = block_at(x, y);
  if (!b || b->h == 0.0) return 0.0;
  const double soft = params_.edge_softness;
  return b->h * smooth_edge(b->hx - std::abs(x - b->cx), soft) * smooth_edge(b->hy - std::abs(y - b->cy), soft);
}

double Scene::texture(double x, double y) const {
  double sum = 0.0, norm = 0.0, amp = 1.0, freq = params_.base_frequency;
  for (int o = 0; o < params_.octaves; ++o) {
    const double* lat = lattice_.data() + static_cast<std::size_t>(o) * kLattice * kLattice;
    const double px = x * freq + offsets_[2 * o], py = y * freq + offsets_[2 * o + 1];
    const double fx = std::floor(px), fy = std::floor(py);
    const double tx = fade(px - fx), ty = fade(py - fy);
    auto idx = [](double v) { return static_cast<int>(((static_cast<long long>(v) % kLattice) + kLattice) % kLattice); };
    const int x0 = idx(fx), y0 = idx(fy), x1 = (x0 + 1) % kLattice, y1 = (y0 + 1) % kLattice;
    const double v00 = lat[y0 * kLattice + x0], v10 = lat[y0 * kLattice + x1];
    const double v01 = lat[y1 * kLattice + x0], v11 = lat[y1 * kLattice + x1];
    const double v = (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
    sum += amp * v;
    norm += amp;
    amp *= 0.75;
    freq *= 2.0;
  }
  // Averaged value noise concentrates around 0.5; stretch the contrast.
  const double t = sum / norm;
  return 0.5 + 0.5 * std::tanh(4.0 * (t - 0.5));
}

// ---------------------------------------------------------------------------
// Photometric schedule

const std::vector<LightingCondition>& default_schedule() {
  static const std::vector<LightingCondition> schedule = {
      {"night", {0.15, 0.0, 1.0, 0.6, 0.05}},
      {"predawn", {0.3, 0.0, 1.0, 0.5, 0.04}},
      {"sunrise", {0.7, 0.15, 0.8, 0.2, 0.02}},
      {"morning", {0.9, 0.0, 1.0, 0.1, 0.015}},
      {"noon", {1.0, 0.0, 1.0, 0.0, 0.01}},
      {"afternoon", {0.95, 0.0, 1.1, 0.0, 0.01}},
      {"sunset", {0.6, 0.1, 1.3, 0.3, 0.025}},
      {"dusk", {0.25, 0.0, 1.0, 0.55, 0.045}},
  };
  return schedule;
}

const LightingCondition& find_condition(const std::string& name) {
  for (const LightingCondition& c : default_schedule())
    if (c.name == name) return c;
  throw ConfigError("unknown lighting condition: " + name);
}

std::vector<std::string> strongest_conditions(std::size_t count) {
  std::vector<LightingCondition> s = default_schedule();
  std::stable_sort(s.begin(), s.end(), [](const LightingCondition& a, const LightingCondition& b) {
    return a.photo.sigma / a.photo.gain > b.photo.sigma / b.photo.gain;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(count, s.size()); ++i) out.push_back(s[i].name);
  return out;
}

// ---------------------------------------------------------------------------
// Camera and rendering

CameraIntrinsics default_intrinsics(int width, int height) {
  // Focal length scales with the image so the ground footprint is fixed.
  const double f = 50.0 * width / 64.0;
  return {f, f, (width - 1) / 2.0, (height - 1) / 2.0, 0.4};
}

SE3Pose camera_pose(double x, double y, double theta, double height) {
  return SE3Pose(rot_z(theta), Vec3(x, y, -height));
}

RaySample cast_ray(const Scene& scene, const SE3Pose& T_wc, const CameraIntrinsics& K, double u, double v) {
  const Vec3 c = T_wc.translation();
  const Vec3 dir = T_wc.rotation() * Vec3((u - K.cu) / K.fu, (v - K.cv) / K.fv, 1.0);
  if (!(dir.z() > 0.0)) throw InvalidViewpoint("cast_ray: ray does not point down at the ground");
  const double hmax = scene.params().block_height;
  if (c.z() >= -hmax && c.z() >= -scene.height(c.x(), c.y()))
    throw InvalidViewpoint("cast_ray: camera is not above the surface");

  // f(t) >= 0 once the ray point is at or below the surface.
  auto f = [&](double t) {
    const Vec3 p = c + t * dir;
    return p.z() + scene.height(p.x(), p.y());
  };
  double lo = std::max(0.0, (-hmax - c.z()) / dir.z());
  const double end = -c.z() / dir.z();
  double hi = lo;
  while (true) {
    hi = std::min(lo + kMarchStep, end);
    if (f(hi) >= 0.0 || hi >= end) break;
    lo = hi;
  }
  for (int i = 0; i < kBisections; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) >= 0.0 ? hi : lo) = mid;
  }
  const Vec3 p = c + hi * dir;
  return {scene.texture(p.x(), p.y()), hi};
}

Image apply_photometric(const Image& clean, const PhotometricParams& photo, std::uint64_t noise_seed) {
  if (!photo.valid()) throw ConfigError("photometric parameters invalid (gain > 0, gamma > 0, sigma >= 0)");
  Image out(clean.width, clean.height);
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, photo.sigma > 0.0 ? photo.sigma : 1.0);
  const double cx = (clean.width - 1) / 2.0, cy = (clean.height - 1) / 2.0;
  const double r2max = cx * cx + cy * cy;
  for (int y = 0; y < clean.height; ++y)
    for (int x = 0; x < clean.width; ++x) {
      const double t = std::clamp(static_cast<double>(clean.at(x, y)), 0.0, 1.0);
      double value = photo.gain * std::pow(t, photo.gamma) + photo.bias;
      if (photo.vignette != 0.0) {
        const double r2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / r2max;
        value *= 1.0 - photo.vignette * r2;
      }
      if (photo.sigma > 0.0) value += noise(rng);
      out.at(x, y) = static_cast<float>(value);
    }
  return out;
}

StereoFrame render_stereo(const Scene& scene, const SE3Pose& T_wc, const CameraIntrinsics& K, int width, int height,
                          const PhotometricParams& photo, std::uint64_t noise_seed) {
  if (!K.valid()) throw ConfigError("render_stereo: invalid intrinsics");
  if (width < 2 || height < 2) throw ShapeError("render_stereo: image too small");
  const SE3Pose T_wr = T_wc.compose(SE3Pose(Mat3::Identity(), Vec3(K.b, 0.0, 0.0)));
  Image left(width, height), right(width, height);
  StereoFrame f;
  f.pose = T_wc;
  f.disparity = Image(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const RaySample l = cast_ray(scene, T_wc, K, x, y);
      left.at(x, y) = static_cast<float>(l.intensity);
      f.disparity.at(x, y) = static_cast<float>(K.fu * K.b / l.depth);
      right.at(x, y) = static_cast<float>(cast_ray(scene, T_wr, K, x, y).intensity);
    }
  f.left = apply_photometric(left, photo, io::derive_seed(noise_seed, 0));
  f.right = apply_photometric(right, photo, io::derive_seed(noise_seed, 1));
  return f;
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

const std::vector<std::string>& condition_names(const DatasetConfig& config, std::vector<std::string>& storage) {
  if (!config.conditions.empty()) {
    for (const std::string& n : config.conditions) find_condition(n);
    return config.conditions;
  }
  for (const LightingCondition& c : default_schedule()) storage.push_back(c.name);
  return storage;
}

Sample make_sample(const Scene& scene, const DatasetConfig& config, const CameraIntrinsics& K,
                   const std::vector<std::string>& conditions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-scene.params().extent + 3.0, scene.params().extent - 3.0);
  std::uniform_real_distribution<double> heading(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> a(-config.bounds.alpha, config.bounds.alpha);
  std::uniform_real_distribution<double> b(-config.bounds.beta, config.bounds.beta);
  std::uniform_real_distribution<double> g(-config.bounds.gamma, config.bounds.gamma);
  std::uniform_int_distribution<std::size_t> pick(0, conditions.size() - 1);

  Sample s;
  const double xs = pos(rng), ys = pos(rng), ts = heading(rng);
  s.pose = {a(rng), b(rng), g(rng)};
  s.source_condition = conditions[pick(rng)];
  s.target_condition = conditions[pick(rng)];
  s.source_photo = find_condition(s.source_condition).photo;
  s.target_photo = find_condition(s.target_condition).photo;

  // T_ts = T_wt^-1 T_ws = (Rz(gamma), (alpha, beta)) fixes the target camera.
  const double tt = ts - s.pose.gamma;
  const Vec3 off = rot_z(tt) * Vec3(s.pose.alpha, s.pose.beta, 0.0);
  const SE3Pose T_ws = camera_pose(xs, ys, ts);
  const SE3Pose T_wt = camera_pose(xs - off.x(), ys - off.y(), tt);
  s.source = render_stereo(scene, T_ws, K, config.width, config.height, s.source_photo, rng());
  s.target = render_stereo(scene, T_wt, K, config.width, config.height, s.target_photo, rng());
  return s;
}

io::json photo_json(const PhotometricParams& p) {
  return {{"gain", p.gain}, {"bias", p.bias}, {"gamma", p.gamma}, {"vignette", p.vignette}, {"sigma", p.sigma}};
}

PhotometricParams photo_from_json(const io::json& j) {
  return {j.at("gain").get<double>(), j.at("bias").get<double>(), j.at("gamma").get<double>(),
          j.at("vignette").get<double>(), j.at("sigma").get<double>()};
}

io::json scene_json(const SceneParams& p) {
  return {{"extent", p.extent},
          {"block_cell", p.block_cell},
          {"block_probability", p.block_probability},
          {"block_height", p.block_height},
          {"edge_softness", p.edge_softness},
          {"octaves", p.octaves},
          {"base_frequency", p.base_frequency}};
}

SceneParams scene_from_json(const io::json& j) {
  SceneParams p;
  p.extent = j.at("extent").get<double>();
  p.block_cell = j.at("block_cell").get<double>();
  p.block_probability = j.at("block_probability").get<double>();
  p.block_height = j.at("block_height").get<double>();
  p.edge_softness = j.at("edge_softness").get<double>();
  p.octaves = j.at("octaves").get<int>();
  p.base_frequency = j.at("base_frequency").get<double>();
  return p;
}

std::string sample_file(const std::string& split, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu.bin", split.c_str(), i);
  return buf;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& config) {
  if (config.train_count < 1) throw ConfigError("dataset: train_count must be >= 1");
  if (config.val_count < 0) throw ConfigError("dataset: val_count must be >= 0");
  std::vector<std::string> storage;
  const std::vector<std::string>& conditions = condition_names(config, storage);
  const Scene scene = Scene::generate(config.seed, config.scene);

  Dataset d;
  d.config = config;
  d.K = default_intrinsics(config.width, config.height);
  d.train.resize(static_cast<std::size_t>(config.train_count));
  d.val.resize(static_cast<std::size_t>(config.val_count));
  const std::size_t total = d.train.size() + d.val.size();
  parallel_for(total, [&](std::size_t k) {
    if (k < d.train.size())
      d.train[k] = make_sample(scene, config, d.K, conditions, io::derive_seed(config.seed, kTrainStream, k));
    else {
      const std::size_t i = k - d.train.size();
      d.val[i] = make_sample(scene, config, d.K, conditions, io::derive_seed(config.seed, kValStream, i));
    }
  });
  return d;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  const DatasetConfig& c = data.config;
  io::json conds = io::json::array();
  for (const std::string& n : c.conditions) conds.push_back(n);
  io::json m = {{"format", "vtrfeat-dataset"},
                {"version", 1},
                {"width", c.width},
                {"height", c.height},
                {"intrinsics", io::to_json(data.K)},
                {"planes", {"source_left", "source_right", "source_disparity", "target_left", "target_right",
                            "target_disparity"}},
                {"config",
                 {{"seed", c.seed},
                  {"train_count", c.train_count},
                  {"val_count", c.val_count},
                  {"bounds", {{"alpha", c.bounds.alpha}, {"beta", c.bounds.beta}, {"gamma", c.bounds.gamma}}},
                  {"conditions", conds},
                  {"scene", scene_json(c.scene)}}}};
  io::json samples = io::json::array();
  auto emit = [&](const std::vector<Sample>& v, const std::string& split) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Sample& s = v[i];
      const std::string file = sample_file(split, i);
      io::write_planes(dir / file, {&s.source.left, &s.source.right, &s.source.disparity, &s.target.left,
                                    &s.target.right, &s.target.disparity});
      samples.push_back({{"split", split},
                         {"file", file},
                         {"pose", io::to_json(s.pose)},
                         {"source", {{"pose", io::to_json(s.source.pose)},
                                     {"condition", s.source_condition},
                                     {"photo", photo_json(s.source_photo)}}},
                         {"target", {{"pose", io::to_json(s.target.pose)},
                                     {"condition", s.target_condition},
                                     {"photo", photo_json(s.target_photo)}}}});
    }
  };
  emit(data.train, "train");
  emit(data.val, "val");
  m["samples"] = samples;
  io::write_json(dir / "manifest.json", m);
}

Dataset read_dataset(const fs::path& dir) {
  const io::json m = io::read_json(dir / "manifest.json");
  if (m.value("format", "") != "vtrfeat-dataset") throw IoError("not a dataset manifest: " + (dir / "manifest.json").string());
  Dataset d;
  try {
    DatasetConfig& c = d.config;
    c.width = m.at("width").get<int>();
    c.height = m.at("height").get<int>();
    const io::json& cj = m.at("config");
    c.seed = cj.at("seed").get<std::uint64_t>();
    c.train_count = cj.at("train_count").get<int>();
    c.val_count = cj.at("val_count").get<int>();
    c.bounds = {cj.at("bounds").at("alpha").get<double>(), cj.at("bounds").at("beta").get<double>(),
                cj.at("bounds").at("gamma").get<double>()};
    c.conditions = cj.at("conditions").get<std::vector<std::string>>();
    c.scene = scene_from_json(cj.at("scene"));
    d.K = io::intrinsics_from_json(m.at("intrinsics"));
    for (const io::json& sj : m.at("samples")) {
      std::vector<Image> planes = io::read_planes(dir / sj.at("file").get<std::string>(), c.width, c.height, 6);
      Sample s;
      s.pose = io::planar_from_json(sj.at("pose"));
      s.source = {std::move(planes[0]), std::move(planes[1]), std::move(planes[2]),
                  io::pose_from_json(sj.at("source").at("pose"))};
      s.target = {std::move(planes[3]), std::move(planes[4]), std::move(planes[5]),
                  io::pose_from_json(sj.at("target").at("pose"))};
      s.source_condition = sj.at("source").at("condition").get<std::string>();
      s.target_condition = sj.at("target").at("condition").get<std::string>();
      s.source_photo = photo_from_json(sj.at("source").at("photo"));
      s.target_photo = photo_from_json(sj.at("target").at("photo"));
      (sj.at("split").get<std::string>() == "train" ? d.train : d.val).push_back(std::move(s));
    }
  } catch (const io::json::exception& e) {
    throw IoError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  return d;
}

Dataset make_dataset(const DatasetConfig& config, const fs::path& dir) {
  Dataset d = generate_dataset(config);
  write_dataset(d, dir);
  return d;
}

// ---------------------------------------------------------------------------
// Block matching

BlockMatchResult block_match_disparity(const Image& left, const Image& right, int window, int max_disparity,
                                       double variance_floor) {
  if (left.width != right.width || left.height != right.height) throw ShapeError("block_match: image sizes differ");
  if (window < 1 || max_disparity < 0) throw ConfigError("block_match: window >= 1 and max_disparity >= 0 required");
  const int w = left.width, h = left.height, r = window / 2;
  BlockMatchResult out{Image(w, h), std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
  const double n = (2.0 * r + 1) * (2.0 * r + 1);
  for (int y = r; y < h - r; ++y)
    for (int x = r + max_disparity; x < w - r; ++x) {
      double mean = 0.0, sq = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const double v = left.at(x + dx, y + dy);
          mean += v;
          sq += v * v;
        }
      mean /= n;
      if (sq / n - mean * mean < variance_floor) continue;
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int d = 0; d <= max_disparity; ++d) {
        double sad = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) sad += std::abs(left.at(x + dx, y + dy) - right.at(x + dx - d, y + dy));
        if (sad < best) {
          best = sad;
          arg = d;
        }
      }
      out.disparity.at(x, y) = static_cast<float>(arg);
      out.valid[static_cast<std::size_t>(y) * w + x] = 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

Sequence generate_sequence(const SequenceConfig& config) {
  if (config.frames < 1) throw ConfigError("sequence: frames must be >= 1");
  const Scene scene = Scene::generate(config.scene_seed, config.scene);
  const PhotometricParams photo = find_condition(config.condition).photo;
  Sequence seq;
  seq.config = config;
  seq.K = default_intrinsics(config.width, config.height);

  std::mt19937_64 path_rng(io::derive_seed(config.scene_seed, kPathStream));
  std::uniform_real_distribution<double> start(-0.3 * config.scene.extent, 0.3 * config.scene.extent);
  std::uniform_real_distribution<double> heading(-std::numbers::pi, std::numbers::pi);
  double x = start(path_rng), y = start(path_rng), theta = heading(path_rng);

  std::mt19937_64 jit_rng(io::derive_seed(config.seed, kJitterStream));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double p1 = phase(jit_rng), p2 = phase(jit_rng);

  std::vector<SE3Pose> poses;
  for (int k = 0; k < config.frames; ++k) {
    const double lateral = config.lateral_jitter * std::sin(p1 + 0.35 * k);
    const double dtheta = config.heading_jitter * std::sin(p2 + 0.27 * k);
    poses.push_back(camera_pose(x - lateral * std::sin(theta), y + lateral * std::cos(theta), theta + dtheta));
    x += config.spacing * std::cos(theta);
    y += config.spacing * std::sin(theta);
    theta += config.curvature * config.spacing;
  }
  seq.frames.resize(poses.size());
  parallel_for(poses.size(), [&](std::size_t k) {
    seq.frames[k] = render_stereo(scene, poses[k], seq.K, config.width, config.height, photo,
                                  io::derive_seed(config.seed, kFrameNoiseStream, k));
  });
  return seq;
}

void write_sequence(const Sequence& seq, const fs::path& dir) {
  const SequenceConfig& c = seq.config;
  io::json frames = io::json::array();
  for (std::size_t k = 0; k < seq.frames.size(); ++k) {
    const StereoFrame& f = seq.frames[k];
    const std::string file = sample_file("frame", k);
    io::write_planes(dir / file, {&f.left, &f.right, &f.disparity});
    frames.push_back({{"file", file}, {"pose", io::to_json(f.pose)}});
  }
  io::write_json(dir / "manifest.json",
                 {{"format", "vtrfeat-sequence"},
                  {"version", 1},
                  {"width", c.width},
                  {"height", c.height},
                  {"intrinsics", io::to_json(seq.K)},
                  {"planes", {"left", "right", "disparity"}},
                  {"config",
                   {{"scene_seed", c.scene_seed},
                    {"seed", c.seed},
                    {"frames", c.frames},
                    {"spacing", c.spacing},
                    {"curvature", c.curvature},
                    {"lateral_jitter", c.lateral_jitter},
                    {"heading_jitter", c.heading_jitter},
                    {"condition", c.condition},
                    {"scene", scene_json(c.scene)}}},
                  {"frames", frames}});
}

Sequence read_sequence(const fs::path& dir) {
  const io::json m = io::read_json(dir / "manifest.json");
  if (m.value("format", "") != "vtrfeat-sequence")
    throw IoError("not a sequence manifest: " + (dir / "manifest.json").string());
  Sequence seq;
  try {
    SequenceConfig& c = seq.config;
    c.width = m.at("width").get<int>();
    c.height = m.at("height").get<int>();
    const io::json& cj = m.at("config");
    c.scene_seed = cj.at("scene_seed").get<std::uint64_t>();
    c.seed = cj.at("seed").get<std::uint64_t>();
    c.frames = cj.at("frames").get<int>();
    c.spacing = cj.at("spacing").get<double>();
    c.curvature = cj.at("curvature").get<double>();
    c.lateral_jitter = cj.at("lateral_jitter").get<double>();
    c.heading_jitter = cj.at("heading_jitter").get<double>();
    c.condition = cj.at("condition").get<std::string>();
    c.scene = scene_from_json(cj.at("scene"));
    seq.K = io::intrinsics_from_json(m.at("intrinsics"));
    for (const io::json& fj : m.at("frames")) {
      std::vector<Image> planes = io::read_planes(dir / fj.at("file").get<std::string>(), c.width, c.height, 3);
      seq.frames.push_back(
          {std::move(planes[0]), std::move(planes[1]), std::move(planes[2]), io::pose_from_json(fj.at("pose"))});
    }
  } catch (const io::json::exception& e) {
    throw IoError("malformed sequence manifest in " + dir.string() + ": " + e.what());
  }
  return seq;
}

}  // namespace vtrfeat
