#include "vtrfeat/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "vtrfeat/errors.hpp"

namespace vtrfeat::io {

namespace fs = std::filesystem;

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

void ensure_parent(const fs::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
}

}  // namespace

void write_f32(const fs::path& path, std::span<const float> data) {
  ensure_parent(path);
  std::vector<std::uint32_t> buf(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) buf[i] = to_le(std::bit_cast<std::uint32_t>(data[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<float> read_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4) throw IoError("blob size not a multiple of 4: " + path.string());
  std::vector<std::uint32_t> buf(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("read failed: " + path.string());
  std::vector<float> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = std::bit_cast<float>(to_le(buf[i]));
  return out;
}

void write_planes(const fs::path& path, const std::vector<const Image*>& planes) {
  std::vector<float> all;
  for (const Image* p : planes) all.insert(all.end(), p->data.begin(), p->data.end());
  write_f32(path, all);
}

std::vector<Image> read_planes(const fs::path& path, int width, int height, int count) {
  const std::vector<float> all = read_f32(path);
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (all.size() != n * static_cast<std::size_t>(count))
    throw IoError("unexpected blob size in " + path.string());
  std::vector<Image> out;
  for (int k = 0; k < count; ++k) {
    Image img(width, height);
    std::copy_n(all.begin() + static_cast<std::ptrdiff_t>(n * k), n, img.data.begin());
    out.push_back(std::move(img));
  }
  return out;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

json to_json(const CameraIntrinsics& K) {
  return {{"fu", K.fu}, {"fv", K.fv}, {"cu", K.cu}, {"cv", K.cv}, {"b", K.b}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  return {j.at("fu").get<double>(), j.at("fv").get<double>(), j.at("cu").get<double>(), j.at("cv").get<double>(),
          j.at("b").get<double>()};
}

json to_json(const SE3Pose& T) {
  const Mat4 m = T.matrix();
  json a = json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

SE3Pose pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 16) throw IoError("pose must be 16 numbers");
  Mat3 C;
  Vec3 r;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) C(i, k) = j[static_cast<std::size_t>(i * 4 + k)].get<double>();
    r[i] = j[static_cast<std::size_t>(i * 4 + 3)].get<double>();
  }
  return SE3Pose(C, r);
}

json to_json(const PlanarPose& p) { return {{"alpha", p.alpha}, {"beta", p.beta}, {"gamma", p.gamma}}; }

PlanarPose planar_from_json(const json& j) {
  return {j.at("alpha").get<double>(), j.at("beta").get<double>(), j.at("gamma").get<double>()};
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 finalizer over a simple combination.
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1) + 0xbf58476d1ce4e5b9ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace vtrfeat::io
