#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "vtrfeat/geometry.hpp"
#include "vtrfeat/image.hpp"

namespace vtrfeat::io {

using json = nlohmann::json;

/// Raw little-endian float32 blob, written atomically-enough for our use
/// (truncate + write). Throws IoError with the path on failure.
void write_f32(const std::filesystem::path& path, std::span<const float> data);
std::vector<float> read_f32(const std::filesystem::path& path);

/// Concatenated equal-sized images.
void write_planes(const std::filesystem::path& path, const std::vector<const Image*>& planes);
std::vector<Image> read_planes(const std::filesystem::path& path, int width, int height, int count);

void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

/// Writes `text` to `path`, throwing IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

json to_json(const CameraIntrinsics& K);
CameraIntrinsics intrinsics_from_json(const json& j);
/// 4x4 row-major.
json to_json(const SE3Pose& T);
SE3Pose pose_from_json(const json& j);
json to_json(const PlanarPose& p);
PlanarPose planar_from_json(const json& j);

/// Derives an independent 64-bit seed from (base, stream, index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace vtrfeat::io
