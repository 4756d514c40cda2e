#pragma once

#include "urbancad/common.hpp"

#include <string>

namespace urbancad {

/// Equirectangular radiance map. Map frame is z-up; the column index grows with
/// azimuth atan2(y, x) and row 0 looks straight up. `orientation` rotates map
/// directions into the world frame.
struct EnvironmentMap {
  ImageRGB radiance;
  Vec3 capture_position = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();

  int width() const { return radiance.width; }
  int height() const { return radiance.height; }

  /// Throws ValidationError unless W = 2H and every value is finite and >= 0.
  void validate() const;

  /// World direction through the centre of texel (row, col).
  Vec3 texel_direction(int row, int col) const;
};

/// Direction (unit, map frame) <-> equirect pixel.
struct EquirectPixel {
  int row;
  int col;
};
EquirectPixel equirect_pixel(const Vec3& direction, int width, int height);
Vec3 equirect_direction(int row, int col, int width, int height);
/// Continuous pixel coordinates (x along columns, y along rows) in the same
/// convention as equirect_direction, i.e. texel centres at integer x and y + 0.5.
Vec2 equirect_coordinates(const Vec3& direction, int width, int height);
/// Exact solid angle of a texel in `row`.
double equirect_solid_angle(int row, int width, int height);

/// Bilinear radiance lookup (wrap in azimuth, clamp in elevation) for a world direction.
Vec3 sample_environment(const EnvironmentMap& env, const Vec3& world_direction);

EnvironmentMap uniform_environment(const Vec3& radiance, int width = 64, int height = 32);

/// Solid-angle weighted box filter to at most `max_width` x `max_width / 2`.
/// Integrated radiance is preserved.
EnvironmentMap downsample_environment(const EnvironmentMap& env, int max_width);

/// PFM radiance plus a JSON sidecar holding capture position and orientation.
void write_environment(const std::string& pfm_path, const EnvironmentMap& env);
EnvironmentMap read_environment(const std::string& pfm_path);

}  // namespace urbancad
