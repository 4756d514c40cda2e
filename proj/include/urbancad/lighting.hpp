#pragma once

#include "urbancad/common.hpp"
#include "urbancad/envmap.hpp"

#include <optional>
#include <string>
#include <vector>

namespace urbancad {

/// Equidistant fisheye (r = f * theta). Camera frame: x right, y down, z along
/// the optical axis; `orientation` maps camera directions to world.
struct FisheyeImage {
  ImageRGB pixels;  // LDR, [0, 1]
  double fov = kPi;  // full field of view, radians
  double f = 1.0;    // pixels per radian
  double cx = 0.0;
  double cy = 0.0;
  Mat3 orientation = Mat3::Identity();
  Vec3 position = Vec3::Zero();

  void validate() const;
  Vec3 axis() const { return orientation.col(2); }
  /// Image point of a world direction, or nothing outside the field of view.
  std::optional<Vec2> project(const Vec3& world_direction) const;
  /// World direction through image point (px, py).
  Vec3 unproject(double px, double py) const;
  /// Bilinear lookup at image point (px, py), borders clamped.
  Vec3 sample(double px, double py) const;
};

/// PNG plus a sidecar with the same stem: fov_deg, f, cx, cy, orientation as
/// a quaternion [w, x, y, z], position.
FisheyeImage read_fisheye(const std::string& png_path);
void write_fisheye(const std::string& png_path, const FisheyeImage& image);

/// Equirectangular image in world orientation (W = 2H) with its capture point.
struct Panorama {
  ImageRGB pixels;
  Vec3 capture_position = Vec3::Zero();
};

/// Fisheye of `size` x `size` pixels looking along `orientation`, sampled
/// bilinearly from `source`. The image circle touches the border.
FisheyeImage fisheye_from_panorama(const Panorama& source, const Mat3& orientation, const Vec3& position, double fov,
                                   int size);

/// Orientation of a camera whose optical axis is `axis` with image y pointing
/// towards world -z (up in the image is world up).
Mat3 fisheye_orientation(const Vec3& axis);

/// Blends the two fisheyes per panorama direction with weights FOV/2 - angle
/// to each optical axis. Throws ValidationError naming the uncovered solid
/// angle when some direction lies outside both fields of view.
Panorama stitch_panorama(const FisheyeImage& left, const FisheyeImage& right, int height = 256);

struct SkyModelParams {
  double gamma = 2.2;
  double sun_percentile = 99.5;
  double sun_boost = 50.0;
  int boundary_row = -1;            // sky/ground boundary; -1 means the horizon row H/2
  double non_sky_luminance = 0.02;  // linear luminance below which sky-row pixels count as ground

  void validate() const;
  int boundary(int height) const { return boundary_row < 0 ? height / 2 : boundary_row; }
};

/// Linearizes x^gamma and boosts pixels brighter than the luminance
/// percentile t by up to `sun_boost`, ramping with a smoothstep from t to the
/// peak luminance (peak pixels always get the full boost). Boosting is off
/// when max / median luminance is below 1.2.
ImageRGB ldr_to_hdr_sky(const ImageRGB& sky, const SkyModelParams& params = {});

/// Ground pixels: rows at or below the boundary, plus sky-row pixels darker
/// than `non_sky_luminance` after linearization.
Mask default_non_sky_mask(const ImageRGB& panorama, const SkyModelParams& params = {});

/// Sky from `hdr_sky` (the rows above the boundary), ground from the
/// linearized panorama scaled so the median luminance of the 4 rows above
/// the boundary (sky pixels) equals that of the 4 rows below (ground pixels).
EnvironmentMap compose_envmap(const ImageRGB& hdr_sky, const Panorama& panorama, const Mask* non_sky_mask = nullptr,
                              const SkyModelParams& params = {}, Diagnostics* diagnostics = nullptr,
                              double* scale = nullptr);

/// Index of the map captured nearest to `point`; ties go to the earliest.
size_t select_envmap_index(const std::vector<EnvironmentMap>& maps, const Vec3& point);
const EnvironmentMap& select_envmap(const std::vector<EnvironmentMap>& maps, const Vec3& point);

/// Fraction of pixels with a channel at the top code value.
double saturation_fraction(const ImageRGB& ldr);

}  // namespace urbancad
