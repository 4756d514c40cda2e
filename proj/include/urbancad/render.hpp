#pragma once

#include "urbancad/assets.hpp"
#include "urbancad/common.hpp"
#include "urbancad/envmap.hpp"
#include "urbancad/matgraph.hpp"

#include <functional>
#include <map>

namespace urbancad {

/// Pinhole camera. Camera frame: x right, y down, z forward; `pose` maps world
/// points into that frame. Pixel (i, j) has its centre at (i + 0.5, j + 0.5).
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
  RigidTransform pose;

  void validate() const;
  Vec3 center() const { return pose.inverse().translation; }
  /// Unit world-space direction of the ray through image point (px, py).
  Vec3 ray_direction(double px, double py) const;
};

/// Camera at `eye` looking at `target` with world z up; `fov_y` in degrees.
CameraModel look_at_camera(int width, int height, double fov_y, const Vec3& eye, const Vec3& target);

inline constexpr double kNearPlane = 1e-3;

struct RenderBuffers {
  int width = 0;
  int height = 0;
  Mask coverage;
  Image<Vec2> uv;            // (0,0) where uncovered
  Image<int> material;       // -1 where uncovered
  Image<int> triangle;       // -1 where uncovered
  ImageRGB normal;           // unit world normal, zero where uncovered
  ImageRGB tangent;          // world dP/du of the covering triangle, zero where uncovered
  ImageRGB position;         // world position, zero where uncovered
  ImageF depth;              // camera z, +inf where uncovered
  int degenerate_triangles = 0;
};

/// Z-buffered rasterization with near-plane clipping and perspective-correct
/// interpolation. No back-face culling; depth ties keep the earlier triangle.
RenderBuffers rasterize(const TriangleMesh& mesh, const RigidTransform& model_pose, const CameraModel& camera);

struct ShadePixel {
  Vec3 albedo = Vec3::Zero();
  Vec3 normal = Vec3(0, 0, 1);  // unit world normal
  double roughness = 1.0;
  double transmission = 0.0;
  double metallic = 0.0;
  bool covered = false;
};
using ShadeGrid = Image<ShadePixel>;
using TextureMap = std::map<int, TextureSet>;

/// Per-pixel cotangent of a ShadeGrid. Only albedo and the world normal carry
/// gradients; an empty normal image means zero.
struct ShadeCotangent {
  ImageRGB albedo;
  ImageRGB normal;
};

/// Bilinear wrap sampling of every covered pixel's textures. Throws
/// EvaluationError when a covered material index has no TextureSet.
ShadeGrid sample_textures(const RenderBuffers& buffers, const TextureMap& textures);

using SamplePullback = std::function<std::map<int, TextureCotangent>(const ShadeCotangent&)>;
struct SampledGrid {
  ShadeGrid pixels;
  SamplePullback pullback;
};
SampledGrid sample_textures_with_grad(const RenderBuffers& buffers, const TextureMap& textures);

/// Bilinear wrap lookup at texture coordinate (u, v); texel (x, y) sits at
/// ((x + 0.5) / W, (y + 0.5) / H).
struct BilinearTap {
  int index[4];
  double weight[4];
};
BilinearTap bilinear_tap(const Vec2& uv, int width, int height);

}  // namespace urbancad
