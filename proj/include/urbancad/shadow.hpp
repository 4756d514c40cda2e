#pragma once

#include "urbancad/envmap.hpp"
#include "urbancad/render.hpp"
#include "urbancad/shading.hpp"

#include <array>
#include <limits>
#include <optional>

namespace urbancad {

/// Bounding volume hierarchy over world-space triangles for ray queries.
class TriangleBvh {
 public:
  explicit TriangleBvh(std::vector<std::array<Vec3, 3>> triangles);

  struct Hit {
    double t;
    int triangle;
  };
  /// Nearest hit with t in (t_min, t_max).
  std::optional<Hit> closest(const Vec3& origin, const Vec3& direction, double t_min = 0.0,
                             double t_max = std::numeric_limits<double>::infinity()) const;
  bool occluded(const Vec3& origin, const Vec3& direction, double t_min = 0.0,
                double t_max = std::numeric_limits<double>::infinity()) const;

  size_t size() const { return triangles_.size(); }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;  // inner: child indices; leaf: left = -1, [first, first + count)
    int right = -1;
    int first = 0;
    int count = 0;
  };
  int build(int first, int count);
  template <bool AnyHit>
  std::optional<Hit> trace(const Vec3& origin, const Vec3& direction, double t_min, double t_max) const;

  std::vector<std::array<Vec3, 3>> triangles_;
  std::vector<Node> nodes_;
};

std::vector<std::array<Vec3, 3>> world_triangles(const TriangleMesh& mesh, const RigidTransform& model_pose);

struct Plane {
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3(0, 0, 1);
};

/// Ratio of occluded to unoccluded luminance-weighted irradiance on the plane,
/// per pixel whose camera ray hits the plane; 1 elsewhere. The environment is
/// box-filtered to `max_env_width` first.
ImageF render_shadow_plane(const TriangleMesh& mesh, const RigidTransform& model_pose, const Plane& plane,
                           const EnvironmentMap& env, const CameraModel& camera, int max_env_width = 32);

/// Display transform clamp((x * exposure)^(1/gamma)).
double tone_map(double x, double exposure, double gamma);

/// out = tone_map(fg) * alpha + bg * shadow * (1 - alpha). Throws DimensionError
/// when resolutions differ.
ImageRGB composite(const ShadedImage& fg, const ImageF& shadow, const ImageRGB& background, double exposure = 1.0,
                   double gamma = 2.2);

}  // namespace urbancad
