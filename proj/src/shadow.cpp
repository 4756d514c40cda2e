#include "urbancad/shadow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace urbancad {

namespace {

// Moller-Trumbore; returns t or a negative value on a miss.
double intersect(const std::array<Vec3, 3>& tri, const Vec3& o, const Vec3& d) {
  const Vec3 e1 = tri[1] - tri[0], e2 = tri[2] - tri[0];
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-300) return -1.0;
  const double inv = 1.0 / det;
  const Vec3 s = o - tri[0];
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return -1.0;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return -1.0;
  return e2.dot(q) * inv;
}

bool hit_box(const Eigen::AlignedBox3d& box, const Vec3& o, const Vec3& inv_d, double t_min, double t_max) {
  for (int k = 0; k < 3; ++k) {
    double t0 = (box.min()[k] - o[k]) * inv_d[k];
    double t1 = (box.max()[k] - o[k]) * inv_d[k];
    if (t0 > t1) std::swap(t0, t1);
    if (std::isnan(t0) || std::isnan(t1)) continue;  // ray parallel to and on a slab face
    t_min = std::max(t_min, t0);
    t_max = std::min(t_max, t1);
    if (t_min > t_max) return false;
  }
  return true;
}

}  // namespace

TriangleBvh::TriangleBvh(std::vector<std::array<Vec3, 3>> triangles) : triangles_(std::move(triangles)) {
  if (!triangles_.empty()) build(0, int(triangles_.size()));
}

int TriangleBvh::build(int first, int count) {
  const int index = int(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box, centroids;
  for (int i = first; i < first + count; ++i) {
    for (const Vec3& p : triangles_[size_t(i)]) box.extend(p);
    centroids.extend((triangles_[size_t(i)][0] + triangles_[size_t(i)][1] + triangles_[size_t(i)][2]) / 3.0);
  }
  nodes_[size_t(index)].box = box;
  if (count <= 4) {
    nodes_[size_t(index)].first = first;
    nodes_[size_t(index)].count = count;
    return index;
  }
  int axis;
  centroids.sizes().maxCoeff(&axis);
  const int mid = first + count / 2;
  std::nth_element(triangles_.begin() + first, triangles_.begin() + mid, triangles_.begin() + first + count,
                   [axis](const auto& a, const auto& b) {
                     return (a[0][axis] + a[1][axis] + a[2][axis]) < (b[0][axis] + b[1][axis] + b[2][axis]);
                   });
  const int left = build(first, mid - first);
  const int right = build(mid, first + count - mid);
  nodes_[size_t(index)].left = left;
  nodes_[size_t(index)].right = right;
  return index;
}

template <bool AnyHit>
std::optional<TriangleBvh::Hit> TriangleBvh::trace(const Vec3& o, const Vec3& d, double t_min, double t_max) const {
  if (nodes_.empty()) return std::nullopt;
  const Vec3 inv_d = d.cwiseInverse();
  std::optional<Hit> best;
  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[size_t(stack[--top])];
    if (!hit_box(node.box, o, inv_d, t_min, t_max)) continue;
    if (node.left < 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const double t = intersect(triangles_[size_t(i)], o, d);
        if (t > t_min && t < t_max) {
          best = Hit{t, i};
          if (AnyHit) return best;
          t_max = t;
        }
      }
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  return best;
}

std::optional<TriangleBvh::Hit> TriangleBvh::closest(const Vec3& origin, const Vec3& direction, double t_min,
                                                     double t_max) const {
  return trace<false>(origin, direction, t_min, t_max);
}

bool TriangleBvh::occluded(const Vec3& origin, const Vec3& direction, double t_min, double t_max) const {
  return trace<true>(origin, direction, t_min, t_max).has_value();
}

std::vector<std::array<Vec3, 3>> world_triangles(const TriangleMesh& mesh, const RigidTransform& model_pose) {
  std::vector<std::array<Vec3, 3>> out;
  out.reserve(mesh.triangles.size());
  for (const Triangle& t : mesh.triangles)
    out.push_back({model_pose.apply(mesh.vertices[size_t(t[0].position)]),
                   model_pose.apply(mesh.vertices[size_t(t[1].position)]),
                   model_pose.apply(mesh.vertices[size_t(t[2].position)])});
  return out;
}

ImageF render_shadow_plane(const TriangleMesh& mesh, const RigidTransform& model_pose, const Plane& plane,
                           const EnvironmentMap& env, const CameraModel& camera, int max_env_width) {
  camera.validate();
  env.validate();
  const EnvironmentMap small = downsample_environment(env, max_env_width);
  const Vec3 n = plane.normal.normalized();
  struct Light {
    Vec3 direction;
    double weight;
  };
  std::vector<Light> lights;
  double total = 0.0;
  for (int r = 0; r < small.height(); ++r)
    for (int c = 0; c < small.width(); ++c) {
      const Vec3 d = small.texel_direction(r, c);
      const double w = luminance(small.radiance.at(c, r)) * std::max(0.0, n.dot(d)) *
                       equirect_solid_angle(r, small.width(), small.height());
      if (w > 0) {
        lights.push_back({d, w});
        total += w;
      }
    }
  ImageF out(camera.width, camera.height, 1.0);
  if (!(total > 0)) return out;
  const TriangleBvh bvh(world_triangles(mesh, model_pose));
  const Vec3 eye = camera.center();
  const auto [lo, hi] = mesh.bounds();
  const double offset = 1e-6 * std::max(1.0, (hi - lo).norm());
  parallel_for(camera.height, [&](int y) {
    for (int x = 0; x < camera.width; ++x) {
      const Vec3 d = camera.ray_direction(x + 0.5, y + 0.5);
      const double denom = n.dot(d);
      if (std::abs(denom) < 1e-12) continue;
      const double t = n.dot(plane.point - eye) / denom;
      if (t <= 0) continue;
      const Vec3 p = eye + t * d + offset * n;
      double visible = 0.0;
      for (const Light& l : lights)
        if (!bvh.occluded(p, l.direction)) visible += l.weight;
      out.at(x, y) = std::clamp(visible / total, 0.0, 1.0);
    }
  });
  return out;
}

double tone_map(double x, double exposure, double gamma) {
  return clamp01(std::pow(std::max(0.0, x * exposure), 1.0 / gamma));
}

ImageRGB composite(const ShadedImage& fg, const ImageF& shadow, const ImageRGB& background, double exposure,
                   double gamma) {
  if (!fg.radiance.same_shape(background) || !fg.alpha.same_shape(background) || !shadow.same_shape(background))
    throw DimensionError("composite inputs differ in resolution");
  ImageRGB out(background.width, background.height);
  for (size_t i = 0; i < out.size(); ++i) {
    const double a = fg.alpha.pixels[i];
    Vec3 t;
    for (int k = 0; k < 3; ++k) t[k] = tone_map(fg.radiance.pixels[i][k], exposure, gamma);
    out.pixels[i] = a * t + (1.0 - a) * shadow.pixels[i] * background.pixels[i];
  }
  return out;
}

}  // namespace urbancad
