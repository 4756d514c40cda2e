#include "urbancad/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace urbancad {

void CameraModel::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ValidationError("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ValidationError("camera resolution must be positive");
  if ((pose.rotation.transpose() * pose.rotation - Mat3::Identity()).norm() >= 1e-6)
    throw ValidationError("camera rotation is not orthonormal");
}

Vec3 CameraModel::ray_direction(double px, double py) const {
  const Vec3 d((px - cx) / fx, (py - cy) / fy, 1.0);
  return pose.rotation.transpose() * d.normalized();
}

CameraModel look_at_camera(int width, int height, double fov_y, const Vec3& eye, const Vec3& target) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 up(0, 0, 1);
  if (std::abs(forward.dot(up)) > 0.999) up = Vec3(0, 1, 0);
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * fov_y * kPi / 180.0);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.pose.rotation.row(0) = right;
  cam.pose.rotation.row(1) = down;
  cam.pose.rotation.row(2) = forward;
  cam.pose.translation = -(cam.pose.rotation * eye);
  return cam;
}

namespace {

struct ClipVertex {
  Vec3 cam;
  Vec3 bary;
};

// Keeps the part of the polygon with z >= near.
std::vector<ClipVertex> clip_near(const std::array<ClipVertex, 3>& tri) {
  std::vector<ClipVertex> out;
  for (size_t i = 0; i < 3; ++i) {
    const ClipVertex& a = tri[i];
    const ClipVertex& b = tri[(i + 1) % 3];
    const bool a_in = a.cam.z() >= kNearPlane, b_in = b.cam.z() >= kNearPlane;
    if (a_in) out.push_back(a);
    if (a_in != b_in) {
      const double t = (kNearPlane - a.cam.z()) / (b.cam.z() - a.cam.z());
      ClipVertex v{a.cam + t * (b.cam - a.cam), a.bary + t * (b.bary - a.bary)};
      v.cam.z() = kNearPlane;
      out.push_back(v);
    }
  }
  return out;
}

struct ScreenTriangle {
  int source;
  Vec2 s[3];
  double inv_z[3];
  Vec3 bary[3];
  bool top_left[3];  // edge k runs from vertex k+1 to k+2
  double area;
  int x0, x1, y0, y1;
};

inline double edge(const Vec2& a, const Vec2& b, double px, double py) {
  return (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
}

Vec3 any_perpendicular(const Vec3& n) {
  const Vec3 axis = std::abs(n.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  return (axis - n * n.dot(axis)).normalized();
}

}  // namespace

RenderBuffers rasterize(const TriangleMesh& mesh, const RigidTransform& model_pose, const CameraModel& camera) {
  camera.validate();
  const int w = camera.width, h = camera.height;
  RenderBuffers buf;
  buf.width = w;
  buf.height = h;
  buf.coverage = Mask(w, h, 0);
  buf.uv = Image<Vec2>(w, h, Vec2::Zero());
  buf.material = Image<int>(w, h, -1);
  buf.triangle = Image<int>(w, h, -1);
  buf.normal = ImageRGB(w, h, Vec3::Zero());
  buf.tangent = ImageRGB(w, h, Vec3::Zero());
  buf.position = ImageRGB(w, h, Vec3::Zero());
  buf.depth = ImageF(w, h, std::numeric_limits<double>::infinity());

  const std::vector<int> materials = mesh.triangle_materials();
  std::vector<Vec3> world(mesh.vertices.size());
  for (size_t i = 0; i < world.size(); ++i) world[i] = model_pose.apply(mesh.vertices[i]);
  std::vector<Vec3> tangents(mesh.triangles.size(), Vec3::Zero());

  std::vector<ScreenTriangle> screen;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const Triangle& tri = mesh.triangles[t];
    const Vec3 e1 = world[size_t(tri[1].position)] - world[size_t(tri[0].position)];
    const Vec3 e2 = world[size_t(tri[2].position)] - world[size_t(tri[0].position)];
    const double scale = std::max({1e-300, e1.squaredNorm(), e2.squaredNorm()});
    if (e1.cross(e2).norm() <= 1e-12 * scale) {
      ++buf.degenerate_triangles;
      continue;
    }
    const Vec2 d1 = mesh.uvs[size_t(tri[1].uv)] - mesh.uvs[size_t(tri[0].uv)];
    const Vec2 d2 = mesh.uvs[size_t(tri[2].uv)] - mesh.uvs[size_t(tri[0].uv)];
    const double det = d1.x() * d2.y() - d1.y() * d2.x();
    tangents[t] = std::abs(det) > 1e-20 ? Vec3((e1 * d2.y() - e2 * d1.y()) / det) : any_perpendicular(e1.cross(e2).normalized());

    std::array<ClipVertex, 3> cv;
    for (int k = 0; k < 3; ++k)
      cv[size_t(k)] = {camera.pose.apply(world[size_t(tri[size_t(k)].position)]), Vec3::Unit(k)};
    const std::vector<ClipVertex> poly = clip_near(cv);
    for (size_t k = 1; k + 1 < poly.size(); ++k) {
      const ClipVertex* v[3] = {&poly[0], &poly[k], &poly[k + 1]};
      ScreenTriangle st;
      st.source = int(t);
      for (int i = 0; i < 3; ++i) {
        const Vec3& c = v[i]->cam;
        st.s[i] = Vec2(camera.fx * c.x() / c.z() + camera.cx, camera.fy * c.y() / c.z() + camera.cy);
        st.inv_z[i] = 1.0 / c.z();
        st.bary[i] = v[i]->bary;
      }
      st.area = edge(st.s[0], st.s[1], st.s[2].x(), st.s[2].y());
      if (!(std::abs(st.area) > 0.0) || !std::isfinite(st.area)) continue;
      if (st.area < 0) {
        std::swap(st.s[1], st.s[2]);
        std::swap(st.inv_z[1], st.inv_z[2]);
        std::swap(st.bary[1], st.bary[2]);
        st.area = -st.area;
      }
      for (int e = 0; e < 3; ++e) {
        const Vec2& a = st.s[(e + 1) % 3];
        const Vec2& b = st.s[(e + 2) % 3];
        st.top_left[e] = (a.y() == b.y() && b.x() > a.x()) || b.y() < a.y();
      }
      const double minx = std::min({st.s[0].x(), st.s[1].x(), st.s[2].x()});
      const double maxx = std::max({st.s[0].x(), st.s[1].x(), st.s[2].x()});
      const double miny = std::min({st.s[0].y(), st.s[1].y(), st.s[2].y()});
      const double maxy = std::max({st.s[0].y(), st.s[1].y(), st.s[2].y()});
      if (maxx < 0 || maxy < 0 || minx > w || miny > h) continue;
      st.x0 = std::max(0, int(std::floor(minx - 0.5)));
      st.x1 = std::min(w - 1, int(std::ceil(maxx - 0.5)));
      st.y0 = std::max(0, int(std::floor(miny - 0.5)));
      st.y1 = std::min(h - 1, int(std::ceil(maxy - 0.5)));
      screen.push_back(st);
    }
  }

  // Row bands are independent; within a band triangles keep mesh order, so the
  // result does not depend on the thread count.
  constexpr int kBand = 16;
  const int bands = (h + kBand - 1) / kBand;
  parallel_for(bands, [&](int band) {
    const int row0 = band * kBand, row1 = std::min(h, row0 + kBand) - 1;
    for (const ScreenTriangle& st : screen) {
      const int y0 = std::max(st.y0, row0), y1 = std::min(st.y1, row1);
      if (y0 > y1) continue;
      const Triangle& tri = mesh.triangles[size_t(st.source)];
      for (int y = y0; y <= y1; ++y)
        for (int x = st.x0; x <= st.x1; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          double wgt[3];
          bool inside = true;
          for (int e = 0; e < 3 && inside; ++e) {
            wgt[e] = edge(st.s[(e + 1) % 3], st.s[(e + 2) % 3], px, py);
            inside = wgt[e] > 0 || (wgt[e] == 0 && st.top_left[e]);
          }
          if (!inside) continue;
          double q[3], qsum = 0;
          for (int i = 0; i < 3; ++i) {
            q[i] = wgt[i] / st.area * st.inv_z[i];
            qsum += q[i];
          }
          const double z = 1.0 / qsum;
          if (!(z < buf.depth.at(x, y))) continue;
          Vec3 b = Vec3::Zero();
          for (int i = 0; i < 3; ++i) b += (q[i] / qsum) * st.bary[i];
          buf.depth.at(x, y) = z;
          buf.coverage.at(x, y) = 1;
          buf.triangle.at(x, y) = st.source;
          buf.material.at(x, y) = materials[size_t(st.source)];
          Vec2 uv = Vec2::Zero();
          Vec3 n = Vec3::Zero(), p = Vec3::Zero();
          for (int k = 0; k < 3; ++k) {
            uv += b[k] * mesh.uvs[size_t(tri[size_t(k)].uv)];
            n += b[k] * mesh.normals[size_t(tri[size_t(k)].normal)];
            p += b[k] * world[size_t(tri[size_t(k)].position)];
          }
          n = model_pose.rotation * n;
          const double len = n.norm();
          buf.uv.at(x, y) = uv;
          buf.normal.at(x, y) = len > 0 ? Vec3(n / len) : Vec3(0, 0, 1);
          buf.position.at(x, y) = p;
          buf.tangent.at(x, y) = tangents[size_t(st.source)];
        }
    }
  });
  return buf;
}

BilinearTap bilinear_tap(const Vec2& uv, int width, int height) {
  const double px = uv.x() * width - 0.5, py = uv.y() * height - 0.5;
  const double fx0 = std::floor(px), fy0 = std::floor(py);
  const double fx = px - fx0, fy = py - fy0;
  const auto wrap = [](long long i, int n) { return int(((i % n) + n) % n); };
  const int x0 = wrap((long long)fx0, width), x1 = wrap((long long)fx0 + 1, width);
  const int y0 = wrap((long long)fy0, height), y1 = wrap((long long)fy0 + 1, height);
  return {{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
          {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

namespace {

struct Frame {
  Vec3 t, b, n;
};

Frame shading_frame(const Vec3& normal, const Vec3& tangent) {
  Vec3 t = tangent - normal * normal.dot(tangent);
  const double len = t.norm();
  t = len > 1e-12 ? Vec3(t / len) : any_perpendicular(normal);
  return {t, normal.cross(t), normal};
}

const TextureSet& texture_for(const TextureMap& textures, int material) {
  const auto it = textures.find(material);
  if (it == textures.end())
    throw EvaluationError("no textures for material index " + std::to_string(material));
  return it->second;
}

template <typename T>
T tap_value(const BilinearTap& tap, const std::vector<T>& texels) {
  T v = tap.weight[0] * texels[size_t(tap.index[0])];
  for (int k = 1; k < 4; ++k) v += tap.weight[k] * texels[size_t(tap.index[k])];
  return v;
}

// World normal before normalization, and the frame that produced it.
struct SampledNormal {
  Vec3 raw;
  Frame frame;
};

SampledNormal sample_normal(const RenderBuffers& buffers, int i, const TextureSet& tex, const BilinearTap& tap) {
  const Frame f = shading_frame(buffers.normal.pixels[size_t(i)], buffers.tangent.pixels[size_t(i)]);
  const Vec3 m = tap_value(tap, tex.normal.pixels);
  return {f.t * m.x() + f.b * m.y() + f.n * m.z(), f};
}

ShadeGrid sample_impl(const RenderBuffers& buffers, const TextureMap& textures) {
  ShadeGrid grid(buffers.width, buffers.height);
  const int n = buffers.width * buffers.height;
  for (int i = 0; i < n; ++i)
    if (buffers.coverage.pixels[size_t(i)]) texture_for(textures, buffers.material.pixels[size_t(i)]);
  parallel_for(buffers.height, [&](int y) {
    for (int x = 0; x < buffers.width; ++x) {
      const int i = y * buffers.width + x;
      if (!buffers.coverage.pixels[size_t(i)]) continue;
      const TextureSet& tex = textures.at(buffers.material.pixels[size_t(i)]);
      const BilinearTap tap = bilinear_tap(buffers.uv.pixels[size_t(i)], tex.width, tex.height);
      ShadePixel& p = grid.pixels[size_t(i)];
      p.covered = true;
      p.albedo = tap_value(tap, tex.albedo.pixels);
      p.roughness = tap_value(tap, tex.roughness.pixels);
      p.transmission = tex.has_transmission() ? tap_value(tap, tex.transmission.pixels) : 0.0;
      p.metallic = tex.metallic;
      const SampledNormal sn = sample_normal(buffers, i, tex, tap);
      const double len = sn.raw.norm();
      p.normal = len > 0 ? Vec3(sn.raw / len) : buffers.normal.pixels[size_t(i)];
    }
  });
  return grid;
}

}  // namespace

ShadeGrid sample_textures(const RenderBuffers& buffers, const TextureMap& textures) {
  return sample_impl(buffers, textures);
}

SampledGrid sample_textures_with_grad(const RenderBuffers& buffers, const TextureMap& textures) {
  SampledGrid out;
  out.pixels = sample_impl(buffers, textures);
  auto buf = std::make_shared<RenderBuffers>(buffers);
  auto tex = std::make_shared<TextureMap>(textures);
  out.pullback = [buf, tex](const ShadeCotangent& cot) {
    std::map<int, TextureCotangent> result;
    for (const auto& [m, t] : *tex) {
      result[m] = TextureCotangent::zeros_like(t);
    }
    const bool has_albedo = cot.albedo.width > 0, has_normal = cot.normal.width > 0;
    const int n = buf->width * buf->height;
    for (int i = 0; i < n; ++i) {
      if (!buf->coverage.pixels[size_t(i)]) continue;
      const int m = buf->material.pixels[size_t(i)];
      const TextureSet& t = tex->at(m);
      TextureCotangent& c = result.at(m);
      const BilinearTap tap = bilinear_tap(buf->uv.pixels[size_t(i)], t.width, t.height);
      if (has_albedo) {
        const Vec3& g = cot.albedo.pixels[size_t(i)];
        for (int k = 0; k < 4; ++k) c.albedo.pixels[size_t(tap.index[k])] += tap.weight[k] * g;
      }
      if (has_normal) {
        const SampledNormal sn = sample_normal(*buf, i, t, tap);
        const double len = sn.raw.norm();
        if (len <= 0) continue;
        const Vec3 nrm = sn.raw / len;
        const Vec3& g = cot.normal.pixels[size_t(i)];
        const Vec3 d_raw = (g - nrm * nrm.dot(g)) / len;
        const Vec3 d_m(sn.frame.t.dot(d_raw), sn.frame.b.dot(d_raw), sn.frame.n.dot(d_raw));
        for (int k = 0; k < 4; ++k) c.normal.pixels[size_t(tap.index[k])] += tap.weight[k] * d_m;
      }
    }
    return result;
  };
  return out;
}

}  // namespace urbancad
