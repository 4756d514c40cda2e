#include "urbancad/fixture.hpp"

#include <algorithm>
#include <cmath>

namespace urbancad {

namespace {

// Appends an axis-aligned box with outward normals; uv in metres along the
// two in-face axes.
void add_box(TriangleMesh& m, const Vec3& lo, const Vec3& hi) {
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int a = (axis + 1) % 3, b = (axis + 2) % 3;
      Vec3 n = Vec3::Zero();
      n[axis] = side ? 1.0 : -1.0;
      const double c = side ? hi[axis] : lo[axis];
      Vec3 p[4];
      const double ua[4] = {lo[a], hi[a], hi[a], lo[a]}, ub[4] = {lo[b], lo[b], hi[b], hi[b]};
      for (int k = 0; k < 4; ++k) {
        p[k][axis] = c;
        p[k][a] = ua[k];
        p[k][b] = ub[k];
      }
      const int base = int(m.vertices.size()), uv0 = int(m.uvs.size()), ni = int(m.normals.size());
      for (int k = 0; k < 4; ++k) {
        m.vertices.push_back(p[k]);
        m.uvs.emplace_back(ua[k], ub[k]);
      }
      m.normals.push_back(n);
      // winding is irrelevant to the rasterizer; keep it counter-clockwise seen from outside
      const bool flip = side == 0;
      const int i1 = flip ? 2 : 1, i2 = flip ? 1 : 2, i3 = flip ? 3 : 2, i4 = flip ? 2 : 3;
      m.triangles.push_back({Corner{base, ni, uv0}, Corner{base + i1, ni, uv0 + i1}, Corner{base + i2, ni, uv0 + i2}});
      m.triangles.push_back({Corner{base, ni, uv0}, Corner{base + i3, ni, uv0 + i3}, Corner{base + i4, ni, uv0 + i4}});
    }
}

// Quad with corners p0..p3 (in order) and normal n.
void add_quad(TriangleMesh& m, const Vec3 (&p)[4], const Vec3& n) {
  const int base = int(m.vertices.size()), uv0 = int(m.uvs.size()), ni = int(m.normals.size());
  const Vec3 eu = (p[1] - p[0]).normalized();
  const Vec3 ev = n.cross(eu);
  for (int k = 0; k < 4; ++k) {
    m.vertices.push_back(p[k]);
    m.uvs.emplace_back((p[k] - p[0]).dot(eu), (p[k] - p[0]).dot(ev));
  }
  m.normals.push_back(n);
  m.triangles.push_back({Corner{base, ni, uv0}, Corner{base + 1, ni, uv0 + 1}, Corner{base + 2, ni, uv0 + 2}});
  m.triangles.push_back({Corner{base, ni, uv0}, Corner{base + 2, ni, uv0 + 2}, Corner{base + 3, ni, uv0 + 3}});
}

void close_group(TriangleMesh& m, const std::string& name, int material, int start) {
  m.groups.push_back({name, material, start, int(m.triangles.size()) - start});
}

PartAssignment car_assignment() {
  PartAssignment a;
  a.entries[kCarBodyIndex] = PartEntry{kBody, AssignmentSource::BodyRule, 0.0};
  a.entries[kCarWindowIndex] = PartEntry{kWindows, AssignmentSource::Iou, 1.0};
  a.entries[kCarWheelIndex] = PartEntry{kWheels, AssignmentSource::Iou, 1.0};
  return a;
}

struct Rendered {
  RenderBuffers buffers;
  ShadedImage image;
};

Rendered render_graphs(const TriangleMesh& mesh, const RigidTransform& pose, const CameraModel& camera,
                       const EnvironmentMap& env, const PartAssignment& assignment,
                       const std::map<std::string, MaterialGraph>& graphs, int resolution) {
  Rendered r;
  r.buffers = rasterize(mesh, pose, camera);
  const ShadeGrid grid = sample_textures(r.buffers, assignment_textures(mesh, assignment, graphs, resolution));
  r.image = shade(grid, env, camera);
  return r;
}

Mask label_mask(const RenderBuffers& buffers, const PartAssignment& assignment, const std::string& label) {
  Mask m(buffers.width, buffers.height, 0);
  for (size_t i = 0; i < m.size(); ++i) m.pixels[i] = assignment.label_of(buffers.material.pixels[i]) == label;
  return m;
}

}  // namespace

TriangleMesh synthetic_car_mesh(const CarShape& s) {
  TriangleMesh m;
  const double hl = 0.5 * s.length, hw = 0.5 * s.width;
  const double z0 = 0.3, z1 = z0 + s.body_height, z2 = z1 + s.cabin_height;

  int start = 0;
  add_box(m, Vec3(-hl, -hw, z0), Vec3(hl, hw, z1));
  add_box(m, Vec3(-s.cabin_rear, -hw + 0.1, z1), Vec3(s.cabin_front, hw - 0.1, z2));
  close_group(m, "body", kCarBodyIndex, start);

  start = int(m.triangles.size());
  const double e = 0.01, wz0 = z1 + 0.06, wz1 = z2 - 0.06;
  const double wx0 = -s.cabin_rear + 0.1, wx1 = s.cabin_front - 0.1, yo = hw - 0.1 + e;
  add_quad(m, {Vec3(wx0, -yo, wz0), Vec3(wx1, -yo, wz0), Vec3(wx1, -yo, wz1), Vec3(wx0, -yo, wz1)}, Vec3(0, -1, 0));
  add_quad(m, {Vec3(wx1, yo, wz0), Vec3(wx0, yo, wz0), Vec3(wx0, yo, wz1), Vec3(wx1, yo, wz1)}, Vec3(0, 1, 0));
  const double fx = s.cabin_front + e, rx = -s.cabin_rear - e, wy = hw - 0.2;
  add_quad(m, {Vec3(fx, -wy, wz0), Vec3(fx, wy, wz0), Vec3(fx, wy, wz1), Vec3(fx, -wy, wz1)}, Vec3(1, 0, 0));
  add_quad(m, {Vec3(rx, wy, wz0), Vec3(rx, -wy, wz0), Vec3(rx, -wy, wz1), Vec3(rx, wy, wz1)}, Vec3(-1, 0, 0));
  close_group(m, "windows", kCarWindowIndex, start);

  start = int(m.triangles.size());
  const double wr = 0.35, wx = hl - 0.8;
  for (double x : {-wx, wx})
    for (double y : {-1.0, 1.0}) {
      const double yin = y * (hw - 0.15), yout = y * (hw + 0.05);
      add_box(m, Vec3(x - wr, std::min(yin, yout), 0.0), Vec3(x + wr, std::max(yin, yout), 2 * wr));
    }
  close_group(m, "wheels", kCarWheelIndex, start);
  m.validate();
  return m;
}

MaterialGraph uniform_color_graph(const std::string& name, const Vec3& color, double roughness) {
  std::vector<GraphNode> nodes(3);
  nodes[0].id = "color";
  nodes[0].kind = NodeKind::UniformColor;
  nodes[0].params = {{"r", color.x(), 0.0, 1.0}, {"g", color.y(), 0.0, 1.0}, {"b", color.z(), 0.0, 1.0}};
  nodes[1].id = "rough";
  nodes[1].kind = NodeKind::ScalarConst;
  nodes[1].discrete["value"] = roughness;
  nodes[2].id = "metal";
  nodes[2].kind = NodeKind::ScalarConst;
  nodes[2].discrete["value"] = 0.0;
  return MaterialGraph::build(
      name, nodes, {},
      {{OutputSlot::Albedo, "color"}, {OutputSlot::Roughness, "rough"}, {OutputSlot::Metallic, "metal"}});
}

EnvironmentMap synthetic_sky(int width, int height) {
  EnvironmentMap env;
  env.radiance = ImageRGB(width, height);
  const Vec3 sun = Vec3(0.5, -0.4, 0.75).normalized();
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const Vec3 d = env.texel_direction(r, c);
      const double up = std::max(0.0, d.z());
      Vec3 sky = d.z() >= 0 ? Vec3(0.35, 0.5, 0.8) * (0.6 + 0.4 * up) : Vec3(0.25, 0.22, 0.2);
      sky += Vec3(8.0, 7.0, 5.5) * std::pow(std::max(0.0, d.dot(sun)), 32.0);
      env.radiance.at(c, r) = sky;
    }
  return env;
}

MaterialIndexMap index_map_of(const RenderBuffers& buffers, int view_index) {
  MaterialIndexMap m;
  m.indices = buffers.material;
  m.view_index = view_index;
  return m;
}

OptimizeConfig gradient_config(int texture_resolution) {
  OptimizeConfig c;
  c.texture_resolution = texture_resolution;
  return c;
}

MaterialProblem gradient_problem(const MaterialGraph& graph, const std::string& label, int image_size) {
  const TriangleMesh mesh = synthetic_car_mesh();
  const CameraModel camera = look_at_camera(image_size, image_size, 38.0, Vec3(3.0, -7.5, 2.6), Vec3(0, 0, 0.7));
  const EnvironmentMap env = synthetic_sky();
  const PartAssignment assignment = car_assignment();

  // Reference: the same graph with its albedo parameters moved by a tenth of
  // their range, seen from 4 degrees further round.
  MaterialGraph shifted = graph;
  std::vector<double> theta = shifted.parameters();
  const auto bounds = shifted.parameter_bounds();
  const auto opt = optimizable_parameters(shifted);
  for (size_t i = 0; i < theta.size(); ++i) {
    if (!opt[i]) continue;
    const double step = 0.1 * (bounds[i].second - bounds[i].first) * (i % 2 ? -1.0 : 1.0);
    theta[i] = std::clamp(theta[i] + step, bounds[i].first, bounds[i].second);
  }
  shifted.set_parameters(theta);

  const int res = 8;
  std::map<std::string, MaterialGraph> ref_graphs{{label, shifted}, {kWindows, builtin_prior("window")}};
  const Rendered ref = render_graphs(mesh, RigidTransform{rotation_z(24.0), Vec3::Zero()}, camera, env, assignment,
                                     ref_graphs, res);

  MaterialProblem p;
  p.mesh = mesh;
  p.assignment = assignment;
  p.priors = {{label, graph}, {kWindows, builtin_prior("window")}};
  p.reference = ref.image.radiance;
  p.reference_masks[label] = label_mask(ref.buffers, assignment, label);
  p.model_pose = RigidTransform{rotation_z(20.0), Vec3::Zero()};
  p.camera = camera;
  p.lighting = env;
  return p;
}

GradientCheck gradient_check(const MaterialProblem& problem, const OptimizeConfig& config, double relative_step) {
  const MaterialObjective objective(problem, config);
  const auto theta = objective.initial_parameters();
  std::map<std::string, std::vector<double>> grad;
  objective.evaluate(theta, nullptr, &grad);

  GradientCheck out;
  for (const auto& label : objective.optimized_labels()) {
    const MaterialGraph& graph = problem.priors.at(label);
    const auto names = graph.parameter_names();
    const auto bounds = graph.parameter_bounds();
    const auto& opt = objective.optimizable(label);
    double scale = 0.0;
    for (size_t i = 0; i < names.size(); ++i)
      if (opt[i]) scale = std::max(scale, std::abs(grad.at(label)[i]));
    for (size_t i = 0; i < names.size(); ++i) {
      if (!opt[i]) continue;
      const double h = relative_step * (bounds[i].second - bounds[i].first);
      auto plus = theta, minus = theta;
      plus[label][i] += h;
      minus[label][i] -= h;
      GradientEntry e;
      e.label = label;
      e.name = names[i];
      e.analytic = grad.at(label)[i];
      e.numeric = (objective.evaluate(plus) - objective.evaluate(minus)) / (2.0 * h);
      // Components far below the largest one are compared on its scale.
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-6 * scale, 1e-300});
      e.relative_error = std::abs(e.analytic - e.numeric) / denom;
      out.max_relative_error = std::max(out.max_relative_error, e.relative_error);
      out.entries.push_back(e);
    }
  }
  return out;
}

MaterialProblem convex_toy_problem(const Vec3& body_target, const Vec3& wheel_target) {
  TriangleMesh mesh;
  const Vec3 n(0, -1, 0);
  int start = 0;
  add_quad(mesh, {Vec3(-1.5, 0, 0), Vec3(0.5, 0, 0), Vec3(0.5, 0, 1.0), Vec3(-1.5, 0, 1.0)}, n);
  close_group(mesh, "body", kCarBodyIndex, start);
  start = int(mesh.triangles.size());
  add_quad(mesh, {Vec3(0.6, 0, 0.6), Vec3(1.1, 0, 0.6), Vec3(1.1, 0, 1.0), Vec3(0.6, 0, 1.0)}, n);
  close_group(mesh, "windows", kCarWindowIndex, start);
  start = int(mesh.triangles.size());
  add_quad(mesh, {Vec3(0.6, 0, 0), Vec3(1.1, 0, 0), Vec3(1.1, 0, 0.5), Vec3(0.6, 0, 0.5)}, n);
  close_group(mesh, "wheels", kCarWheelIndex, start);

  const CameraModel camera = look_at_camera(24, 24, 40.0, Vec3(-0.2, -5.0, 0.5), Vec3(-0.2, 0, 0.5));
  const EnvironmentMap env = uniform_environment(Vec3::Ones(), 32, 16);
  const PartAssignment assignment = car_assignment();
  const RigidTransform pose;

  std::map<std::string, MaterialGraph> targets{{kBody, uniform_color_graph("body_target", body_target)},
                                               {kWheels, uniform_color_graph("wheel_target", wheel_target)},
                                               {kWindows, builtin_prior("window")}};
  const Rendered ref = render_graphs(mesh, pose, camera, env, assignment, targets, 8);

  MaterialProblem p;
  p.mesh = mesh;
  p.assignment = assignment;
  p.priors = {{kBody, uniform_color_graph("body", Vec3::Constant(0.5))},
              {kWheels, uniform_color_graph("wheel", Vec3::Constant(0.5))},
              {kWindows, builtin_prior("window")}};
  p.reference = ref.image.radiance;
  p.reference_masks[kBody] = label_mask(ref.buffers, assignment, kBody);
  p.reference_masks[kWheels] = label_mask(ref.buffers, assignment, kWheels);
  p.model_pose = pose;
  p.camera = camera;
  p.lighting = env;
  return p;
}

}  // namespace urbancad
