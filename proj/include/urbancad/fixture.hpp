#pragma once

// Synthetic scenes used by the gradient checker, the acceptance runner and the
// end-to-end fixture generator.

#include "urbancad/matopt.hpp"

#include <string>
#include <vector>

namespace urbancad {

/// Material indices of the synthetic car.
inline constexpr int kCarBodyIndex = 0;
inline constexpr int kCarWindowIndex = 1;
inline constexpr int kCarWheelIndex = 2;

struct CarShape {
  double length = 4.0;
  double width = 1.8;
  double body_height = 0.7;
  double cabin_height = 0.5;
  double cabin_front = 0.8;  // cabin spans x in [-cabin_rear, cabin_front]
  double cabin_rear = 1.0;
};

/// Box body with an off-centre cabin, window panels on the cabin and four box
/// wheels. Groups: body (0), windows (1), wheels (2). Texture coordinates are
/// in metres so textures repeat once per metre.
TriangleMesh synthetic_car_mesh(const CarShape& shape = {});

/// Graph with a UniformColor albedo, constant roughness and no metal.
MaterialGraph uniform_color_graph(const std::string& name, const Vec3& color, double roughness = 0.5);

/// Sky gradient with a warm sun lobe; deterministic.
EnvironmentMap synthetic_sky(int width = 32, int height = 16);

/// Index map of a rendering (material per pixel).
MaterialIndexMap index_map_of(const RenderBuffers& buffers, int view_index = 0);

/// 16x16 view of the synthetic car whose reference is the same car rendered
/// 4 degrees away with the graph's albedo parameters shifted, so every loss
/// term is active. The graph is installed for `label`, windows use the glass
/// prior, remaining indices the neutral material.
MaterialProblem gradient_problem(const MaterialGraph& graph, const std::string& label, int image_size = 16);
OptimizeConfig gradient_config(int texture_resolution = 8);

struct GradientEntry {
  std::string label;
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};
struct GradientCheck {
  std::vector<GradientEntry> entries;
  double max_relative_error = 0.0;
};

/// Central differences of the total loss for every optimizable parameter,
/// with step `relative_step` times the parameter's range.
GradientCheck gradient_check(const MaterialProblem& problem, const OptimizeConfig& config,
                             double relative_step = 1e-5);

/// Body, wheel and window panels facing the camera under uniform unit
/// lighting. Body and wheel graphs are UniformColor; the reference is the
/// rendering with the target colours.
MaterialProblem convex_toy_problem(const Vec3& body_target, const Vec3& wheel_target);

}  // namespace urbancad
