#include "urbancad/matgraph.hpp"

namespace urbancad {

namespace {

struct GraphBuilder {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::map<OutputSlot, std::string> outputs;

  GraphBuilder& node(std::string id, NodeKind kind, std::vector<ContinuousParam> params,
                     std::map<std::string, DiscreteValue> discrete = {}) {
    nodes.push_back({std::move(id), kind, std::move(discrete), std::move(params)});
    return *this;
  }
  GraphBuilder& edge(std::string from, std::string to, std::string port = "in") {
    edges.push_back({std::move(from), std::move(to), std::move(port)});
    return *this;
  }
  GraphBuilder& output(OutputSlot slot, std::string id) {
    outputs[slot] = std::move(id);
    return *this;
  }
  MaterialGraph build(std::string name) const { return MaterialGraph::build(std::move(name), nodes, edges, outputs); }
};

// Noise scale stays within +-25% of the authored value: a prior fixes the
// pattern frequency, the fit only nudges it.
ContinuousParam scale(double s) { return {"scale", s, 0.75 * s, 1.25 * s}; }
ContinuousParam unit(const char* name, double v) { return {name, v, 0.0, 1.0}; }

std::map<std::string, DiscreteValue> noise(long long seed) {
  return {{"octaves", 3LL}, {"seed", seed}, {"tileable", true}};
}

MaterialGraph metal_body(const std::string& name, double roughness) {
  GraphBuilder b;
  b.node("base_noise", NodeKind::FractalNoise, {scale(4), unit("amplitude", 0.6)}, noise(11))
      .node("base_ramp", NodeKind::ColorRamp,
            {unit("r0", 0.30), unit("g0", 0.30), unit("b0", 0.32), unit("r1", 0.60), unit("g1", 0.60),
             unit("b1", 0.62)})
      .node("detail_noise", NodeKind::FractalNoise, {scale(8), unit("amplitude", 0.3)}, noise(12))
      .node("albedo_mix", NodeKind::Blend, {unit("weight", 0.15)}, {{"mode", std::string("multiply")}})
      .node("bump_noise", NodeKind::FractalNoise, {{"scale", 8, 7.2, 8.8}, unit("amplitude", 0.5)}, noise(13))
      .node("bump", NodeKind::HeightToNormal, {{"strength", 0.01, 0.0, 0.05}})
      .node("rough_noise", NodeKind::FractalNoise, {scale(4), {"amplitude", 0.2, 0.1, 0.3}}, noise(14))
      .node("rough_level", NodeKind::BrightnessContrast,
            {{"brightness", roughness - 0.5, roughness - 0.57, roughness - 0.43}, {"contrast", 0.2, 0.1, 0.4}})
      .node("metal", NodeKind::ScalarConst, {}, {{"value", 1.0}})
      .edge("base_noise", "base_ramp")
      .edge("base_ramp", "albedo_mix", "a")
      .edge("detail_noise", "albedo_mix", "b")
      .edge("bump_noise", "bump")
      .edge("rough_noise", "rough_level")
      .output(OutputSlot::Albedo, "albedo_mix")
      .output(OutputSlot::Normal, "bump")
      .output(OutputSlot::Roughness, "rough_level")
      .output(OutputSlot::Metallic, "metal");
  return b.build(name);
}

MaterialGraph rubber() {
  GraphBuilder b;
  b.node("base", NodeKind::UniformColor, {unit("r", 0.05), unit("g", 0.05), unit("b", 0.05)})
      .node("grain", NodeKind::FractalNoise, {scale(8), unit("amplitude", 0.5)}, noise(21))
      .node("albedo_mix", NodeKind::Blend, {unit("weight", 0.3)}, {{"mode", std::string("multiply")}})
      .node("rough_noise", NodeKind::FractalNoise, {scale(4), {"amplitude", 0.2, 0.1, 0.3}}, noise(22))
      .node("rough_level", NodeKind::BrightnessContrast, {{"brightness", 0.35, 0.28, 0.42}, {"contrast", 0.2, 0.1, 0.4}})
      .node("metal", NodeKind::ScalarConst, {}, {{"value", 0.0}})
      .edge("base", "albedo_mix", "a")
      .edge("grain", "albedo_mix", "b")
      .edge("rough_noise", "rough_level")
      .output(OutputSlot::Albedo, "albedo_mix")
      .output(OutputSlot::Roughness, "rough_level")
      .output(OutputSlot::Metallic, "metal");
  return b.build("wheel");
}

MaterialGraph glass() {
  GraphBuilder b;
  b.node("tint", NodeKind::UniformColor, {unit("r", 0.2), unit("g", 0.25), unit("b", 0.3)})
      .node("rough", NodeKind::ScalarConst, {{"value", 0.05, 0.01, 0.2}})
      .node("transmission", NodeKind::ScalarConst, {{"value", 0.9, 0.5, 1.0}})
      .node("metal", NodeKind::ScalarConst, {}, {{"value", 0.0}})
      .output(OutputSlot::Albedo, "tint")
      .output(OutputSlot::Roughness, "rough")
      .output(OutputSlot::Transmission, "transmission")
      .output(OutputSlot::Metallic, "metal");
  return b.build("window");
}

}  // namespace

const std::vector<std::string>& builtin_prior_names() {
  static const std::vector<std::string> names = {"window", "wheel", "body_painted", "body_unpainted"};
  return names;
}

MaterialGraph builtin_prior(const std::string& name) {
  if (name == "window") return glass();
  if (name == "wheel") return rubber();
  if (name == "body_painted") return metal_body(name, 0.15);
  if (name == "body_unpainted") return metal_body(name, 0.4);
  throw SchemaError("unknown material prior '" + name + "'");
}

}  // namespace urbancad
