#pragma once

#include "urbancad/common.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace urbancad {

enum class NodeKind {
  UniformColor,
  ScalarConst,
  FractalNoise,
  ColorRamp,
  Blend,
  Tile,
  HeightToNormal,
  BrightnessContrast,
};

std::string to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& name);

/// Material channels a graph can bind.
enum class OutputSlot { Albedo, Normal, Roughness, Transmission, Metallic };
std::string to_string(OutputSlot slot);
OutputSlot output_slot_from_string(const std::string& name);
inline constexpr OutputSlot kAllSlots[] = {OutputSlot::Albedo, OutputSlot::Normal, OutputSlot::Roughness,
                                           OutputSlot::Transmission, OutputSlot::Metallic};

using DiscreteValue = std::variant<long long, double, bool, std::string>;

struct ContinuousParam {
  std::string name;
  double value = 0.0;
  double lo = 0.0;
  double hi = 1.0;
};

struct GraphNode {
  std::string id;
  NodeKind kind = NodeKind::UniformColor;
  std::map<std::string, DiscreteValue> discrete;
  std::vector<ContinuousParam> params;  // canonical order of the node kind
};

struct GraphEdge {
  std::string from;
  std::string to;
  std::string port;
};

/// Texture maps produced by a graph. Albedo is linear RGB in [0,1], normals are
/// unit tangent-space vectors, roughness lies in [0.01,1].
struct TextureSet {
  int width = 0;
  int height = 0;
  ImageRGB albedo;
  ImageRGB normal;
  ImageF roughness;
  ImageF transmission;  // empty when the graph has no transmission output
  double metallic = 0.0;

  bool has_transmission() const { return transmission.width > 0; }
};

/// Cotangent with the same layout as TextureSet; empty images mean zero.
struct TextureCotangent {
  ImageRGB albedo;
  ImageRGB normal;
  ImageF roughness;
  ImageF transmission;
  double metallic = 0.0;

  static TextureCotangent zeros_like(const TextureSet& t);
};

/// Procedural material graph. Topology and discrete parameters are fixed at
/// construction; only continuous parameters (theta) can change afterwards.
class MaterialGraph {
 public:
  MaterialGraph() = default;

  /// Validates the graph: known kinds and ports, every required input bound
  /// exactly once, acyclic, compatible output bindings. Throws SchemaError.
  static MaterialGraph build(std::string name, std::vector<GraphNode> nodes, std::vector<GraphEdge> edges,
                             std::map<OutputSlot, std::string> outputs);

  const std::string& name() const { return name_; }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const std::vector<GraphEdge>& edges() const { return edges_; }
  const std::map<OutputSlot, std::string>& outputs() const { return outputs_; }
  void set_name(std::string name) { name_ = std::move(name); }

  /// Flattened theta in node order, then canonical parameter order.
  size_t parameter_count() const;
  std::vector<double> parameters() const;
  void set_parameters(const std::vector<double>& theta);
  std::vector<std::string> parameter_names() const;  // "node.param"
  std::vector<std::pair<double, double>> parameter_bounds() const;
  double parameter(const std::string& qualified_name) const;
  void set_parameter(const std::string& qualified_name, double value);

  /// Flat theta indices whose node feeds `slot`.
  std::vector<bool> parameters_reaching(OutputSlot slot) const;

  // Internal topology, resolved at build time.
  int node_index(const std::string& id) const;
  const std::vector<int>& topological_order() const { return order_; }
  int input_of(int node, const std::string& port) const;
  int channels_of(int node) const { return channels_[size_t(node)]; }

 private:
  std::string name_;
  std::vector<GraphNode> nodes_;
  std::vector<GraphEdge> edges_;
  std::map<OutputSlot, std::string> outputs_;
  std::vector<int> order_;
  std::vector<std::map<std::string, int>> inputs_;
  std::vector<int> channels_;
};

/// Which theta entries an optimizer may move. By default only parameters
/// that influence albedo and nothing else; roughness, normal and transmission
/// paths stay fixed unless explicitly enabled.
struct ParameterPolicy {
  bool include_roughness = false;
  bool include_normal = false;
};
std::vector<bool> optimizable_parameters(const MaterialGraph& graph, const ParameterPolicy& policy = {});

/// Maps texture cotangents to d/dtheta for every flat parameter.
using GraphPullback = std::function<std::vector<double>(const TextureCotangent&)>;

/// Deterministic forward evaluation. Out-of-bound theta is clamped and noted in
/// `diagnostics`. Resolution must be a power of two no larger than 1024.
TextureSet evaluate_graph(const MaterialGraph& graph, int width, int height, Diagnostics* diagnostics = nullptr);

struct GraphEvaluation {
  TextureSet textures;
  GraphPullback pullback;
};
GraphEvaluation evaluate_graph_with_grad(const MaterialGraph& graph, int width, int height,
                                         Diagnostics* diagnostics = nullptr);

/// Structured-text (JSON) graph files.
MaterialGraph parse_graph_text(const std::string& text, const std::string& source = "<graph>");
std::string format_graph_text(const MaterialGraph& graph);
MaterialGraph read_graph(const std::string& path);
void write_graph(const std::string& path, const MaterialGraph& graph);

/// Built-in material priors: "window" (glass), "wheel" (rubber),
/// "body_painted" and "body_unpainted" (reflective metal).
MaterialGraph builtin_prior(const std::string& name);
const std::vector<std::string>& builtin_prior_names();

}  // namespace urbancad
