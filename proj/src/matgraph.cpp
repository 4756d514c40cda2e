#include "urbancad/matgraph.hpp"

#include "urbancad/noise.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <sstream>

namespace urbancad {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct ParamSpec {
  const char* name;
  double value;
  double lo;
  double hi;
};

struct KindSpec {
  NodeKind kind;
  const char* name;
  std::vector<std::string> inputs;
  std::vector<ParamSpec> params;
  std::vector<std::pair<std::string, DiscreteValue>> discrete;
};

const std::vector<KindSpec>& kind_specs() {
  static const std::vector<KindSpec> specs = {
      {NodeKind::UniformColor, "UniformColor", {}, {{"r", 0.5, 0, 1}, {"g", 0.5, 0, 1}, {"b", 0.5, 0, 1}}, {}},
      {NodeKind::ScalarConst, "ScalarConst", {}, {{"value", 0.5, 0, 1}}, {}},
      {NodeKind::FractalNoise,
       "FractalNoise",
       {},
       {{"scale", 8, 1, 64}, {"amplitude", 0.5, 0, 1}},
       {{"octaves", 3LL}, {"seed", 0LL}, {"tileable", true}}},
      {NodeKind::ColorRamp,
       "ColorRamp",
       {"in"},
       {{"r0", 0, 0, 1}, {"g0", 0, 0, 1}, {"b0", 0, 0, 1}, {"r1", 1, 0, 1}, {"g1", 1, 0, 1}, {"b1", 1, 0, 1}},
       {{"pos0", 0.0}, {"pos1", 1.0}}},
      {NodeKind::Blend, "Blend", {"a", "b"}, {{"weight", 0.5, 0, 1}}, {{"mode", std::string("mix")}}},
      {NodeKind::Tile, "Tile", {"in"}, {}, {{"repeats", 2LL}}},
      {NodeKind::HeightToNormal, "HeightToNormal", {"in"}, {{"strength", 0.05, 0, 1}}, {}},
      {NodeKind::BrightnessContrast,
       "BrightnessContrast",
       {"in"},
       {{"brightness", 0, -1, 1}, {"contrast", 1, 0, 4}},
       {}},
  };
  return specs;
}

const KindSpec& spec_of(NodeKind kind) {
  for (const auto& s : kind_specs())
    if (s.kind == kind) return s;
  throw SchemaError("unhandled node kind");
}

long long discrete_int(const GraphNode& n, const std::string& key) { return std::get<long long>(n.discrete.at(key)); }
double discrete_real(const GraphNode& n, const std::string& key) {
  const auto& v = n.discrete.at(key);
  if (const auto* i = std::get_if<long long>(&v)) return double(*i);
  return std::get<double>(v);
}
bool discrete_bool(const GraphNode& n, const std::string& key) { return std::get<bool>(n.discrete.at(key)); }
const std::string& discrete_string(const GraphNode& n, const std::string& key) {
  return std::get<std::string>(n.discrete.at(key));
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline int wrap(int i, int n) {
  const int r = i % n;
  return r < 0 ? r + n : r;
}

}  // namespace

std::string to_string(NodeKind kind) { return spec_of(kind).name; }

NodeKind node_kind_from_string(const std::string& name) {
  for (const auto& s : kind_specs())
    if (name == s.name) return s.kind;
  throw SchemaError("unknown node kind '" + name + "'");
}

std::string to_string(OutputSlot slot) {
  switch (slot) {
    case OutputSlot::Albedo: return "albedo";
    case OutputSlot::Normal: return "normal";
    case OutputSlot::Roughness: return "roughness";
    case OutputSlot::Transmission: return "transmission";
    case OutputSlot::Metallic: return "metallic";
  }
  return "?";
}

OutputSlot output_slot_from_string(const std::string& name) {
  for (OutputSlot s : kAllSlots)
    if (to_string(s) == name) return s;
  throw SchemaError("unknown output slot '" + name + "'");
}

TextureCotangent TextureCotangent::zeros_like(const TextureSet& t) {
  TextureCotangent c;
  c.albedo = ImageRGB(t.width, t.height, Vec3::Zero());
  c.normal = ImageRGB(t.width, t.height, Vec3::Zero());
  c.roughness = ImageF(t.width, t.height, 0.0);
  if (t.has_transmission()) c.transmission = ImageF(t.width, t.height, 0.0);
  return c;
}

MaterialGraph MaterialGraph::build(std::string name, std::vector<GraphNode> nodes, std::vector<GraphEdge> edges,
                                   std::map<OutputSlot, std::string> outputs) {
  MaterialGraph g;
  g.name_ = std::move(name);
  std::map<std::string, int> ids;
  for (size_t i = 0; i < nodes.size(); ++i) {
    GraphNode& node = nodes[i];
    if (node.id.empty()) throw SchemaError("node with empty id");
    if (!ids.emplace(node.id, int(i)).second) throw SchemaError("duplicate node id '" + node.id + "'");
    const KindSpec& spec = spec_of(node.kind);
    // A ScalarConst may carry its value as a fixed discrete parameter instead.
    const bool fixed_scalar = node.kind == NodeKind::ScalarConst && node.discrete.count("value");
    if (fixed_scalar) {
      const auto& v = node.discrete.at("value");
      if (std::holds_alternative<long long>(v)) node.discrete["value"] = double(std::get<long long>(v));
      else if (!std::holds_alternative<double>(v))
        throw SchemaError("node '" + node.id + "': discrete value must be a number");
      if (!node.params.empty()) throw SchemaError("node '" + node.id + "': value given both as discrete and continuous");
    }

    std::vector<ContinuousParam> ordered;
    for (const ParamSpec& ps : spec.params) {
      if (fixed_scalar) break;
      ContinuousParam p{ps.name, ps.value, ps.lo, ps.hi};
      for (const auto& given : node.params)
        if (given.name == ps.name) p = given;
      if (!(p.lo <= p.hi) || !std::isfinite(p.value) || !std::isfinite(p.lo) || !std::isfinite(p.hi))
        throw SchemaError("node '" + node.id + "': invalid bounds for '" + p.name + "'");
      ordered.push_back(p);
    }
    for (const auto& given : node.params) {
      const bool known = std::any_of(spec.params.begin(), spec.params.end(),
                                     [&](const ParamSpec& ps) { return given.name == ps.name; });
      if (!known) throw SchemaError("node '" + node.id + "': unknown parameter '" + given.name + "'");
    }
    node.params = std::move(ordered);

    for (const auto& [key, value] : node.discrete) {
      if (fixed_scalar && key == "value") continue;
      const auto it = std::find_if(spec.discrete.begin(), spec.discrete.end(),
                                   [&](const auto& d) { return d.first == key; });
      if (it == spec.discrete.end())
        throw SchemaError("node '" + node.id + "': unknown discrete parameter '" + key + "'");
      const bool numeric_ok = std::holds_alternative<double>(it->second) && std::holds_alternative<long long>(value);
      if (value.index() != it->second.index() && !numeric_ok)
        throw SchemaError("node '" + node.id + "': wrong type for discrete parameter '" + key + "'");
    }
    for (const auto& [key, value] : spec.discrete) {
      if (!node.discrete.count(key)) node.discrete[key] = value;
      else if (std::holds_alternative<double>(value))
        node.discrete[key] = discrete_real(node, key);
    }
    if (node.kind == NodeKind::Blend) {
      const auto& mode = discrete_string(node, "mode");
      if (mode != "mix" && mode != "multiply")
        throw SchemaError("node '" + node.id + "': blend mode must be mix or multiply");
    }
    if (node.kind == NodeKind::FractalNoise && (discrete_int(node, "octaves") < 1 || discrete_int(node, "octaves") > 12))
      throw SchemaError("node '" + node.id + "': octaves must be in [1, 12]");
    if (node.kind == NodeKind::Tile && discrete_int(node, "repeats") < 1)
      throw SchemaError("node '" + node.id + "': repeats must be >= 1");
    if (node.kind == NodeKind::ColorRamp && !(discrete_real(node, "pos0") < discrete_real(node, "pos1")))
      throw SchemaError("node '" + node.id + "': ramp stops must satisfy pos0 < pos1");
  }

  g.inputs_.assign(nodes.size(), {});
  std::vector<std::vector<int>> successors(nodes.size());
  std::vector<int> indegree(nodes.size(), 0);
  for (const GraphEdge& e : edges) {
    const auto from = ids.find(e.from);
    const auto to = ids.find(e.to);
    if (from == ids.end()) throw SchemaError("edge from unknown node '" + e.from + "'");
    if (to == ids.end()) throw SchemaError("edge to unknown node '" + e.to + "'");
    const KindSpec& spec = spec_of(nodes[size_t(to->second)].kind);
    if (std::find(spec.inputs.begin(), spec.inputs.end(), e.port) == spec.inputs.end())
      throw SchemaError("node '" + e.to + "' has no input port '" + e.port + "'");
    if (!g.inputs_[size_t(to->second)].emplace(e.port, from->second).second)
      throw SchemaError("input '" + e.to + "." + e.port + "' bound twice");
    successors[size_t(from->second)].push_back(to->second);
    indegree[size_t(to->second)]++;
  }
  for (size_t i = 0; i < nodes.size(); ++i)
    for (const auto& port : spec_of(nodes[i].kind).inputs)
      if (!g.inputs_[i].count(port)) throw SchemaError("input '" + nodes[i].id + "." + port + "' is not connected");

  // Kahn's algorithm; ties resolved by node order so the order is stable.
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (size_t i = 0; i < nodes.size(); ++i)
    if (indegree[i] == 0) ready.push(int(i));
  while (!ready.empty()) {
    const int n = ready.top();
    ready.pop();
    g.order_.push_back(n);
    for (int s : successors[size_t(n)])
      if (--indegree[size_t(s)] == 0) ready.push(s);
  }
  if (g.order_.size() != nodes.size()) throw SchemaError("graph '" + g.name_ + "' contains a cycle");

  g.channels_.assign(nodes.size(), 0);
  for (int n : g.order_) {
    const GraphNode& node = nodes[size_t(n)];
    const auto in = [&](const char* port) { return g.channels_[size_t(g.inputs_[size_t(n)].at(port))]; };
    switch (node.kind) {
      case NodeKind::UniformColor: g.channels_[size_t(n)] = 3; break;
      case NodeKind::ScalarConst:
      case NodeKind::FractalNoise: g.channels_[size_t(n)] = 1; break;
      case NodeKind::ColorRamp:
        if (in("in") != 1) throw SchemaError("node '" + node.id + "': ColorRamp needs a scalar input");
        g.channels_[size_t(n)] = 3;
        break;
      case NodeKind::Blend: g.channels_[size_t(n)] = std::max(in("a"), in("b")); break;
      case NodeKind::Tile:
      case NodeKind::BrightnessContrast: g.channels_[size_t(n)] = in("in"); break;
      case NodeKind::HeightToNormal:
        if (in("in") != 1) throw SchemaError("node '" + node.id + "': HeightToNormal needs a scalar input");
        g.channels_[size_t(n)] = 3;
        break;
    }
    if (node.kind != NodeKind::HeightToNormal && node.kind != NodeKind::Tile) {
      for (const auto& [port, src] : g.inputs_[size_t(n)])
        if (nodes[size_t(src)].kind == NodeKind::HeightToNormal)
          throw SchemaError("node '" + node.id + "': normal maps can only feed a normal output");
    }
  }

  for (const auto& [slot, id] : outputs) {
    const auto it = ids.find(id);
    if (it == ids.end()) throw SchemaError("output '" + to_string(slot) + "' bound to unknown node '" + id + "'");
    const GraphNode& node = nodes[size_t(it->second)];
    const int c = g.channels_[size_t(it->second)];
    bool produces_normal = node.kind == NodeKind::HeightToNormal;
    if (node.kind == NodeKind::Tile) {
      int src = it->second;
      while (nodes[size_t(src)].kind == NodeKind::Tile) src = g.inputs_[size_t(src)].at("in");
      produces_normal = nodes[size_t(src)].kind == NodeKind::HeightToNormal;
    }
    const bool ok = slot == OutputSlot::Albedo   ? !produces_normal
                    : slot == OutputSlot::Normal ? produces_normal
                                                 : (c == 1);
    if (!ok) throw SchemaError("output '" + to_string(slot) + "' cannot be bound to node '" + id + "'");
  }

  g.nodes_ = std::move(nodes);
  g.edges_ = std::move(edges);
  g.outputs_ = std::move(outputs);
  return g;
}

int MaterialGraph::node_index(const std::string& id) const {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].id == id) return int(i);
  return -1;
}

int MaterialGraph::input_of(int node, const std::string& port) const { return inputs_[size_t(node)].at(port); }

size_t MaterialGraph::parameter_count() const {
  size_t n = 0;
  for (const auto& node : nodes_) n += node.params.size();
  return n;
}

std::vector<double> MaterialGraph::parameters() const {
  std::vector<double> out;
  for (const auto& node : nodes_)
    for (const auto& p : node.params) out.push_back(p.value);
  return out;
}

void MaterialGraph::set_parameters(const std::vector<double>& theta) {
  if (theta.size() != parameter_count()) throw DimensionError("theta size mismatch");
  size_t k = 0;
  for (auto& node : nodes_)
    for (auto& p : node.params) p.value = theta[k++];
}

std::vector<std::string> MaterialGraph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& node : nodes_)
    for (const auto& p : node.params) out.push_back(node.id + "." + p.name);
  return out;
}

std::vector<std::pair<double, double>> MaterialGraph::parameter_bounds() const {
  std::vector<std::pair<double, double>> out;
  for (const auto& node : nodes_)
    for (const auto& p : node.params) out.emplace_back(p.lo, p.hi);
  return out;
}

double MaterialGraph::parameter(const std::string& qualified_name) const {
  for (const auto& node : nodes_)
    for (const auto& p : node.params)
      if (node.id + "." + p.name == qualified_name) return p.value;
  throw SchemaError("unknown parameter '" + qualified_name + "'");
}

void MaterialGraph::set_parameter(const std::string& qualified_name, double value) {
  for (auto& node : nodes_)
    for (auto& p : node.params)
      if (node.id + "." + p.name == qualified_name) {
        p.value = value;
        return;
      }
  throw SchemaError("unknown parameter '" + qualified_name + "'");
}

std::vector<bool> MaterialGraph::parameters_reaching(OutputSlot slot) const {
  std::vector<bool> reach(nodes_.size(), false);
  const auto it = outputs_.find(slot);
  if (it != outputs_.end()) {
    std::vector<int> stack{node_index(it->second)};
    while (!stack.empty()) {
      const int n = stack.back();
      stack.pop_back();
      if (reach[size_t(n)]) continue;
      reach[size_t(n)] = true;
      for (const auto& [port, src] : inputs_[size_t(n)]) stack.push_back(src);
    }
  }
  std::vector<bool> out;
  for (size_t i = 0; i < nodes_.size(); ++i)
    for (size_t k = 0; k < nodes_[i].params.size(); ++k) out.push_back(reach[i]);
  return out;
}

std::vector<bool> optimizable_parameters(const MaterialGraph& graph, const ParameterPolicy& policy) {
  std::vector<bool> mask = graph.parameters_reaching(OutputSlot::Albedo);
  const auto exclude = [&](OutputSlot slot) {
    const auto r = graph.parameters_reaching(slot);
    for (size_t i = 0; i < mask.size(); ++i)
      if (r[i]) mask[i] = false;
  };
  if (!policy.include_roughness) exclude(OutputSlot::Roughness);
  if (!policy.include_normal) exclude(OutputSlot::Normal);
  exclude(OutputSlot::Transmission);
  exclude(OutputSlot::Metallic);
  if (policy.include_roughness) {
    const auto r = graph.parameters_reaching(OutputSlot::Roughness);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] || r[i];
  }
  if (policy.include_normal) {
    const auto r = graph.parameters_reaching(OutputSlot::Normal);
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] || r[i];
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

using Plane = std::vector<double>;  // interleaved texels x channels

struct Evaluator {
  const MaterialGraph& graph;
  int width;
  int height;
  std::vector<std::vector<double>> theta;  // clamped, per node
  std::vector<size_t> theta_offset;
  std::vector<Plane> values;
  std::vector<Plane> noise_fbm;       // FractalNoise: raw fbm
  std::vector<Plane> noise_dscale;    // FractalNoise: d fbm / d scale

  Evaluator(const MaterialGraph& g, int w, int h, Diagnostics* diag) : graph(g), width(w), height(h) {
    size_t offset = 0;
    for (const auto& node : g.nodes()) {
      std::vector<double> t;
      for (const auto& p : node.params) {
        double v = p.value;
        if (v < p.lo || v > p.hi) {
          const double c = std::clamp(v, p.lo, p.hi);
          if (diag) {
            std::ostringstream msg;
            msg << "graph '" << g.name() << "': parameter " << node.id << "." << p.name << " = " << v
                << " clamped to " << c;
            diag->warn(msg.str());
          }
          v = c;
        }
        t.push_back(v);
      }
      theta.push_back(std::move(t));
      theta_offset.push_back(offset);
      offset += node.params.size();
    }
    values.resize(g.nodes().size());
    noise_fbm.resize(g.nodes().size());
    noise_dscale.resize(g.nodes().size());
  }

  size_t texels() const { return size_t(width) * size_t(height); }

  // Tile maps output texel (x, y) to a bilinear footprint in the input.
  struct Footprint {
    int x0, x1, y0, y1;
    double fx, fy;
  };
  Footprint tile_footprint(int x, int y, long long repeats) const {
    const double u = (x + 0.5) / width * double(repeats);
    const double v = (y + 0.5) / height * double(repeats);
    const double px = (u - std::floor(u)) * width - 0.5;
    const double py = (v - std::floor(v)) * height - 0.5;
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    return {wrap(int(fx0), width), wrap(int(fx0) + 1, width), wrap(int(fy0), height), wrap(int(fy0) + 1, height),
            px - fx0, py - fy0};
  }

  void forward(bool keep_noise_derivative) {
    for (int n : graph.topological_order()) {
      const GraphNode& node = graph.nodes()[size_t(n)];
      const std::vector<double>& t = theta[size_t(n)];
      const int c = graph.channels_of(n);
      Plane out(texels() * size_t(c));
      switch (node.kind) {
        case NodeKind::UniformColor:
          for (size_t i = 0; i < texels(); ++i)
            for (int k = 0; k < 3; ++k) out[3 * i + size_t(k)] = t[size_t(k)];
          break;
        case NodeKind::ScalarConst:
          std::fill(out.begin(), out.end(), t.empty() ? std::get<double>(node.discrete.at("value")) : t[0]);
          break;
        case NodeKind::FractalNoise: {
          const FractalNoiseSpec spec{int(discrete_int(node, "octaves")), uint32_t(discrete_int(node, "seed")),
                                      discrete_bool(node, "tileable")};
          Plane& fbm = noise_fbm[size_t(n)];
          Plane& dscale = noise_dscale[size_t(n)];
          fbm.assign(texels(), 0.0);
          if (keep_noise_derivative) dscale.assign(texels(), 0.0);
          parallel_for(height, [&](int y) {
            for (int x = 0; x < width; ++x) {
              const size_t i = size_t(y) * size_t(width) + size_t(x);
              double ds = 0.0;
              fbm[i] = fractal_noise(spec, t[0], (x + 0.5) / width, (y + 0.5) / height,
                                     keep_noise_derivative ? &ds : nullptr);
              if (keep_noise_derivative) dscale[i] = ds;
              out[i] = 0.5 + t[1] * (fbm[i] - 0.5);
            }
          });
          break;
        }
        case NodeKind::ColorRamp: {
          const Plane& in = values[size_t(graph.input_of(n, "in"))];
          const double p0 = discrete_real(node, "pos0"), p1 = discrete_real(node, "pos1");
          for (size_t i = 0; i < texels(); ++i) {
            const double s = std::clamp((in[i] - p0) / (p1 - p0), 0.0, 1.0);
            for (int k = 0; k < 3; ++k) out[3 * i + size_t(k)] = t[size_t(k)] + s * (t[size_t(k) + 3] - t[size_t(k)]);
          }
          break;
        }
        case NodeKind::Blend: {
          const int a_id = graph.input_of(n, "a"), b_id = graph.input_of(n, "b");
          const Plane& a = values[size_t(a_id)];
          const Plane& b = values[size_t(b_id)];
          const int ca = graph.channels_of(a_id), cb = graph.channels_of(b_id);
          const bool multiply = discrete_string(node, "mode") == "multiply";
          const double w = t[0];
          for (size_t i = 0; i < texels(); ++i)
            for (int k = 0; k < c; ++k) {
              const double av = a[i * size_t(ca) + size_t(ca == 1 ? 0 : k)];
              const double bv = b[i * size_t(cb) + size_t(cb == 1 ? 0 : k)];
              out[i * size_t(c) + size_t(k)] = multiply ? av * (1.0 - w + w * bv) : (1.0 - w) * av + w * bv;
            }
          break;
        }
        case NodeKind::Tile: {
          const Plane& in = values[size_t(graph.input_of(n, "in"))];
          const long long repeats = discrete_int(node, "repeats");
          for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
              const Footprint f = tile_footprint(x, y, repeats);
              const size_t o = (size_t(y) * size_t(width) + size_t(x)) * size_t(c);
              const auto idx = [&](int xx, int yy) { return (size_t(yy) * size_t(width) + size_t(xx)) * size_t(c); };
              for (int k = 0; k < c; ++k)
                out[o + size_t(k)] = (1 - f.fx) * (1 - f.fy) * in[idx(f.x0, f.y0) + size_t(k)] +
                                     f.fx * (1 - f.fy) * in[idx(f.x1, f.y0) + size_t(k)] +
                                     (1 - f.fx) * f.fy * in[idx(f.x0, f.y1) + size_t(k)] +
                                     f.fx * f.fy * in[idx(f.x1, f.y1) + size_t(k)];
            }
          break;
        }
        case NodeKind::HeightToNormal: {
          const Plane& h = values[size_t(graph.input_of(n, "in"))];
          const double s = t[0];
          for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
              const auto at = [&](int xx, int yy) { return h[size_t(wrap(yy, height)) * size_t(width) + size_t(wrap(xx, width))]; };
              const double hx = (at(x + 1, y) - at(x - 1, y)) * width * 0.5;
              const double hy = (at(x, y + 1) - at(x, y - 1)) * height * 0.5;
              const Vec3 m(-s * hx, -s * hy, 1.0);
              const Vec3 nrm = m.normalized();
              const size_t o = 3 * (size_t(y) * size_t(width) + size_t(x));
              for (int k = 0; k < 3; ++k) out[o + size_t(k)] = nrm[k];
            }
          break;
        }
        case NodeKind::BrightnessContrast: {
          const Plane& in = values[size_t(graph.input_of(n, "in"))];
          for (size_t i = 0; i < out.size(); ++i) out[i] = (in[i] - 0.5) * t[1] + 0.5 + t[0];
          break;
        }
      }
      values[size_t(n)] = std::move(out);
    }
  }

  int output_node(OutputSlot slot) const {
    const auto it = graph.outputs().find(slot);
    return it == graph.outputs().end() ? -1 : graph.node_index(it->second);
  }

  TextureSet collect() const {
    const int albedo = output_node(OutputSlot::Albedo);
    const int rough = output_node(OutputSlot::Roughness);
    if (albedo < 0) throw EvaluationError("graph '" + graph.name() + "': output 'albedo' is unbound");
    if (rough < 0) throw EvaluationError("graph '" + graph.name() + "': output 'roughness' is unbound");
    TextureSet t;
    t.width = width;
    t.height = height;
    t.albedo = ImageRGB(width, height);
    t.normal = ImageRGB(width, height, Vec3(0, 0, 1));
    t.roughness = ImageF(width, height);
    const int ca = graph.channels_of(albedo);
    const Plane& a = values[size_t(albedo)];
    for (size_t i = 0; i < texels(); ++i)
      for (int k = 0; k < 3; ++k) t.albedo.pixels[i][k] = clamp01(a[i * size_t(ca) + size_t(ca == 1 ? 0 : k)]);
    for (size_t i = 0; i < texels(); ++i) t.roughness.pixels[i] = std::clamp(values[size_t(rough)][i], 0.01, 1.0);
    if (const int nrm = output_node(OutputSlot::Normal); nrm >= 0) {
      const Plane& nv = values[size_t(nrm)];
      for (size_t i = 0; i < texels(); ++i) t.normal.pixels[i] = Vec3(nv[3 * i], nv[3 * i + 1], nv[3 * i + 2]);
    }
    if (const int tr = output_node(OutputSlot::Transmission); tr >= 0) {
      t.transmission = ImageF(width, height);
      for (size_t i = 0; i < texels(); ++i) t.transmission.pixels[i] = clamp01(values[size_t(tr)][i]);
    }
    if (const int m = output_node(OutputSlot::Metallic); m >= 0) {
      double sum = 0.0;
      for (double v : values[size_t(m)]) sum += v;
      t.metallic = clamp01(sum / double(texels()));
    }
    return t;
  }

  std::vector<double> backward(const TextureCotangent& cot) const {
    std::vector<Plane> grad(values.size());
    for (size_t n = 0; n < values.size(); ++n) grad[n].assign(values[n].size(), 0.0);
    const auto inside = [](double v, double lo, double hi) { return v > lo && v < hi; };

    if (const int albedo = output_node(OutputSlot::Albedo); albedo >= 0 && cot.albedo.width > 0) {
      const int ca = graph.channels_of(albedo);
      const Plane& a = values[size_t(albedo)];
      for (size_t i = 0; i < texels(); ++i)
        for (int k = 0; k < 3; ++k) {
          const size_t j = i * size_t(ca) + size_t(ca == 1 ? 0 : k);
          if (inside(a[j], 0.0, 1.0)) grad[size_t(albedo)][j] += cot.albedo.pixels[i][k];
        }
    }
    if (const int rough = output_node(OutputSlot::Roughness); rough >= 0 && cot.roughness.width > 0) {
      for (size_t i = 0; i < texels(); ++i)
        if (inside(values[size_t(rough)][i], 0.01, 1.0)) grad[size_t(rough)][i] += cot.roughness.pixels[i];
    }
    if (const int nrm = output_node(OutputSlot::Normal); nrm >= 0 && cot.normal.width > 0) {
      for (size_t i = 0; i < texels(); ++i)
        for (int k = 0; k < 3; ++k) grad[size_t(nrm)][3 * i + size_t(k)] += cot.normal.pixels[i][k];
    }
    if (const int tr = output_node(OutputSlot::Transmission); tr >= 0 && cot.transmission.width > 0) {
      for (size_t i = 0; i < texels(); ++i)
        if (inside(values[size_t(tr)][i], 0.0, 1.0)) grad[size_t(tr)][i] += cot.transmission.pixels[i];
    }
    if (const int m = output_node(OutputSlot::Metallic); m >= 0 && cot.metallic != 0.0) {
      double sum = 0.0;
      for (double v : values[size_t(m)]) sum += v;
      if (inside(sum / double(texels()), 0.0, 1.0))
        for (double& g : grad[size_t(m)]) g += cot.metallic / double(texels());
    }

    std::vector<double> dtheta(graph.parameter_count(), 0.0);
    const auto& order = graph.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const int n = *it;
      const GraphNode& node = graph.nodes()[size_t(n)];
      const std::vector<double>& t = theta[size_t(n)];
      const Plane& g = grad[size_t(n)];
      double* dt = dtheta.data() + theta_offset[size_t(n)];
      const int c = graph.channels_of(n);
      switch (node.kind) {
        case NodeKind::UniformColor:
          for (size_t i = 0; i < texels(); ++i)
            for (int k = 0; k < 3; ++k) dt[k] += g[3 * i + size_t(k)];
          break;
        case NodeKind::ScalarConst:
          if (!t.empty())
            for (double v : g) dt[0] += v;
          break;
        case NodeKind::FractalNoise: {
          const Plane& fbm = noise_fbm[size_t(n)];
          const Plane& dscale = noise_dscale[size_t(n)];
          for (size_t i = 0; i < texels(); ++i) {
            dt[0] += g[i] * t[1] * dscale[i];
            dt[1] += g[i] * (fbm[i] - 0.5);
          }
          break;
        }
        case NodeKind::ColorRamp: {
          const int src = graph.input_of(n, "in");
          const Plane& in = values[size_t(src)];
          Plane& gin = grad[size_t(src)];
          const double p0 = discrete_real(node, "pos0"), p1 = discrete_real(node, "pos1");
          for (size_t i = 0; i < texels(); ++i) {
            const double raw = (in[i] - p0) / (p1 - p0);
            const double s = std::clamp(raw, 0.0, 1.0);
            double dsum = 0.0;
            for (int k = 0; k < 3; ++k) {
              const double gk = g[3 * i + size_t(k)];
              dt[k] += gk * (1.0 - s);
              dt[k + 3] += gk * s;
              dsum += gk * (t[size_t(k) + 3] - t[size_t(k)]);
            }
            if (raw > 0.0 && raw < 1.0) gin[i] += dsum / (p1 - p0);
          }
          break;
        }
        case NodeKind::Blend: {
          const int a_id = graph.input_of(n, "a"), b_id = graph.input_of(n, "b");
          const Plane& a = values[size_t(a_id)];
          const Plane& b = values[size_t(b_id)];
          Plane& ga = grad[size_t(a_id)];
          Plane& gb = grad[size_t(b_id)];
          const int ca = graph.channels_of(a_id), cb = graph.channels_of(b_id);
          const bool multiply = discrete_string(node, "mode") == "multiply";
          const double w = t[0];
          for (size_t i = 0; i < texels(); ++i)
            for (int k = 0; k < c; ++k) {
              const size_t ja = i * size_t(ca) + size_t(ca == 1 ? 0 : k);
              const size_t jb = i * size_t(cb) + size_t(cb == 1 ? 0 : k);
              const double gk = g[i * size_t(c) + size_t(k)];
              if (multiply) {
                ga[ja] += gk * (1.0 - w + w * b[jb]);
                gb[jb] += gk * a[ja] * w;
                dt[0] += gk * a[ja] * (b[jb] - 1.0);
              } else {
                ga[ja] += gk * (1.0 - w);
                gb[jb] += gk * w;
                dt[0] += gk * (b[jb] - a[ja]);
              }
            }
          break;
        }
        case NodeKind::Tile: {
          const int src = graph.input_of(n, "in");
          Plane& gin = grad[size_t(src)];
          const long long repeats = discrete_int(node, "repeats");
          const auto idx = [&](int xx, int yy) { return (size_t(yy) * size_t(width) + size_t(xx)) * size_t(c); };
          for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
              const Footprint f = tile_footprint(x, y, repeats);
              const size_t o = (size_t(y) * size_t(width) + size_t(x)) * size_t(c);
              for (int k = 0; k < c; ++k) {
                const double gk = g[o + size_t(k)];
                gin[idx(f.x0, f.y0) + size_t(k)] += (1 - f.fx) * (1 - f.fy) * gk;
                gin[idx(f.x1, f.y0) + size_t(k)] += f.fx * (1 - f.fy) * gk;
                gin[idx(f.x0, f.y1) + size_t(k)] += (1 - f.fx) * f.fy * gk;
                gin[idx(f.x1, f.y1) + size_t(k)] += f.fx * f.fy * gk;
              }
            }
          break;
        }
        case NodeKind::HeightToNormal: {
          const int src = graph.input_of(n, "in");
          const Plane& h = values[size_t(src)];
          Plane& gh = grad[size_t(src)];
          const double s = t[0];
          const auto hid = [&](int xx, int yy) { return size_t(wrap(yy, height)) * size_t(width) + size_t(wrap(xx, width)); };
          for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
              const double hx = (h[hid(x + 1, y)] - h[hid(x - 1, y)]) * width * 0.5;
              const double hy = (h[hid(x, y + 1)] - h[hid(x, y - 1)]) * height * 0.5;
              const Vec3 m(-s * hx, -s * hy, 1.0);
              const double len = m.norm();
              const Vec3 nrm = m / len;
              const size_t o = 3 * (size_t(y) * size_t(width) + size_t(x));
              const Vec3 gn(g[o], g[o + 1], g[o + 2]);
              const Vec3 dm = (gn - nrm * nrm.dot(gn)) / len;
              dt[0] += -dm.x() * hx - dm.y() * hy;
              const double dhx = -s * dm.x() * width * 0.5;
              const double dhy = -s * dm.y() * height * 0.5;
              gh[hid(x + 1, y)] += dhx;
              gh[hid(x - 1, y)] -= dhx;
              gh[hid(x, y + 1)] += dhy;
              gh[hid(x, y - 1)] -= dhy;
            }
          break;
        }
        case NodeKind::BrightnessContrast: {
          const int src = graph.input_of(n, "in");
          const Plane& in = values[size_t(src)];
          Plane& gin = grad[size_t(src)];
          for (size_t i = 0; i < g.size(); ++i) {
            gin[i] += g[i] * t[1];
            dt[0] += g[i];
            dt[1] += g[i] * (in[i] - 0.5);
          }
          break;
        }
      }
    }
    return dtheta;
  }
};

void check_resolution(int width, int height) {
  if (!is_power_of_two(width) || !is_power_of_two(height) || width > 1024 || height > 1024)
    throw EvaluationError("texture resolution must be powers of two <= 1024, got " + std::to_string(width) + "x" +
                          std::to_string(height));
}

}  // namespace

TextureSet evaluate_graph(const MaterialGraph& graph, int width, int height, Diagnostics* diagnostics) {
  check_resolution(width, height);
  Evaluator ev(graph, width, height, diagnostics);
  ev.forward(false);
  return ev.collect();
}

GraphEvaluation evaluate_graph_with_grad(const MaterialGraph& graph, int width, int height, Diagnostics* diagnostics) {
  check_resolution(width, height);
  auto ev = std::make_shared<Evaluator>(graph, width, height, diagnostics);
  ev->forward(true);
  GraphEvaluation out;
  out.textures = ev->collect();
  // The evaluator references `graph`; copy it so the pullback owns its inputs.
  auto owned = std::make_shared<MaterialGraph>(graph);
  auto state = std::make_shared<Evaluator>(*owned, width, height, nullptr);
  state->values = std::move(ev->values);
  state->noise_fbm = std::move(ev->noise_fbm);
  state->noise_dscale = std::move(ev->noise_dscale);
  out.pullback = [owned, state](const TextureCotangent& cot) { return state->backward(cot); };
  return out;
}

// ---------------------------------------------------------------------------
// Structured text

namespace {

ordered_json discrete_to_json(const DiscreteValue& v) {
  return std::visit([](const auto& x) { return ordered_json(x); }, v);
}

DiscreteValue discrete_from_json(const json& j, const std::string& where) {
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number_integer()) return j.get<long long>();
  if (j.is_number_float()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  throw SchemaError(where + ": unsupported discrete value");
}

}  // namespace

MaterialGraph parse_graph_text(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(source + ": " + e.what());
  }
  try {
    std::vector<GraphNode> nodes;
    for (const json& jn : doc.at("nodes")) {
      GraphNode node;
      node.id = jn.at("id").get<std::string>();
      node.kind = node_kind_from_string(jn.at("kind").get<std::string>());
      if (jn.contains("discrete"))
        for (const auto& [k, v] : jn["discrete"].items())
          node.discrete[k] = discrete_from_json(v, source + ": node '" + node.id + "'");
      if (jn.contains("params"))
        for (const auto& [k, v] : jn["params"].items()) {
          ContinuousParam p{k, 0, 0, 1};
          if (v.is_number()) {
            // Bare value: bounds come from the node kind defaults at build time.
            const KindSpec& spec = spec_of(node.kind);
            for (const auto& ps : spec.params)
              if (k == ps.name) p = {k, 0, ps.lo, ps.hi};
            p.value = v.get<double>();
          } else {
            p.value = v.at("value").get<double>();
            p.lo = v.at("lo").get<double>();
            p.hi = v.at("hi").get<double>();
          }
          node.params.push_back(p);
        }
      nodes.push_back(std::move(node));
    }
    std::vector<GraphEdge> edges;
    for (const json& je : doc.value("edges", json::array()))
      edges.push_back({je.at("from").get<std::string>(), je.at("to").get<std::string>(), je.at("port").get<std::string>()});
    std::map<OutputSlot, std::string> outputs;
    for (const auto& [k, v] : doc.at("outputs").items()) outputs[output_slot_from_string(k)] = v.get<std::string>();
    return MaterialGraph::build(doc.value("name", std::string()), std::move(nodes), std::move(edges), std::move(outputs));
  } catch (const json::exception& e) {
    throw SchemaError(source + ": " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(source + ": " + e.what());
  }
}

std::string format_graph_text(const MaterialGraph& graph) {
  ordered_json doc;
  doc["name"] = graph.name();
  ordered_json nodes = ordered_json::array();
  for (const auto& node : graph.nodes()) {
    ordered_json jn;
    jn["id"] = node.id;
    jn["kind"] = to_string(node.kind);
    if (!node.discrete.empty()) {
      ordered_json d = ordered_json::object();
      for (const auto& [k, v] : spec_of(node.kind).discrete) d[k] = discrete_to_json(node.discrete.at(k));
      if (node.kind == NodeKind::ScalarConst) d["value"] = discrete_to_json(node.discrete.at("value"));
      jn["discrete"] = d;
    }
    if (!node.params.empty()) {
      ordered_json p = ordered_json::object();
      for (const auto& param : node.params)
        p[param.name] = ordered_json{{"value", param.value}, {"lo", param.lo}, {"hi", param.hi}};
      jn["params"] = p;
    }
    nodes.push_back(jn);
  }
  doc["nodes"] = nodes;
  ordered_json edges = ordered_json::array();
  for (const auto& e : graph.edges()) edges.push_back({{"from", e.from}, {"to", e.to}, {"port", e.port}});
  doc["edges"] = edges;
  ordered_json outputs = ordered_json::object();
  for (OutputSlot s : kAllSlots)
    if (const auto it = graph.outputs().find(s); it != graph.outputs().end()) outputs[to_string(s)] = it->second;
  doc["outputs"] = outputs;
  return doc.dump(2) + "\n";
}

MaterialGraph read_graph(const std::string& path) { return parse_graph_text(read_text_file(path), path); }

void write_graph(const std::string& path, const MaterialGraph& graph) { write_text_file(path, format_graph_text(graph)); }

}  // namespace urbancad
