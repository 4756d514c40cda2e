#include "test_util.hpp"

#include "urbancad/matgraph.hpp"
#include "urbancad/noise.hpp"

#include <doctest.h>

#include <random>

using namespace urbancad;

namespace {

MaterialGraph minimal_graph(double r, double g, double b) {
  GraphNode color{"color", NodeKind::UniformColor, {}, {{"r", r, 0, 1}, {"g", g, 0, 1}, {"b", b, 0, 1}}};
  GraphNode rough{"rough", NodeKind::ScalarConst, {}, {{"value", 0.5, 0, 1}}};
  return MaterialGraph::build("minimal", {color, rough}, {},
                              {{OutputSlot::Albedo, "color"}, {OutputSlot::Roughness, "rough"}});
}

// Scalar objective: fixed random projection of every output channel.
struct Projection {
  TextureCotangent weights;

  Projection(const TextureSet& t, uint32_t seed) {
    // Signed weights: a same-sign projection of a periodic derivative map
    // cancels almost exactly and leaves nothing to compare.
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> mag(0.5, 1.5);
    const auto u = [&](std::mt19937& r) {
      const double m = mag(r);
      return (r() & 1) ? m : -m;
    };
    weights = TextureCotangent::zeros_like(t);
    for (auto& p : weights.albedo.pixels) p = Vec3(u(rng), u(rng), u(rng));
    for (auto& p : weights.normal.pixels) p = Vec3(u(rng), u(rng), u(rng));
    for (auto& p : weights.roughness.pixels) p = u(rng);
    for (auto& p : weights.transmission.pixels) p = u(rng);
    weights.metallic = u(rng);
  }

  double operator()(const TextureSet& t) const {
    double s = 0.0;
    for (size_t i = 0; i < t.albedo.size(); ++i) {
      s += weights.albedo.pixels[i].dot(t.albedo.pixels[i]);
      s += weights.normal.pixels[i].dot(t.normal.pixels[i]);
      s += weights.roughness.pixels[i] * t.roughness.pixels[i];
      if (t.has_transmission()) s += weights.transmission.pixels[i] * t.transmission.pixels[i];
    }
    return s + weights.metallic * t.metallic;
  }
};

// Zeroes the projection at texels whose ColorRamp input sits on a stop.
void exclude_ramp_boundaries(const MaterialGraph& graph, Projection& proj, int w, int h) {
  for (const auto& node : graph.nodes()) {
    if (node.kind != NodeKind::ColorRamp) continue;
    const int src = graph.input_of(graph.node_index(node.id), "in");
    // Both stops sit on the albedo clamp range, so the albedo channel shows
    // the ramp input exactly wherever it matters.
    auto outputs = graph.outputs();
    outputs[OutputSlot::Albedo] = graph.nodes()[size_t(src)].id;
    const MaterialGraph probe = MaterialGraph::build(graph.name(), graph.nodes(), graph.edges(), outputs);
    const TextureSet t = evaluate_graph(probe, w, h);
    const double p0 = std::get<double>(node.discrete.at("pos0"));
    const double p1 = std::get<double>(node.discrete.at("pos1"));
    for (size_t i = 0; i < t.albedo.size(); ++i) {
      const double x = t.albedo.pixels[i].x();
      if (std::abs(x - p0) < 1e-6 || std::abs(x - p1) < 1e-6) proj.weights.albedo.pixels[i].setZero();
    }
  }
}

double max_fd_error(const MaterialGraph& graph, int w, int h, uint32_t seed) {
  const GraphEvaluation ev = evaluate_graph_with_grad(graph, w, h);
  Projection proj(ev.textures, seed);
  exclude_ramp_boundaries(graph, proj, w, h);
  const std::vector<double> grad = ev.pullback(proj.weights);
  const auto bounds = graph.parameter_bounds();
  const std::vector<double> theta = graph.parameters();
  double worst = 0.0;
  for (size_t k = 0; k < theta.size(); ++k) {
    const double step = 1e-3 * (bounds[k].second - bounds[k].first);
    MaterialGraph plus = graph, minus = graph;
    auto tp = theta, tm = theta;
    tp[k] += step;
    tm[k] -= step;
    plus.set_parameters(tp);
    minus.set_parameters(tm);
    const double fd = (proj(evaluate_graph(plus, w, h)) - proj(evaluate_graph(minus, w, h))) / (2 * step);
    const double err = test::relative_error(grad[k], fd);
    if (err > worst) {
      worst = err;
      MESSAGE(graph.name() << " " << graph.parameter_names()[k] << " grad=" << grad[k] << " fd=" << fd);
    }
  }
  return worst;
}

// Random theta strictly inside the bounds, away from the edges so that the
// finite-difference stencil never crosses a clamp.
MaterialGraph random_theta(MaterialGraph graph, std::mt19937& rng) {
  const auto bounds = graph.parameter_bounds();
  std::vector<double> theta = graph.parameters();
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (size_t k = 0; k < theta.size(); ++k)
    theta[k] = bounds[k].first + u(rng) * (bounds[k].second - bounds[k].first);
  graph.set_parameters(theta);
  return graph;
}

}  // namespace

TEST_CASE("uniform color fills the albedo map") {
  const TextureSet t = evaluate_graph(minimal_graph(0.5, 0.5, 0.5), 16, 16);
  for (const Vec3& p : t.albedo.pixels) CHECK((p - Vec3(0.5, 0.5, 0.5)).norm() == 0.0);
  for (const Vec3& n : t.normal.pixels) CHECK(n == Vec3(0, 0, 1));
  for (double r : t.roughness.pixels) CHECK(r == 0.5);
}

TEST_CASE("height to normal over a constant field is flat") {
  GraphNode height{"h", NodeKind::ScalarConst, {}, {{"value", 0.7, 0, 1}}};
  GraphNode bump{"bump", NodeKind::HeightToNormal, {}, {{"strength", 0.8, 0, 1}}};
  GraphNode color{"c", NodeKind::UniformColor, {}, {}};
  const MaterialGraph g = MaterialGraph::build(
      "flat", {height, bump, color}, {{"h", "bump", "in"}},
      {{OutputSlot::Albedo, "c"}, {OutputSlot::Roughness, "h"}, {OutputSlot::Normal, "bump"}});
  const TextureSet t = evaluate_graph(g, 8, 8);
  for (const Vec3& n : t.normal.pixels) CHECK((n - Vec3(0, 0, 1)).norm() == 0.0);
}

TEST_CASE("albedo sum gradient for a constant color is the texel count") {
  const GraphEvaluation ev = evaluate_graph_with_grad(minimal_graph(0.3, 0.4, 0.5), 16, 8);
  TextureCotangent cot = TextureCotangent::zeros_like(ev.textures);
  for (auto& p : cot.albedo.pixels) p = Vec3(1, 1, 1);
  const auto grad = ev.pullback(cot);
  const auto names = ev.textures.albedo.size();
  CHECK(grad[0] == doctest::Approx(double(names)));
  CHECK(grad[1] == doctest::Approx(128.0));
  CHECK(grad[2] == doctest::Approx(128.0));
  CHECK(grad[3] == 0.0);
}

TEST_CASE("primal of the gradient evaluation is bit-identical") {
  for (const auto& name : builtin_prior_names()) {
    const MaterialGraph g = builtin_prior(name);
    const TextureSet a = evaluate_graph(g, 32, 32);
    const TextureSet b = evaluate_graph_with_grad(g, 32, 32).textures;
    CHECK(a.albedo.pixels == b.albedo.pixels);
    CHECK(a.normal.pixels == b.normal.pixels);
    CHECK(a.roughness.pixels == b.roughness.pixels);
    CHECK(a.transmission.pixels == b.transmission.pixels);
    CHECK(a.metallic == b.metallic);
  }
}

TEST_CASE("fractal noise statistics are frozen") {
  GraphNode noise{"n", NodeKind::FractalNoise, {{"octaves", 3LL}, {"seed", 7LL}}, {}};
  GraphNode rough{"r", NodeKind::ScalarConst, {}, {}};
  const MaterialGraph g =
      MaterialGraph::build("noise", {noise, rough}, {}, {{OutputSlot::Albedo, "n"}, {OutputSlot::Roughness, "r"}});
  const TextureSet t = evaluate_graph(g, 64, 64);
  double mean = 0.0, sq = 0.0;
  for (const Vec3& p : t.albedo.pixels) mean += p.x();
  mean /= double(t.albedo.size());
  for (const Vec3& p : t.albedo.pixels) sq += (p.x() - mean) * (p.x() - mean);
  const double var = sq / double(t.albedo.size());
  MESSAGE("noise mean=" << format_double(mean) << " var=" << format_double(var));
  CHECK(mean == doctest::Approx(test::kNoiseMean).epsilon(1e-12));
  CHECK(var == doctest::Approx(test::kNoiseVar).epsilon(1e-12));
}

TEST_CASE("every theta gradient matches finite differences on the metal prior") {
  const double err = max_fd_error(builtin_prior("body_painted"), 8, 8, 1);
  CHECK(err <= 1e-3);
}

TEST_CASE("prior gradients match finite differences for random theta") {
  std::mt19937 rng(2024);
  for (const auto& name : builtin_prior_names())
    for (int draw = 0; draw < 5; ++draw) {
      const MaterialGraph g = random_theta(builtin_prior(name), rng);
      const double err = max_fd_error(g, 8, 8, uint32_t(draw + 10));
      CHECK_MESSAGE(err <= 1e-3, name << " draw " << draw);
    }
}

TEST_CASE("out-of-bounds theta behaves as clamped theta") {
  MaterialGraph g = builtin_prior("body_painted");
  MaterialGraph clamped = g;
  g.set_parameter("base_ramp.r0", 1.7);
  g.set_parameter("base_noise.scale", -3.0);
  clamped.set_parameter("base_ramp.r0", 1.0);
  clamped.set_parameter("base_noise.scale", 1.0);
  Diagnostics diag;
  const TextureSet a = evaluate_graph(g, 16, 16, &diag);
  const TextureSet b = evaluate_graph(clamped, 16, 16);
  CHECK(a.albedo.pixels == b.albedo.pixels);
  CHECK(diag.warnings.size() == 2);
}

TEST_CASE("tileable noise continues across the texture border") {
  const int w = 32, h = 16;
  for (const auto& name : builtin_prior_names()) {
    for (const auto& node : builtin_prior(name).nodes()) {
      if (node.kind != NodeKind::FractalNoise) continue;
      REQUIRE(std::get<bool>(node.discrete.at("tileable")));
      const FractalNoiseSpec spec{int(std::get<long long>(node.discrete.at("octaves"))),
                                  uint32_t(std::get<long long>(node.discrete.at("seed"))), true};
      const double scale = node.params[0].value;
      // Column w (one past the end) must reproduce column 0, and likewise rows.
      for (int y = 0; y < h; ++y) {
        const double v = (y + 0.5) / h;
        CHECK(std::abs(fractal_noise(spec, scale, (w + 0.5) / w, v, nullptr) -
                       fractal_noise(spec, scale, 0.5 / w, v, nullptr)) < 1e-6);
      }
      for (int x = 0; x < w; ++x) {
        const double u = (x + 0.5) / w;
        CHECK(std::abs(fractal_noise(spec, scale, u, (h + 0.5) / h, nullptr) -
                       fractal_noise(spec, scale, u, 0.5 / h, nullptr)) < 1e-6);
      }
    }
  }
}

TEST_CASE("graph text round trip") {
  for (const auto& name : builtin_prior_names()) {
    MaterialGraph g = builtin_prior(name);
    std::vector<double> theta = g.parameters();
    for (double& v : theta) v = std::nextafter(v, 2.0);
    g.set_parameters(theta);
    const MaterialGraph back = parse_graph_text(format_graph_text(g));
    CHECK(back.parameters() == g.parameters());
    CHECK(format_graph_text(back) == format_graph_text(g));
    CHECK(back.nodes().size() == g.nodes().size());
    for (size_t i = 0; i < g.nodes().size(); ++i) CHECK(back.nodes()[i].discrete == g.nodes()[i].discrete);
  }
}

TEST_CASE("minimal graph parses") {
  const std::string text = R"({"name": "m",
    "nodes": [{"id": "c", "kind": "UniformColor", "params": {"r": 0.1, "g": 0.2, "b": 0.3}},
              {"id": "r", "kind": "ScalarConst", "params": {"value": 0.4}}],
    "edges": [], "outputs": {"albedo": "c", "roughness": "r"}})";
  const MaterialGraph g = parse_graph_text(text);
  const TextureSet t = evaluate_graph(g, 4, 4);
  CHECK(t.albedo.at(3, 3).isApprox(Vec3(0.1, 0.2, 0.3)));
  CHECK(t.normal.at(0, 0) == Vec3(0, 0, 1));
}

TEST_CASE("schema errors") {
  const std::string cycle = R"({"nodes": [{"id": "a", "kind": "BrightnessContrast"},
      {"id": "b", "kind": "BrightnessContrast"}],
    "edges": [{"from": "a", "to": "b", "port": "in"}, {"from": "b", "to": "a", "port": "in"}],
    "outputs": {"albedo": "a", "roughness": "b"}})";
  CHECK_THROWS_AS(parse_graph_text(cycle), SchemaError);
  const std::string unknown = R"({"nodes": [{"id": "a", "kind": "Voronoi"}], "edges": [],
    "outputs": {"albedo": "a"}})";
  CHECK_THROWS_AS(parse_graph_text(unknown), SchemaError);
  CHECK_THROWS_AS(evaluate_graph(minimal_graph(0, 0, 0), 12, 16), EvaluationError);
  CHECK_THROWS_AS(evaluate_graph(minimal_graph(0, 0, 0), 2048, 16), EvaluationError);
}

TEST_CASE("optimizable parameters exclude roughness, normal and transmission paths") {
  const MaterialGraph g = builtin_prior("body_painted");
  const auto names = g.parameter_names();
  const auto mask = optimizable_parameters(g);
  for (size_t i = 0; i < names.size(); ++i) {
    const bool albedo_path = names[i].rfind("base_", 0) == 0 || names[i].rfind("detail_", 0) == 0 ||
                             names[i].rfind("albedo_", 0) == 0;
    CHECK_MESSAGE(mask[i] == albedo_path, names[i]);
  }
  const auto with_rough = optimizable_parameters(g, {true, false});
  CHECK(with_rough[size_t(std::find(names.begin(), names.end(), "rough_level.brightness") - names.begin())]);
}
