// Command-line front end: one subcommand per pipeline stage plus the full run.
// Exit codes: 0 success, 1 stage failure, 2 usage or validation error.

#include "urbancad/fixture.hpp"
#include "urbancad/image_io.hpp"
#include "urbancad/pipeline.hpp"
#include "urbancad/shadow.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace urbancad;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  std::string out = "out";
};

PipelineConfig load_config(const std::string& path, const Globals& g) {
  PipelineConfig c = read_pipeline_config(path);
  if (g.seed_set) c.seed = g.seed;
  return c;
}

MaterialGraph graph_argument(const std::string& arg) {
  for (const std::string& p : {arg, arg + ".json"})
    if (fs::is_regular_file(p)) return read_graph(p);
  return builtin_prior(fs::path(arg).stem().string());
}

int gradcheck(const std::vector<std::string>& graphs, int texture, int image) {
  std::vector<std::string> names = graphs;
  if (names.empty()) names = {"body_painted", "body_unpainted", "wheel"};
  double worst = 0.0;
  for (const auto& arg : names) {
    const MaterialGraph g = graph_argument(arg);
    const std::string label = g.name().rfind("wheel", 0) == 0 ? kWheels : kBody;
    const GradientCheck check = gradient_check(gradient_problem(g, label, image), gradient_config(texture));
    for (const auto& e : check.entries)
      std::printf("  %-24s analytic % .6e  numeric % .6e  rel %.2e\n", e.name.c_str(), e.analytic, e.numeric,
                  e.relative_error);
    std::printf("%s: %zu parameters, max relative error %.3e\n", g.name().c_str(), check.entries.size(),
                check.max_relative_error);
    worst = std::max(worst, check.max_relative_error);
  }
  return worst <= 1e-3 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vehicle retrieval, material fitting and insertion"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed recorded in the manifest")->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--threads", g.threads, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
  app.add_option("--out", g.out, "Output folder");

  std::string config;
  const auto config_opt = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--config", config, "Pipeline config file");
    if (required) o->required();
  };

  auto* retrieve = app.add_subcommand("retrieve", "Rank library assets by embedding similarity");
  std::string query, library;
  int top = 5;
  config_opt(retrieve, false);
  retrieve->add_option("--query", query, "Query embedding (raw float32)");
  retrieve->add_option("--library", library, "Library root");
  retrieve->add_option("--top", top, "Number of results")->check(CLI::PositiveNumber);

  auto* match = app.add_subcommand("match-pose", "Match the reference silhouette against the azimuth grid");
  config_opt(match, true);
  auto* assign = app.add_subcommand("assign", "Classify material indices into parts");
  config_opt(assign, true);
  auto* optimize = app.add_subcommand("optimize", "Fit body and wheel materials to the reference");
  config_opt(optimize, true);

  auto* envmap = app.add_subcommand("envmap", "Build environment maps from fisheye pairs");
  std::string left, right, env_out;
  int pano_height = 64;
  config_opt(envmap, false);
  envmap->add_option("--left", left, "Left fisheye PNG");
  envmap->add_option("--right", right, "Right fisheye PNG");
  envmap->add_option("--output", env_out, "Environment map PFM");
  envmap->add_option("--height", pano_height, "Panorama height")->check(CLI::Range(4, 4096));

  auto* render = app.add_subcommand("render", "Render and composite one frame");
  size_t frame = 0;
  config_opt(render, true);
  render->add_option("--frame", frame, "Frame index");

  auto* insert = app.add_subcommand("insert", "Composite a rendered foreground over a background");
  std::string fg_path, alpha_path, shadow_path, bg_path, insert_out;
  double exposure = 1.0, gamma = 2.2;
  insert->add_option("--foreground", fg_path, "Linear foreground radiance (PFM)")->required();
  insert->add_option("--alpha", alpha_path, "Foreground alpha (PFM)")->required();
  insert->add_option("--shadow", shadow_path, "Shadow factor (PFM); none means 1");
  insert->add_option("--background", bg_path, "Background PNG")->required();
  insert->add_option("--output", insert_out, "Output PNG")->required();
  insert->add_option("--exposure", exposure)->check(CLI::PositiveNumber);
  insert->add_option("--gamma", gamma)->check(CLI::PositiveNumber);

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage and write the manifest");
  config_opt(pipeline, true);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradient");
  std::vector<std::string> graphs;
  int texture = 8, image = 16;
  grad->add_option("--graph", graphs, "Graph file or built-in prior name (repeatable)");
  grad->add_option("--texture", texture, "Texture resolution")->check(CLI::PositiveNumber);
  grad->add_option("--image", image, "Image size")->check(CLI::PositiveNumber);

  auto* fixture = app.add_subcommand("fixture", "Write the synthetic end-to-end scene");
  std::string fixture_dir;
  int epochs = 300;
  fixture->add_option("--dir", fixture_dir, "Target folder")->required();
  fixture->add_option("--epochs", epochs, "Optimization epochs in the written config")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  set_thread_count(g.threads);

  try {
    if (*retrieve) {
      if (!config.empty()) {
        for (const auto& s : stage_retrieve(load_config(config, g), g.out)) std::printf("%s %.6f\n", s.id.c_str(), s.score);
        return 0;
      }
      if (query.empty() || library.empty()) throw ValidationError("retrieve needs --config or both --query and --library");
      const Library lib = filter_assets(load_library(library));
      for (const auto& s : retrieve_cad(read_query_embedding(query), lib, top)) std::printf("%s %.6f\n", s.id.c_str(), s.score);
      return 0;
    }
    if (*match) {
      const int view = stage_match_pose(load_config(config, g), g.out);
      std::printf("view %d\n", view);
      return 0;
    }
    if (*assign) {
      const PartAssignment a = stage_assign(load_config(config, g), g.out);
      for (const auto& [index, e] : a.entries)
        std::printf("%d %s %s %.4f\n", index, e.label.c_str(), to_string(e.source).c_str(), e.iou);
      for (const auto& w : a.diagnostics.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      return 0;
    }
    if (*optimize) {
      const LossReport r = stage_optimize(load_config(config, g), g.out);
      if (!r.epochs.empty()) std::printf("final total loss %.6e after %zu epochs\n", r.epochs.back().total, r.epochs.size());
      for (const auto& w : r.diagnostics.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      return 0;
    }
    if (*envmap) {
      if (!config.empty()) {
        for (const auto& name : stage_envmaps(load_config(config, g), g.out)) std::printf("%s\n", name.c_str());
        return 0;
      }
      if (left.empty() || right.empty() || env_out.empty())
        throw ValidationError("envmap needs --config or --left, --right and --output");
      const Panorama pano = stitch_panorama(read_fisheye(left), read_fisheye(right), pano_height);
      SkyModelParams params;
      ImageRGB sky(pano.pixels.width, params.boundary(pano.pixels.height));
      for (int y = 0; y < sky.height; ++y)
        for (int x = 0; x < sky.width; ++x) sky.at(x, y) = pano.pixels.at(x, y);
      write_environment(env_out, compose_envmap(ldr_to_hdr_sky(sky, params), pano, nullptr, params));
      return 0;
    }
    if (*render) {
      const size_t env = stage_render_frame(load_config(config, g), g.out, frame);
      std::printf("%s (envmap %zu)\n", frame_output_name(frame).c_str(), env);
      return 0;
    }
    if (*insert) {
      ShadedImage fg;
      fg.radiance = read_pfm_rgb(fg_path);
      fg.alpha = read_pfm_gray(alpha_path);
      const ImageRGB bg = read_png_rgb(bg_path);
      const ImageF shadow = shadow_path.empty() ? ImageF(bg.width, bg.height, 1.0) : read_pfm_gray(shadow_path);
      write_png_rgb(insert_out, composite(fg, shadow, bg, exposure, gamma));
      return 0;
    }
    if (*pipeline) {
      const RunManifest m = run_pipeline(load_config(config, g), g.out);
      std::printf("manifest %s\n", m.digest().c_str());
      return 0;
    }
    if (*grad) return gradcheck(graphs, texture, image);
    if (*fixture) {
      std::printf("%s\n", write_pipeline_fixture(fixture_dir, epochs).c_str());
      return 0;
    }
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
