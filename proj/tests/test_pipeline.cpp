#include "test_util.hpp"

#include "urbancad/fixture.hpp"
#include "urbancad/image_io.hpp"
#include "urbancad/pipeline.hpp"
#include "urbancad/shadow.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>

using namespace urbancad;
namespace fs = std::filesystem;

namespace {

// Fixture written once per process; runs write into their own folders.
const std::string& fixture_config() {
  static const std::string path = [] {
    const auto dir = test::scratch_dir("pipeline_fixture");
    return write_pipeline_fixture(dir.string(), 25);
  }();
  return path;
}

std::string minimal_config() {
  return R"({
    "library": "lib", "query_embedding": "q.emb",
    "reference": {"image": "r.png", "masks": ["m.png"],
                  "camera": {"width": 8, "height": 8, "fov_y_deg": 40, "eye": [0, -5, 1], "target": [0, 0, 0]}}
  })";
}

}  // namespace

TEST_CASE("config defaults carry the loss constants") {
  const PipelineConfig c = parse_pipeline_config(minimal_config());
  CHECK(c.optimize.weights.stat == 0.1);
  CHECK(c.optimize.weights.vgg == 1.0);
  CHECK(c.optimize.weights.rgb == 1.0);
  CHECK(c.optimize.epochs == 300);
  CHECK(c.pose_step_deg == 5.0);
  CHECK(c.iou_threshold == 0.5);
  CHECK(c.body_painted);
  CHECK_FALSE(c.merge);
  CHECK(c.reference_camera.width == 8);
}

TEST_CASE("config errors are validation errors") {
  std::string bad = minimal_config();
  bad.insert(bad.rfind('}'), ", \"colour\": 1");
  CHECK_THROWS_AS(parse_pipeline_config(bad), ValidationError);
  CHECK_THROWS_AS(parse_pipeline_config("{"), ValidationError);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"library": "x"})"), ValidationError);
  std::string schedule = minimal_config();
  schedule.insert(schedule.rfind('}'), ", \"optimize\": {\"schedule\": \"step\"}");
  CHECK_THROWS_AS(parse_pipeline_config(schedule), ValidationError);
}

TEST_CASE("validation rejects a pose step that does not divide 360") {
  PipelineConfig c = read_pipeline_config(fixture_config());
  CHECK_NOTHROW(c.validate());
  c.pose_step_deg = 7.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.pose_step_deg = 7.5;
  CHECK_NOTHROW(c.validate());
  c.iou_threshold = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("a missing mask file fails before any stage runs") {
  PipelineConfig c = read_pipeline_config(fixture_config());
  c.reference_masks.push_back("reference/missing.png");
  const auto out = test::scratch_dir("pipeline_missing") / "out";
  CHECK_THROWS_AS(run_pipeline(c, out.string()), ValidationError);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("library root follows the environment override") {
  PipelineConfig c = read_pipeline_config(fixture_config());
  const std::string configured = c.library_root();
  ::setenv(kLibraryEnv, "/nonexistent/library", 1);
  CHECK(c.library_root() == "/nonexistent/library");
  CHECK_THROWS_AS(c.validate(), ValidationError);
  ::unsetenv(kLibraryEnv);
  CHECK(c.library_root() == configured);
}

TEST_CASE("camera, transform and assignment survive their text form") {
  const CameraModel cam = look_at_camera(32, 24, 50.0, Vec3(1, -6, 2), Vec3(0, 0, 0.5));
  const CameraModel back = parse_camera(camera_json(cam));
  CHECK(back.fx == cam.fx);
  CHECK(back.cy == cam.cy);
  CHECK(back.pose.rotation == cam.pose.rotation);
  CHECK(back.pose.translation == cam.pose.translation);

  const RigidTransform t = azimuth_pose(33.0, Vec3(1, 2, 0));
  const RigidTransform tb = parse_transform(transform_json(t));
  CHECK(tb.rotation == t.rotation);
  CHECK(tb.translation == t.translation);
  CHECK_THROWS_AS(parse_transform(nlohmann::json{{"rotation", {{2, 0, 0}, {0, 1, 0}, {0, 0, 1}}}}), ValidationError);

  PartAssignment a;
  a.entries[0] = {kBody, AssignmentSource::BodyRule, 0.0};
  a.entries[3] = {kWheels, AssignmentSource::Iou, 0.75};
  a.entries[5] = {kUnassigned, AssignmentSource::None, 0.125};
  a.selected_view = 2;
  a.diagnostics.warn("note");
  const PartAssignment ab = parse_assignment(assignment_json(a));
  CHECK(ab.selected_view == 2);
  REQUIRE(ab.entries.size() == 3);
  CHECK(ab.entries.at(3).label == kWheels);
  CHECK(ab.entries.at(3).source == AssignmentSource::Iou);
  CHECK(ab.entries.at(5).iou == 0.125);
  CHECK(ab.diagnostics.warnings == a.diagnostics.warnings);
}

TEST_CASE("query embeddings are raw float32 and come back normalized") {
  const auto dir = test::scratch_dir("query");
  const std::string path = (dir / "q.emb").string();
  write_query_embedding(path, {3.0, 0.0, 4.0});
  const EmbeddingVector e = read_query_embedding(path);
  REQUIRE(e.values.size() == 3);
  CHECK(e.values[0] == doctest::Approx(0.6));
  CHECK(e.values[2] == doctest::Approx(0.8));
  CHECK(e.id == "q");
  write_text_file(path, "abc");
  CHECK_THROWS_AS(read_query_embedding(path), LoadError);
}

TEST_CASE("recognition camera frames the whole vehicle") {
  const TriangleMesh mesh = synthetic_car_mesh();
  const CameraModel cam = recognition_camera(mesh);
  for (double az : {0.0, 45.0, 90.0, 200.0}) {
    const RenderBuffers buf = rasterize(mesh, azimuth_pose(az), cam);
    size_t covered = 0;
    for (int x = 0; x < buf.width; ++x) {
      CHECK(buf.coverage.at(x, 0) == 0);
      CHECK(buf.coverage.at(x, buf.height - 1) == 0);
    }
    for (int y = 0; y < buf.height; ++y) {
      CHECK(buf.coverage.at(0, y) == 0);
      CHECK(buf.coverage.at(buf.width - 1, y) == 0);
    }
    for (auto c : buf.coverage.pixels) covered += c;
    CHECK(covered > buf.coverage.size() / 20);
  }
}

TEST_CASE("silhouette pose matching recovers the rendered azimuth") {
  const TriangleMesh mesh = synthetic_car_mesh();
  const CameraModel cam = look_at_camera(96, 96, 35.0, Vec3(0, -9, 2.4), Vec3(0, 0, 0.7));
  const auto views = pose_view_features(mesh, cam, Vec3::Zero(), 5.0, 96);
  REQUIRE(views.size() == 72);
  for (double az : {30.0, 90.0, 160.0, 250.0}) {
    const RenderBuffers buf = rasterize(mesh, azimuth_pose(az), cam);
    const int v = match_pose(builtin_features(silhouette_crop(buf.coverage, 96)), views);
    double diff = std::abs(v * 5.0 - az);
    diff = std::min(diff, 360.0 - diff);
    CHECK(diff <= 5.0);
  }
  CHECK_THROWS_AS(silhouette_crop(Mask(4, 4, 0), 8), ValidationError);
}

TEST_CASE("linearize undoes the display transform") {
  ImageRGB img(2, 1, Vec3(0.5, 1.0, 0.0));
  const ImageRGB lin = linearize_ldr(img, 2.2);
  CHECK(lin.at(0, 0).x() == doctest::Approx(std::pow(0.5, 2.2)));
  CHECK(tone_map(lin.at(0, 0).x(), 1.0, 2.2) == doctest::Approx(0.5));
}

TEST_CASE("end-to-end fixture is complete and reproducible") {
  const PipelineConfig config = read_pipeline_config(fixture_config());
  const auto dir = test::scratch_dir("pipeline_runs");
  const RunManifest a = run_pipeline(config, (dir / "a").string());
  const RunManifest b = run_pipeline(config, (dir / "b").string());
  CHECK(a.digest() == b.digest());
  CHECK(read_text_file((dir / "a/manifest.json").string()) == a.text());

  const auto& m = a.data;
  CHECK(m["status"] == "complete");
  CHECK(m["asset"] == "sedan");
  CHECK(m["matched_azimuth_deg"].get<double>() == 30.0);
  CHECK(m["weights"]["stat"].get<double>() == 0.1);
  CHECK(m["epochs"].get<int>() == 25);
  CHECK(m["seed"].get<int>() == 7);
  REQUIRE(m["frames"].size() == 1);
  CHECK(m["frames"][0]["envmap"] == envmap_output_name(1));
  const auto& entries = m["assignment"]["entries"];
  REQUIRE(entries.size() == 3);
  CHECK(entries[0]["label"] == kBody);
  CHECK(entries[1]["label"] == kWindows);
  CHECK(entries[2]["label"] == kWheels);
  const auto& totals = m["loss"]["total"];
  REQUIRE(totals.size() == 25);
  CHECK(totals.back().get<double>() < totals.front().get<double>());

  const std::string frame = frame_output_name(0);
  CHECK(read_text_file((dir / "a" / frame).string()) == read_text_file((dir / "b" / frame).string()));
  const ImageRGB composite_img = read_png_rgb((dir / "a" / frame).string());
  CHECK(composite_img.same_shape(config.frames[0].camera.width, config.frames[0].camera.height));

  // Window graph leaves the optimizer untouched.
  const auto window = read_graph((dir / "a/graphs/windows.json").string());
  CHECK(window.parameters() == builtin_prior("window").parameters());
}

TEST_CASE("stages run one by one reproduce the full run") {
  const PipelineConfig config = read_pipeline_config(fixture_config());
  const auto dir = test::scratch_dir("pipeline_stages");
  const std::string full = (dir / "full").string(), split = (dir / "split").string();
  run_pipeline(config, full);
  stage_retrieve(config, split);
  stage_match_pose(config, split);
  stage_assign(config, split);
  stage_optimize(config, split);
  stage_envmaps(config, split);
  stage_render_frame(config, split, 0);
  for (const std::string name : {"retrieval.json", "pose.json", "assignment.json", "loss_report.json",
                                  "graphs/body.json", "graphs/wheels.json", "envmaps/env_000.pfm",
                                  "envmaps/env_001.pfm", "frames/frame_000.png"})
    CHECK_MESSAGE(read_text_file(full + "/" + name) == read_text_file(split + "/" + name), name);
  CHECK_THROWS_AS(stage_render_frame(config, split, 3), ValidationError);
}

TEST_CASE("a failing stage leaves a partial manifest") {
  const auto dir = test::scratch_dir("pipeline_failure");
  const fs::path src = fs::path(fixture_config()).parent_path();
  fs::copy(src, dir / "scene", fs::copy_options::recursive);
  // Narrow one fisheye so the pair no longer covers the sphere.
  const std::string side = (dir / "scene/fisheye/rig0_left.json").string();
  auto j = nlohmann::json::parse(read_text_file(side));
  j["fov_deg"] = 180.0;
  j["f"] = 64.0 / (0.5 * kPi);
  write_text_file(side, j.dump());
  const auto right_side = (dir / "scene/fisheye/rig0_right.json").string();
  auto r = nlohmann::json::parse(read_text_file(right_side));
  r["fov_deg"] = 180.0;
  r["f"] = 64.0 / (0.5 * kPi);
  write_text_file(right_side, r.dump());

  const PipelineConfig config = read_pipeline_config((dir / "scene/config.json").string());
  const std::string out = (dir / "out").string();
  try {
    run_pipeline(config, out);
    FAIL("expected a stage failure");
  } catch (const StageError& e) {
    CHECK(e.stage() == "envmaps");
    CHECK(std::string(e.what()).rfind("envmaps: ", 0) == 0);
  }
  const auto m = nlohmann::json::parse(read_text_file(out + "/manifest.json"));
  CHECK(m["status"] == "failed");
  CHECK(m["failed_stage"] == "envmaps");
  CHECK(m["stages"].size() == 4);
  CHECK(m.contains("assignment"));
}

TEST_CASE("shipped prior files equal the built-in priors") {
  for (const auto& name : builtin_prior_names()) {
    const std::string path = std::string(URBANCAD_SOURCE_DIR) + "/data/priors/" + name + ".json";
    CHECK_MESSAGE(read_text_file(path) == format_graph_text(builtin_prior(name)), name);
    CHECK(read_graph(path).parameters() == builtin_prior(name).parameters());
  }
}
