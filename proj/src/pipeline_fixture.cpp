#include "urbancad/fixture.hpp"
#include "urbancad/image_io.hpp"
#include "urbancad/pipeline.hpp"
#include "urbancad/shadow.hpp"

#include <cmath>
#include <filesystem>

namespace urbancad {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int kEmbeddingDim = 16;

std::vector<double> fixture_embedding(double a, double b) {
  std::vector<double> v(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; ++i) v[size_t(i)] = std::cos(a * (i + 1)) + 0.3 * std::sin(b * (i + 2));
  return v;
}

CarShape van_shape() {
  CarShape s;
  s.length = 4.6;
  s.width = 1.9;
  s.body_height = 1.0;
  s.cabin_height = 0.7;
  s.cabin_front = 1.4;
  s.cabin_rear = 2.0;
  return s;
}

Mask index_mask(const Image<int>& indices, int index) {
  Mask m(indices.width, indices.height, 0);
  for (size_t i = 0; i < m.size(); ++i) m.pixels[i] = indices.pixels[i] == index;
  return m;
}

// Street panorama: sky gradient with a sun above the horizon, asphalt and a
// row of darker facades below. `tint` shifts the ground colour per capture.
Panorama street_panorama(int height, const Vec3& tint, const Vec3& sun) {
  Panorama p;
  p.pixels = ImageRGB(2 * height, height);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < 2 * height; ++c) {
      const Vec3 d = equirect_direction(r, c, 2 * height, height);
      Vec3 v;
      if (d.z() >= 0) {
        v = Vec3(0.55, 0.68, 0.88) * (0.75 + 0.25 * d.z());
        if (d.dot(sun) > std::cos(6.0 * kPi / 180.0)) v = Vec3(1, 1, 1);
        if (d.z() < 0.25 && std::sin(6 * std::atan2(d.y(), d.x())) > 0.3) v = Vec3(0.3, 0.28, 0.27) + tint;
      } else {
        v = Vec3(0.36, 0.35, 0.34) + tint;
      }
      p.pixels.at(c, r) = v.cwiseMax(0.0).cwiseMin(1.0);
    }
  return p;
}

ImageRGB street_background(const CameraModel& camera) {
  ImageRGB img(camera.width, camera.height);
  const Vec3 eye = camera.center();
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      const Vec3 d = camera.ray_direction(x + 0.5, y + 0.5);
      Vec3 v(0.6, 0.72, 0.9);
      if (d.z() < 0) {
        const Vec3 hit = eye - eye.z() / d.z() * d;
        v = Vec3(0.4, 0.39, 0.38);
        if (std::abs(hit.y() + 3.0) < 0.08 && std::fmod(std::abs(hit.x()), 3.0) < 1.5) v = Vec3(0.9, 0.9, 0.85);
      }
      img.at(x, y) = v;
    }
  return img;
}

std::vector<double> vec(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

}  // namespace

std::string write_pipeline_fixture(const std::string& dir, int epochs) {
  const fs::path root(dir);
  for (const char* sub : {"library/meshes", "library/recognition", "reference", "fisheye", "frames"})
    fs::create_directories(root / sub);

  // Library: a sedan and a van, both with body / windows / wheels groups.
  const std::vector<std::pair<std::string, TriangleMesh>> assets{{"sedan", synthetic_car_mesh()},
                                                                 {"van", synthetic_car_mesh(van_shape())}};
  const std::vector<std::pair<double, double>> seeds{{0.7, 1.1}, {1.9, 0.4}};
  std::vector<EmbeddingVector> embeddings;
  ordered_json manifest;
  manifest["embeddings"] = {{"binary", "embeddings.bin"}, {"index", "embeddings.json"}};
  manifest["assets"] = ordered_json::array();
  for (size_t a = 0; a < assets.size(); ++a) {
    const auto& [id, mesh] = assets[a];
    write_mesh((root / "library/meshes" / (id + ".mesh")).string(), mesh);
    embeddings.push_back({"e_" + id, fixture_embedding(seeds[a].first, seeds[a].second)});
    ordered_json entry;
    entry["id"] = id;
    entry["mesh_path"] = "meshes/" + id + ".mesh";
    entry["embedding_id"] = "e_" + id;
    entry["recognition"] = ordered_json::array();
    const CameraModel cam = recognition_camera(mesh);
    int view = 0;
    for (double az : {35.0, 215.0}) {
      const RenderBuffers buf = rasterize(mesh, azimuth_pose(az), cam);
      ordered_json masks = ordered_json::array();
      for (const auto& [label, index, conf] :
           {std::tuple{kWindows, kCarWindowIndex, 0.92}, std::tuple{kWheels, kCarWheelIndex, 0.88}}) {
        SegmentationMask s;
        s.bits = index_mask(buf.material, index);
        s.label = label;
        s.confidence = conf - 0.05 * view;
        s.view_index = view;
        const std::string name = "recognition/" + id + "_v" + std::to_string(view) + "_" + label + ".png";
        write_segmentation_mask((root / "library" / name).string(), s);
        masks.push_back(name);
      }
      entry["recognition"].push_back({{"azimuth_deg", az}, {"masks", masks}});
      ++view;
    }
    manifest["assets"].push_back(entry);
  }
  write_embeddings((root / "library/embeddings.bin").string(), (root / "library/embeddings.json").string(),
                   embeddings);
  write_text_file((root / "library/manifest.json").string(), manifest.dump(2) + "\n");

  std::vector<double> query = fixture_embedding(seeds[0].first, seeds[0].second);
  const auto other = fixture_embedding(seeds[1].first, seeds[1].second);
  for (size_t i = 0; i < query.size(); ++i) query[i] += 0.15 * other[i];
  write_query_embedding((root / "query.emb").string(), query);

  // Reference photograph: the sedan at 30 degrees with a constant red body.
  const TriangleMesh sedan = assets[0].second;
  const CameraModel ref_cam = look_at_camera(96, 96, 35.0, Vec3(0.0, -9.0, 2.4), Vec3(0, 0, 0.7));
  const RigidTransform ref_pose = azimuth_pose(30.0);
  const EnvironmentMap ref_env = synthetic_sky();
  write_environment((root / "reference/environment.pfm").string(), ref_env);
  PartAssignment truth;
  truth.entries[kCarBodyIndex] = PartEntry{kBody, AssignmentSource::BodyRule, 0.0};
  truth.entries[kCarWindowIndex] = PartEntry{kWindows, AssignmentSource::Iou, 1.0};
  truth.entries[kCarWheelIndex] = PartEntry{kWheels, AssignmentSource::Iou, 1.0};
  const std::map<std::string, MaterialGraph> target{
      {kBody, uniform_color_graph("body_target", Vec3(0.55, 0.08, 0.06), 0.4)},
      {kWheels, uniform_color_graph("wheel_target", Vec3(0.05, 0.05, 0.05), 0.9)},
      {kWindows, builtin_prior("window")}};
  const RenderBuffers ref_buf = rasterize(sedan, ref_pose, ref_cam);
  const ShadedImage ref_fg = shade(sample_textures(ref_buf, assignment_textures(sedan, truth, target, 16)), ref_env,
                                   ref_cam);
  const ImageRGB ref_img =
      composite(ref_fg, ImageF(96, 96, 1.0), ImageRGB(96, 96, Vec3(0.45, 0.45, 0.45)), 1.0, 2.2);
  write_png_rgb((root / "reference/image.png").string(), ref_img);
  ordered_json ref_masks = ordered_json::array();
  for (const auto& [label, index] : {std::pair{kBody, kCarBodyIndex}, std::pair{kWindows, kCarWindowIndex},
                                     std::pair{kWheels, kCarWheelIndex}}) {
    SegmentationMask s;
    s.bits = index_mask(ref_buf.material, index);
    s.label = label;
    const std::string name = "reference/" + label + ".png";
    write_segmentation_mask((root / name).string(), s);
    ref_masks.push_back(name);
  }

  // Two fisheye rigs along the street.
  ordered_json pairs = ordered_json::array();
  const std::vector<std::pair<Vec3, Vec3>> rigs{{Vec3(-6, 0, 1.6), Vec3(0.02, 0.0, -0.02)},
                                                {Vec3(6, 0, 1.6), Vec3(-0.03, -0.01, 0.02)}};
  const Vec3 sun = Vec3(0.5, -0.4, 0.75).normalized();
  for (size_t i = 0; i < rigs.size(); ++i) {
    const Panorama pano = street_panorama(64, rigs[i].second, sun);
    const double fov = 200.0 * kPi / 180.0;
    const Vec3 offset(0, 0.1, 0);
    const FisheyeImage left =
        fisheye_from_panorama(pano, fisheye_orientation(Vec3(0, 1, 0)), rigs[i].first + offset, fov, 128);
    const FisheyeImage right =
        fisheye_from_panorama(pano, fisheye_orientation(Vec3(0, -1, 0)), rigs[i].first - offset, fov, 128);
    const std::string l = "fisheye/rig" + std::to_string(i) + "_left.png";
    const std::string r = "fisheye/rig" + std::to_string(i) + "_right.png";
    write_fisheye((root / l).string(), left);
    write_fisheye((root / r).string(), right);
    pairs.push_back({{"left", l}, {"right", r}});
  }

  const CameraModel frame_cam = look_at_camera(128, 96, 45.0, Vec3(1.0, -8.5, 2.2), Vec3(1.0, 0, 0.6));
  write_png_rgb((root / "frames/background_000.png").string(), street_background(frame_cam));

  ordered_json config;
  config["library"] = "library";
  config["query_embedding"] = "query.emb";
  config["reference"] = {{"image", "reference/image.png"},
                         {"masks", ref_masks},
                         {"camera", {{"width", 96}, {"height", 96}, {"fov_y_deg", 35.0},
                                     {"eye", {0.0, -9.0, 2.4}}, {"target", {0.0, 0.0, 0.7}}}},
                         {"position", {0.0, 0.0, 0.0}},
                         {"environment", "reference/environment.pfm"}};
  config["lighting"] = {{"fisheye_pairs", pairs}, {"panorama_height", 32}};
  ordered_json frame;
  frame["background"] = "frames/background_000.png";
  frame["camera"] = {{"width", 128}, {"height", 96}, {"fov_y_deg", 45.0}, {"eye", vec(Vec3(1.0, -8.5, 2.2))},
                     {"target", vec(Vec3(1.0, 0, 0.6))}};
  frame["insertion"] = {{"rotation_z_deg", 15.0}, {"translation", {1.5, 0.5, 0.0}}};
  config["frames"] = ordered_json::array({frame});
  config["optimize"] = {{"texture_resolution", 32}, {"max_env_width", 32}};
  if (epochs != OptimizeConfig{}.epochs) config["optimize"]["epochs"] = epochs;
  config["crop_size"] = 112;
  config["seed"] = 7;
  const std::string path = (root / "config.json").string();
  write_text_file(path, config.dump(2) + "\n");
  return path;
}

}  // namespace urbancad
