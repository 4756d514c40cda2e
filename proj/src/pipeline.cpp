#include "urbancad/pipeline.hpp"

#include "urbancad/image_io.hpp"
#include "urbancad/shadow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

namespace urbancad {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

Vec3 vec3_of(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(what + ": expected three numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

Mat3 mat3_of(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(what + ": expected three rows");
  Mat3 m;
  for (int r = 0; r < 3; ++r) m.row(r) = vec3_of(j[size_t(r)], what).transpose();
  return m;
}

json rows_of(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ValidationError(where + ": unknown key '" + key + "'");
}

AssignmentSource source_from_string(const std::string& s) {
  for (auto src : {AssignmentSource::Iou, AssignmentSource::BodyRule, AssignmentSource::Merged, AssignmentSource::None})
    if (to_string(src) == s) return src;
  throw ParseError("unknown assignment source '" + s + "'");
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

json read_json(const std::string& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const ordered_json& j) {
  fs::create_directories(fs::path(path).parent_path());
  write_text_file(path, j.dump(2) + "\n");
}

// Artifacts of the earlier stages, as read back from the output folder.
struct Chosen {
  Library library;
  const CadAsset* asset = nullptr;
};

Chosen load_chosen(const PipelineConfig& config, const std::string& out_dir) {
  const json r = read_json(join(out_dir, "retrieval.json"));
  Chosen c;
  c.library = filter_assets(load_library(config.library_root()));
  c.asset = &c.library.asset(r.at("chosen").get<std::string>());
  return c;
}

RigidTransform load_pose(const std::string& out_dir) {
  return parse_transform(read_json(join(out_dir, "pose.json")).at("model_pose"));
}

PartAssignment load_assignment(const std::string& out_dir) {
  return parse_assignment(read_json(join(out_dir, "assignment.json")));
}

struct ReferenceData {
  ImageRGB ldr;
  std::vector<SegmentationMask> masks;
};

ReferenceData load_reference(const PipelineConfig& config) {
  ReferenceData r;
  r.ldr = read_png_rgb(config.resolve(config.reference_image));
  if (!r.ldr.same_shape(config.reference_camera.width, config.reference_camera.height))
    throw DimensionError("reference image resolution differs from the reference camera");
  for (const auto& path : config.reference_masks) {
    r.masks.push_back(read_segmentation_mask(config.resolve(path)));
    if (!r.masks.back().bits.same_shape(r.ldr)) throw DimensionError(path + ": mask resolution differs from the image");
  }
  return r;
}

Mask union_of(const std::vector<SegmentationMask>& masks, int w, int h) {
  Mask u(w, h, 0);
  for (const auto& m : masks)
    for (size_t i = 0; i < u.size(); ++i) u.pixels[i] |= m.bits.pixels[i] ? 1 : 0;
  return u;
}

std::map<std::string, Mask> masks_by_label(const std::vector<SegmentationMask>& masks) {
  std::map<std::string, Mask> out;
  for (const auto& m : masks) {
    auto [it, fresh] = out.try_emplace(m.label, m.bits.width, m.bits.height, uint8_t(0));
    for (size_t i = 0; i < it->second.size(); ++i) it->second.pixels[i] |= m.bits.pixels[i] ? 1 : 0;
  }
  return out;
}

EnvironmentMap reference_lighting(const PipelineConfig& config) {
  if (config.reference_environment.empty()) return uniform_environment(Vec3::Ones(), 32, 16);
  return read_environment(config.resolve(config.reference_environment));
}

MaterialGraph prior_for(const PipelineConfig& config, const Library& library, const std::string& label) {
  const auto it = library.material_priors.find(label);
  if (it == library.material_priors.end()) return retrieve_material_prior(label, config.body_painted);
  fs::path p(it->second);
  if (p.is_relative()) p = fs::path(config.library_root()) / p;
  return read_graph(p.string());
}

std::string graph_file(const std::string& label) { return "graphs/" + label + ".json"; }

std::map<std::string, MaterialGraph> load_graphs(const std::string& out_dir, const PartAssignment& assignment) {
  std::map<std::string, MaterialGraph> graphs;
  for (const auto& [index, entry] : assignment.entries) {
    if (entry.label == kUnassigned || graphs.count(entry.label)) continue;
    graphs[entry.label] = read_graph(join(out_dir, graph_file(entry.label)));
  }
  return graphs;
}

}  // namespace

// ---------------------------------------------------------------- config

std::string PipelineConfig::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (fs::path(base_dir) / p).string();
}

std::string PipelineConfig::library_root() const {
  if (const char* env = std::getenv(kLibraryEnv); env && *env) return env;
  return resolve(library);
}

void PipelineConfig::validate() const {
  const auto need = [&](const std::string& path, const std::string& what) {
    if (path.empty()) throw ValidationError(what + " is required");
    if (!fs::exists(resolve(path))) throw ValidationError(what + " not found: " + resolve(path));
  };
  const auto optional = [&](const std::string& path, const std::string& what) {
    if (!path.empty()) need(path, what);
  };
  if (!fs::exists(fs::path(library_root()) / "manifest.json"))
    throw ValidationError("library manifest not found under " + library_root());
  need(query_embedding, "query embedding");
  need(reference_image, "reference image");
  if (reference_masks.empty()) throw ValidationError("at least one reference mask is required");
  for (const auto& m : reference_masks) need(m, "reference mask");
  optional(reference_environment, "reference environment");
  reference_camera.validate();
  for (const auto& pair : fisheye_pairs) {
    need(pair.left, "fisheye image");
    need(pair.right, "fisheye image");
    need(fs::path(pair.left).replace_extension(".json").string(), "fisheye sidecar");
    need(fs::path(pair.right).replace_extension(".json").string(), "fisheye sidecar");
    optional(pair.hdr_sky, "HDR sky");
    optional(pair.non_sky_mask, "non-sky mask");
  }
  if (!frames.empty() && fisheye_pairs.empty()) throw ValidationError("frames need at least one fisheye pair");
  for (const auto& f : frames) {
    need(f.background, "background frame");
    f.camera.validate();
  }
  optimize.validate();
  sky.validate();
  if (!(pose_step_deg > 0) || std::abs(std::remainder(360.0, pose_step_deg)) > 1e-9)
    throw ValidationError("pose step must divide 360 degrees");
  if (!(iou_threshold > 0 && iou_threshold < 1)) throw ValidationError("IOU threshold must lie in (0, 1)");
  if (top_k < 1) throw ValidationError("top_k must be at least 1");
  if (crop_size < 8) throw ValidationError("crop size must be at least 8");
  if (panorama_height < 4) throw ValidationError("panorama height must be at least 4");
  if (!(exposure > 0) || !(gamma > 0)) throw ValidationError("exposure and gamma must be positive");
}

CameraModel parse_camera(const json& j) {
  try {
    const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
    if (j.contains("eye")) {
      check_keys(j, {"width", "height", "fov_y_deg", "eye", "target"}, "camera");
      return look_at_camera(w, h, j.at("fov_y_deg").get<double>(), vec3_of(j.at("eye"), "camera eye"),
                            vec3_of(j.at("target"), "camera target"));
    }
    check_keys(j, {"width", "height", "fx", "fy", "cx", "cy", "rotation", "translation"}, "camera");
    CameraModel c;
    c.width = w;
    c.height = h;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.pose.rotation = mat3_of(j.at("rotation"), "camera rotation");
    c.pose.translation = vec3_of(j.at("translation"), "camera translation");
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("camera: ") + e.what());
  }
}

json camera_json(const CameraModel& c) {
  json j;
  j["width"] = c.width;
  j["height"] = c.height;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["rotation"] = rows_of(c.pose.rotation);
  j["translation"] = {c.pose.translation.x(), c.pose.translation.y(), c.pose.translation.z()};
  return j;
}

RigidTransform parse_transform(const json& j) {
  try {
    check_keys(j, {"rotation_z_deg", "rotation", "translation"}, "transform");
    RigidTransform t;
    if (j.contains("rotation_z_deg") && j.contains("rotation"))
      throw ValidationError("transform: give either rotation_z_deg or rotation");
    if (j.contains("rotation_z_deg")) t.rotation = rotation_z(j["rotation_z_deg"].get<double>());
    if (j.contains("rotation")) {
      t.rotation = mat3_of(j["rotation"], "transform rotation");
      if ((t.rotation.transpose() * t.rotation - Mat3::Identity()).norm() > 1e-6 || t.rotation.determinant() < 0)
        throw ValidationError("transform: rotation is not a proper rotation");
    }
    if (j.contains("translation")) t.translation = vec3_of(j["translation"], "transform translation");
    return t;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("transform: ") + e.what());
  }
}

json transform_json(const RigidTransform& t) {
  json j;
  j["rotation"] = rows_of(t.rotation);
  j["translation"] = {t.translation.x(), t.translation.y(), t.translation.z()};
  return j;
}

json assignment_json(const PartAssignment& a) {
  json j;
  j["selected_view"] = a.selected_view;
  j["entries"] = json::array();
  for (const auto& [index, e] : a.entries)
    j["entries"].push_back({{"index", index}, {"label", e.label}, {"source", to_string(e.source)}, {"iou", e.iou}});
  j["warnings"] = a.diagnostics.warnings;
  return j;
}

PartAssignment parse_assignment(const json& j) {
  PartAssignment a;
  try {
    a.selected_view = j.at("selected_view").get<int>();
    for (const json& e : j.at("entries"))
      a.entries[e.at("index").get<int>()] =
          PartEntry{e.at("label").get<std::string>(), source_from_string(e.at("source").get<std::string>()),
                    e.at("iou").get<double>()};
    if (j.contains("warnings")) a.diagnostics.warnings = j["warnings"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("assignment: ") + e.what());
  }
  return a;
}

PipelineConfig parse_pipeline_config(const std::string& text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  check_keys(j,
             {"library", "query_embedding", "reference", "lighting", "frames", "weights", "optimize", "pose_step_deg",
              "iou_threshold", "body_painted", "merge", "top_k", "crop_size", "composite", "seed"},
             "config");
  PipelineConfig c;
  c.base_dir = base_dir;
  try {
    c.library = j.at("library").get<std::string>();
    c.query_embedding = j.at("query_embedding").get<std::string>();

    const json& ref = j.at("reference");
    check_keys(ref, {"image", "masks", "camera", "position", "environment"}, "reference");
    c.reference_image = ref.at("image").get<std::string>();
    c.reference_masks = ref.at("masks").get<std::vector<std::string>>();
    c.reference_camera = parse_camera(ref.at("camera"));
    if (ref.contains("position")) c.reference_position = vec3_of(ref["position"], "reference position");
    c.reference_environment = ref.value("environment", "");

    if (j.contains("lighting")) {
      const json& l = j["lighting"];
      check_keys(l,
                 {"fisheye_pairs", "panorama_height", "gamma", "sun_percentile", "sun_boost", "boundary_row",
                  "non_sky_luminance"},
                 "lighting");
      for (const json& p : l.value("fisheye_pairs", json::array())) {
        check_keys(p, {"left", "right", "hdr_sky", "non_sky_mask"}, "fisheye pair");
        c.fisheye_pairs.push_back({p.at("left").get<std::string>(), p.at("right").get<std::string>(),
                                   p.value("hdr_sky", ""), p.value("non_sky_mask", "")});
      }
      c.panorama_height = l.value("panorama_height", c.panorama_height);
      c.sky.gamma = l.value("gamma", c.sky.gamma);
      c.sky.sun_percentile = l.value("sun_percentile", c.sky.sun_percentile);
      c.sky.sun_boost = l.value("sun_boost", c.sky.sun_boost);
      c.sky.boundary_row = l.value("boundary_row", c.sky.boundary_row);
      c.sky.non_sky_luminance = l.value("non_sky_luminance", c.sky.non_sky_luminance);
    }
    for (const json& f : j.value("frames", json::array())) {
      check_keys(f, {"background", "camera", "insertion"}, "frame");
      c.frames.push_back({f.at("background").get<std::string>(), parse_camera(f.at("camera")),
                          parse_transform(f.at("insertion"))});
    }
    if (j.contains("weights")) {
      const json& w = j["weights"];
      check_keys(w, {"stat", "vgg", "rgb"}, "weights");
      c.optimize.weights.stat = w.value("stat", c.optimize.weights.stat);
      c.optimize.weights.vgg = w.value("vgg", c.optimize.weights.vgg);
      c.optimize.weights.rgb = w.value("rgb", c.optimize.weights.rgb);
    }
    if (j.contains("optimize")) {
      const json& o = j["optimize"];
      check_keys(o,
                 {"epochs", "step_size", "beta1", "beta2", "epsilon", "schedule", "texture_resolution",
                  "optimize_body", "optimize_wheels", "include_roughness", "include_normal", "specular",
                  "max_env_width"},
                 "optimize");
      auto& oc = c.optimize;
      oc.epochs = o.value("epochs", oc.epochs);
      oc.step_size = o.value("step_size", oc.step_size);
      oc.beta1 = o.value("beta1", oc.beta1);
      oc.beta2 = o.value("beta2", oc.beta2);
      oc.epsilon = o.value("epsilon", oc.epsilon);
      if (o.contains("schedule")) {
        const auto s = o["schedule"].get<std::string>();
        if (s == "cosine")
          oc.schedule = LearningRateSchedule::Cosine;
        else if (s == "constant")
          oc.schedule = LearningRateSchedule::Constant;
        else
          throw ValidationError("optimize: schedule must be 'cosine' or 'constant'");
      }
      oc.texture_resolution = o.value("texture_resolution", oc.texture_resolution);
      oc.optimize_body = o.value("optimize_body", oc.optimize_body);
      oc.optimize_wheels = o.value("optimize_wheels", oc.optimize_wheels);
      oc.policy.include_roughness = o.value("include_roughness", oc.policy.include_roughness);
      oc.policy.include_normal = o.value("include_normal", oc.policy.include_normal);
      oc.shading.specular = o.value("specular", oc.shading.specular);
      oc.shading.max_env_width = o.value("max_env_width", oc.shading.max_env_width);
    }
    c.pose_step_deg = j.value("pose_step_deg", c.pose_step_deg);
    c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
    c.body_painted = j.value("body_painted", c.body_painted);
    c.merge = j.value("merge", c.merge);
    c.top_k = j.value("top_k", c.top_k);
    c.crop_size = j.value("crop_size", c.crop_size);
    if (j.contains("composite")) {
      check_keys(j["composite"], {"exposure", "gamma"}, "composite");
      c.exposure = j["composite"].value("exposure", c.exposure);
      c.gamma = j["composite"].value("gamma", c.gamma);
    }
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

PipelineConfig read_pipeline_config(const std::string& path) {
  if (!fs::exists(path)) throw ValidationError("config not found: " + path);
  const fs::path parent = fs::path(path).parent_path();
  return parse_pipeline_config(read_text_file(path), parent.empty() ? "." : parent.string());
}

// ---------------------------------------------------------------- helpers

EmbeddingVector read_query_embedding(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % 4) throw LoadError(path + ": expected a non-empty float32 vector");
  EmbeddingVector e;
  e.id = fs::path(path).stem().string();
  e.values.resize(bytes.size() / 4);
  for (size_t i = 0; i < e.values.size(); ++i) {
    uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= uint32_t(uint8_t(bytes[4 * i + size_t(b)])) << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    e.values[i] = f;
  }
  normalize_embedding(e);
  return e;
}

void write_query_embedding(const std::string& path, const std::vector<double>& values) {
  std::string bytes;
  for (double v : values) {
    const float f = float(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) bytes.push_back(char((bits >> (8 * b)) & 0xff));
  }
  write_text_file(path, bytes);
}

CameraModel recognition_camera(const TriangleMesh& mesh, int size) {
  const auto [lo, hi] = mesh.bounds();
  const Vec3 centre(0, 0, 0.5 * (lo.z() + hi.z()));
  double radius = 0;
  for (const Vec3& v : mesh.vertices) radius = std::max(radius, (v - centre).norm());
  const double fov = 40.0, elevation = 20.0 * kPi / 180.0;
  const double distance = 1.5 * radius / std::sin(0.5 * fov * kPi / 180.0);
  const Vec3 eye = centre + distance * Vec3(0, -std::cos(elevation), std::sin(elevation));
  return look_at_camera(size, size, fov, eye, centre);
}

RigidTransform azimuth_pose(double azimuth_deg, const Vec3& position) { return {rotation_z(azimuth_deg), position}; }

ImageRGB silhouette_crop(const Mask& mask, int size) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw ValidationError("silhouette is empty");
  ImageRGB img(mask.width, mask.height, Vec3::Zero());
  for (size_t i = 0; i < img.size(); ++i)
    if (mask.pixels[i]) img.pixels[i] = Vec3::Ones();
  const int side = std::max(x1 - x0, y1 - y0) + 1;
  const int cx2 = x0 + x1 + 1, cy2 = y0 + y1 + 1;  // twice the box centre
  const int sx = (cx2 - side) / 2, sy = (cy2 - side) / 2;
  // resize_crop clamps at the borders, so pad explicitly with background
  ImageRGB padded(side, side, Vec3::Zero());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int ix = sx + x, iy = sy + y;
      if (ix >= 0 && iy >= 0 && ix < img.width && iy < img.height) padded.at(x, y) = img.at(ix, iy);
    }
  return resize_crop(padded, 0, 0, side, side, size);
}

std::vector<FeatureMap> pose_view_features(const TriangleMesh& mesh, const CameraModel& camera, const Vec3& position,
                                           double step_deg, int crop_size) {
  const int views = int(std::lround(360.0 / step_deg));
  std::vector<FeatureMap> out;
  for (int v = 0; v < views; ++v) {
    const RenderBuffers buf = rasterize(mesh, azimuth_pose(v * step_deg, position), camera);
    out.push_back(builtin_features(silhouette_crop(buf.coverage, crop_size)));
  }
  return out;
}

ImageRGB linearize_ldr(const ImageRGB& image, double gamma) {
  ImageRGB out(image.width, image.height);
  for (size_t i = 0; i < image.size(); ++i)
    for (int c = 0; c < 3; ++c) out.pixels[i][c] = std::pow(clamp01(image.pixels[i][c]), gamma);
  return out;
}

std::string frame_output_name(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frames/frame_%03zu.png", index);
  return buf;
}

std::string envmap_output_name(size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "envmaps/env_%03zu.pfm", index);
  return buf;
}

// ---------------------------------------------------------------- stages

std::vector<ScoredAsset> stage_retrieve(const PipelineConfig& config, const std::string& out_dir) {
  const Library library = filter_assets(load_library(config.library_root()));
  const EmbeddingVector query = read_query_embedding(config.resolve(config.query_embedding));
  const auto ranked = retrieve_cad(query, library, config.top_k);
  ordered_json j;
  j["ranked"] = ordered_json::array();
  for (const auto& s : ranked) j["ranked"].push_back({{"id", s.id}, {"score", s.score}});
  j["chosen"] = ranked.front().id;
  write_json(join(out_dir, "retrieval.json"), j);
  return ranked;
}

int stage_match_pose(const PipelineConfig& config, const std::string& out_dir) {
  const Chosen chosen = load_chosen(config, out_dir);
  const ReferenceData ref = load_reference(config);
  const Mask silhouette = union_of(ref.masks, ref.ldr.width, ref.ldr.height);
  const FeatureMap ref_features = builtin_features(silhouette_crop(silhouette, config.crop_size));
  const auto views = pose_view_features(chosen.asset->mesh, config.reference_camera, config.reference_position,
                                        config.pose_step_deg, config.crop_size);
  const int best = match_pose(ref_features, views);
  ordered_json j;
  j["asset"] = chosen.asset->id;
  j["view"] = best;
  j["views"] = views.size();
  j["azimuth_deg"] = best * config.pose_step_deg;
  j["model_pose"] = transform_json(azimuth_pose(best * config.pose_step_deg, config.reference_position));
  j["distances"] = ordered_json::array();
  for (const auto& v : views) j["distances"].push_back(feature_distance(ref_features, v));
  write_json(join(out_dir, "pose.json"), j);
  return best;
}

PartAssignment stage_assign(const PipelineConfig& config, const std::string& out_dir) {
  const Chosen chosen = load_chosen(config, out_dir);
  const CadAsset& asset = *chosen.asset;
  if (asset.recognition.empty()) throw ValidationError("asset '" + asset.id + "' has no recognition views");
  const CameraModel cam = recognition_camera(asset.mesh);
  std::vector<MaterialIndexMap> index_maps;
  std::vector<SegmentationMask> masks;
  for (size_t v = 0; v < asset.recognition.size(); ++v) {
    const auto& view = asset.recognition[v];
    MaterialIndexMap m;
    m.indices = rasterize(asset.mesh, azimuth_pose(view.azimuth_deg), cam).material;
    m.view_index = int(v);
    index_maps.push_back(m);
    for (const auto& path : view.mask_paths) {
      SegmentationMask s = read_segmentation_mask(path);
      s.view_index = int(v);
      masks.push_back(std::move(s));
    }
  }
  ClassifyOptions options;
  options.iou_threshold = config.iou_threshold;
  PartAssignment a = classify_materials(index_maps, masks, options);
  a = assign_car_body(a, index_maps.at(size_t(a.selected_view)));

  if (config.merge) {
    const ReferenceData ref = load_reference(config);
    const RigidTransform pose = load_pose(out_dir);
    const RenderBuffers buf = rasterize(asset.mesh, pose, config.reference_camera);
    std::map<std::string, MaterialGraph> graphs;
    for (const auto& label : {kBody, kWheels, kWindows}) graphs[label] = prior_for(config, chosen.library, label);
    const ShadedImage shaded = shade(
        sample_textures(buf, assignment_textures(asset.mesh, a, graphs, config.optimize.texture_resolution)),
        reference_lighting(config), config.reference_camera, config.optimize.shading);
    ImageRGB cad_ldr(buf.width, buf.height);
    for (size_t i = 0; i < cad_ldr.size(); ++i)
      for (int c = 0; c < 3; ++c)
        cad_ldr.pixels[i][c] = tone_map(shaded.radiance.pixels[i][c], config.exposure, config.gamma);
    const auto by_label = masks_by_label(ref.masks);
    Mask ref_remaining = union_of(ref.masks, ref.ldr.width, ref.ldr.height);
    for (const auto& label : {kWindows, kWheels})
      if (by_label.count(label))
        for (size_t i = 0; i < ref_remaining.size(); ++i)
          if (by_label.at(label).pixels[i]) ref_remaining.pixels[i] = 0;
    Mask cad_remaining(buf.width, buf.height, 0);
    for (size_t i = 0; i < cad_remaining.size(); ++i) {
      const int idx = buf.material.pixels[i];
      cad_remaining.pixels[i] = idx != kBackgroundIndex && a.label_of(idx) == kUnassigned;
    }
    MaterialIndexMap cad_map;
    cad_map.indices = buf.material;
    for (int idx : merge_by_correspondence(builtin_features(ref.ldr), builtin_features(cad_ldr), ref_remaining,
                                           cad_remaining, cad_map))
      if (a.label_of(idx) == kUnassigned) a.entries[idx] = PartEntry{kBody, AssignmentSource::Merged, 0.0};
  }
  write_json(join(out_dir, "assignment.json"), assignment_json(a));
  return a;
}

LossReport stage_optimize(const PipelineConfig& config, const std::string& out_dir) {
  const Chosen chosen = load_chosen(config, out_dir);
  const PartAssignment assignment = load_assignment(out_dir);
  const ReferenceData ref = load_reference(config);

  MaterialProblem p;
  p.mesh = chosen.asset->mesh;
  p.assignment = assignment;
  for (const auto& [index, entry] : assignment.entries)
    if (entry.label != kUnassigned && !p.priors.count(entry.label))
      p.priors[entry.label] = prior_for(config, chosen.library, entry.label);
  p.reference = linearize_ldr(ref.ldr, config.gamma);
  p.reference_masks = masks_by_label(ref.masks);
  p.model_pose = load_pose(out_dir);
  p.camera = config.reference_camera;
  p.lighting = reference_lighting(config);

  const OptimizationResult result = optimize_materials(p, config.optimize);
  fs::create_directories(fs::path(out_dir) / "graphs");
  for (const auto& [label, graph] : result.graphs) write_graph(join(out_dir, graph_file(label)), graph);
  write_text_file(join(out_dir, "loss_report.json"), format_loss_report(result.report));
  return result.report;
}

std::vector<std::string> stage_envmaps(const PipelineConfig& config, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "envmaps");
  std::vector<std::string> names;
  ordered_json info = ordered_json::array();
  for (size_t i = 0; i < config.fisheye_pairs.size(); ++i) {
    const FisheyePair& pair = config.fisheye_pairs[i];
    const Panorama pano = stitch_panorama(read_fisheye(config.resolve(pair.left)),
                                          read_fisheye(config.resolve(pair.right)), config.panorama_height);
    const int boundary = config.sky.boundary(pano.pixels.height);
    ImageRGB hdr_sky;
    if (!pair.hdr_sky.empty()) {
      hdr_sky = read_pfm_rgb(config.resolve(pair.hdr_sky));
    } else {
      ImageRGB sky(pano.pixels.width, boundary);
      for (int y = 0; y < boundary; ++y)
        for (int x = 0; x < sky.width; ++x) sky.at(x, y) = pano.pixels.at(x, y);
      hdr_sky = ldr_to_hdr_sky(sky, config.sky);
    }
    Mask non_sky;
    if (!pair.non_sky_mask.empty()) non_sky = read_png_mask(config.resolve(pair.non_sky_mask));
    Diagnostics diag;
    double scale = 1.0;
    const EnvironmentMap env = compose_envmap(hdr_sky, pano, pair.non_sky_mask.empty() ? nullptr : &non_sky,
                                              config.sky, &diag, &scale);
    const std::string name = envmap_output_name(i);
    write_environment(join(out_dir, name), env);
    char pano_name[40];
    std::snprintf(pano_name, sizeof pano_name, "envmaps/panorama_%03zu.png", i);
    write_png_rgb(join(out_dir, pano_name), pano.pixels);
    ordered_json e;
    e["envmap"] = name;
    e["panorama"] = pano_name;
    e["capture_position"] = {env.capture_position.x(), env.capture_position.y(), env.capture_position.z()};
    e["ground_scale"] = scale;
    e["saturated_fraction"] = saturation_fraction(pano.pixels);
    e["warnings"] = diag.warnings;
    info.push_back(e);
    names.push_back(name);
  }
  write_json(join(out_dir, "envmaps.json"), info);
  return names;
}

size_t stage_render_frame(const PipelineConfig& config, const std::string& out_dir, size_t index) {
  if (index >= config.frames.size()) throw ValidationError("frame index out of range");
  const FramePlan& frame = config.frames[index];
  const Chosen chosen = load_chosen(config, out_dir);
  const PartAssignment assignment = load_assignment(out_dir);
  const auto graphs = load_graphs(out_dir, assignment);
  std::vector<EnvironmentMap> envs;
  for (size_t i = 0; i < config.fisheye_pairs.size(); ++i)
    envs.push_back(read_environment(join(out_dir, envmap_output_name(i))));
  const size_t env_index = select_envmap_index(envs, frame.insertion.translation);
  const EnvironmentMap& env = envs[env_index];

  const TriangleMesh& mesh = chosen.asset->mesh;
  const RenderBuffers buf = rasterize(mesh, frame.insertion, frame.camera);
  const ShadeGrid grid = sample_textures(buf, assignment_textures(mesh, assignment, graphs,
                                                                  config.optimize.texture_resolution));
  const ShadedImage fg = shade(grid, env, frame.camera, config.optimize.shading);

  // Shadow catcher at the lowest point of the posed vehicle.
  double floor_z = std::numeric_limits<double>::infinity();
  for (const Vec3& v : mesh.vertices) floor_z = std::min(floor_z, frame.insertion.apply(v).z());
  Plane plane;
  plane.point = Vec3(frame.insertion.translation.x(), frame.insertion.translation.y(), floor_z);
  const ImageF shadow = render_shadow_plane(mesh, frame.insertion, plane, env, frame.camera);

  const ImageRGB background = read_png_rgb(config.resolve(frame.background));
  const ImageRGB out = composite(fg, shadow, background, config.exposure, config.gamma);
  const std::string name = frame_output_name(index);
  fs::create_directories(fs::path(out_dir) / "frames");
  write_png_rgb(join(out_dir, name), out);
  const std::string stem = join(out_dir, name.substr(0, name.size() - 4));
  ImageRGB fg_ldr(fg.radiance.width, fg.radiance.height);
  for (size_t i = 0; i < fg_ldr.size(); ++i)
    for (int c = 0; c < 3; ++c) fg_ldr.pixels[i][c] = tone_map(fg.radiance.pixels[i][c], config.exposure, config.gamma);
  write_png_rgba(stem + "_fg.png", fg_ldr, fg.alpha);
  write_pfm_rgb(stem + "_fg.pfm", fg.radiance);
  write_pfm_gray(stem + "_alpha.pfm", fg.alpha);
  write_pfm_gray(stem + "_shadow.pfm", shadow);
  return env_index;
}

// ---------------------------------------------------------------- run

std::string RunManifest::digest() const { return sha256_hex(text()); }

RunManifest run_pipeline(const PipelineConfig& config, const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);

  RunManifest m;
  m.data["tool"] = "urbancad";
  m.data["version"] = kToolVersion;
  m.data["seed"] = config.seed;
  m.data["status"] = "running";
  m.data["weights"] = {{"stat", config.optimize.weights.stat},
                       {"vgg", config.optimize.weights.vgg},
                       {"rgb", config.optimize.weights.rgb}};
  m.data["epochs"] = config.optimize.epochs;
  m.data["stages"] = ordered_json::array();
  const std::string manifest_path = join(out_dir, "manifest.json");

  // Config-side inputs are named as written in the config; outputs relative to out_dir.
  const auto file_digest = [&](const std::vector<std::string>& config_paths, const std::vector<std::string>& outputs) {
    std::string text;
    for (const auto& p : config_paths) text += p + " " + sha256_file(config.resolve(p)) + "\n";
    for (const auto& p : outputs) text += p + " " + sha256_file(join(out_dir, p)) + "\n";
    return sha256_hex(text);
  };
  const auto outputs_json = [&](const std::vector<std::string>& names) {
    ordered_json o = ordered_json::object();
    for (const auto& n : names) o[n] = sha256_file(join(out_dir, n));
    return o;
  };
  const auto run_stage = [&](const std::string& name, const std::function<ordered_json()>& body) {
    ordered_json entry;
    entry["name"] = name;
    try {
      ordered_json result = body();
      for (auto& [k, v] : result.items()) entry[k] = v;
    } catch (const std::exception& e) {
      m.data["status"] = "failed";
      m.data["failed_stage"] = name;
      m.data["error"] = e.what();
      write_text_file(manifest_path, m.text());
      throw StageError(name, e.what());
    }
    m.data["stages"].push_back(entry);
  };

  const std::string lib_manifest = (fs::path(config.library_root()) / "manifest.json").string();
  std::vector<std::string> reference_inputs{config.reference_image};
  for (const auto& mask : config.reference_masks) reference_inputs.push_back(mask);

  run_stage("retrieve", [&] {
    const auto ranked = stage_retrieve(config, out_dir);
    ordered_json r;
    r["inputs_digest"] = sha256_hex(sha256_file(lib_manifest) + file_digest({config.query_embedding}, {}));
    r["outputs"] = outputs_json({"retrieval.json"});
    m.data["asset"] = ranked.front().id;
    return r;
  });
  run_stage("match_pose", [&] {
    const int view = stage_match_pose(config, out_dir);
    ordered_json r;
    r["inputs_digest"] = file_digest(reference_inputs, {"retrieval.json"});
    r["outputs"] = outputs_json({"pose.json"});
    m.data["matched_view"] = view;
    m.data["matched_azimuth_deg"] = view * config.pose_step_deg;
    return r;
  });
  run_stage("assign", [&] {
    const PartAssignment a = stage_assign(config, out_dir);
    ordered_json r;
    r["inputs_digest"] = file_digest(reference_inputs, {"retrieval.json", "pose.json"});
    r["outputs"] = outputs_json({"assignment.json"});
    m.data["assignment"] = assignment_json(a);
    return r;
  });
  run_stage("optimize", [&] {
    const LossReport report = stage_optimize(config, out_dir);
    std::vector<std::string> outputs{"loss_report.json"};
    for (const auto& [label, theta] : report.final_parameters) outputs.push_back(graph_file(label));
    const PartAssignment a = load_assignment(out_dir);
    for (const auto& [index, entry] : a.entries)
      if (entry.label != kUnassigned && std::find(outputs.begin(), outputs.end(), graph_file(entry.label)) == outputs.end())
        outputs.push_back(graph_file(entry.label));
    std::vector<std::string> inputs = reference_inputs;
    if (!config.reference_environment.empty()) inputs.push_back(config.reference_environment);
    ordered_json r;
    r["inputs_digest"] = file_digest(inputs, {"retrieval.json", "pose.json", "assignment.json"});
    r["outputs"] = outputs_json(outputs);
    ordered_json curves = ordered_json::array();
    for (const auto& e : report.epochs) curves.push_back(e.total);
    ordered_json loss;
    loss["report"] = "loss_report.json";
    loss["total"] = curves;
    if (!report.epochs.empty()) {
      const auto& last = report.epochs.back();
      loss["final"] = {{"stat", last.terms.stat()}, {"vgg", last.terms.vgg}, {"rgb", last.terms.rgb}, {"total", last.total}};
    }
    loss["warnings"] = report.diagnostics.warnings;
    m.data["loss"] = loss;
    return r;
  });
  run_stage("envmaps", [&] {
    auto names = stage_envmaps(config, out_dir);
    std::vector<std::string> inputs;
    for (const auto& p : config.fisheye_pairs) {
      inputs.push_back(p.left);
      inputs.push_back(p.right);
      if (!p.hdr_sky.empty()) inputs.push_back(p.hdr_sky);
      if (!p.non_sky_mask.empty()) inputs.push_back(p.non_sky_mask);
    }
    names.push_back("envmaps.json");
    ordered_json r;
    r["inputs_digest"] = file_digest(inputs, {});
    r["outputs"] = outputs_json(names);
    return r;
  });
  run_stage("render", [&] {
    ordered_json frames = ordered_json::array();
    std::vector<std::string> outputs, inputs;
    for (size_t i = 0; i < config.frames.size(); ++i) {
      const size_t env = stage_render_frame(config, out_dir, i);
      inputs.push_back(config.frames[i].background);
      outputs.push_back(frame_output_name(i));
      ordered_json f;
      f["output"] = frame_output_name(i);
      f["envmap"] = envmap_output_name(env);
      f["digest"] = sha256_file(join(out_dir, frame_output_name(i)));
      frames.push_back(f);
    }
    m.data["frames"] = frames;
    std::vector<std::string> upstream{"assignment.json", "envmaps.json"};
    ordered_json r;
    r["inputs_digest"] = file_digest(inputs, upstream);
    r["outputs"] = outputs_json(outputs);
    return r;
  });

  m.data["status"] = "complete";
  write_text_file(manifest_path, m.text());
  return m;
}

}  // namespace urbancad
