#pragma once

#include "urbancad/assets.hpp"
#include "urbancad/lighting.hpp"
#include "urbancad/matopt.hpp"
#include "urbancad/render.hpp"
#include "urbancad/retrieval.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace urbancad {

inline constexpr const char* kToolVersion = "0.3.0";

/// Environment variable that replaces the configured library root.
inline constexpr const char* kLibraryEnv = "URBANCAD_LIBRARY";

/// A stage of run_pipeline failed; the message starts with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message) : Error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct FisheyePair {
  std::string left;
  std::string right;
  std::string hdr_sky;       // optional externally predicted sky (PFM)
  std::string non_sky_mask;  // optional PNG at panorama resolution
};

struct FramePlan {
  std::string background;
  CameraModel camera;
  RigidTransform insertion;
};

/// Relative paths are resolved against `base_dir` (the config file's folder).
struct PipelineConfig {
  std::string base_dir = ".";
  std::string library;
  std::string query_embedding;
  std::string reference_image;
  std::vector<std::string> reference_masks;
  CameraModel reference_camera;
  Vec3 reference_position = Vec3::Zero();  // where the reference vehicle stands
  std::string reference_environment;       // optional PFM; uniform unit sky otherwise
  std::vector<FisheyePair> fisheye_pairs;
  std::vector<FramePlan> frames;
  OptimizeConfig optimize;
  double pose_step_deg = 5.0;
  double iou_threshold = 0.5;
  bool body_painted = true;
  bool merge = false;
  int top_k = 5;
  int crop_size = 224;
  int panorama_height = 64;
  SkyModelParams sky;
  double exposure = 1.0;
  double gamma = 2.2;
  std::uint64_t seed = 0;

  std::string resolve(const std::string& path) const;
  /// Library root after the environment override.
  std::string library_root() const;
  /// Throws ValidationError for bad values or referenced files that do not exist.
  void validate() const;
};

PipelineConfig parse_pipeline_config(const std::string& text, const std::string& base_dir = ".");
PipelineConfig read_pipeline_config(const std::string& path);

/// Camera from {"width", "height", "fov_y_deg", "eye", "target"} or
/// {"width", "height", "fx", "fy", "cx", "cy", "rotation" (rows), "translation"}.
CameraModel parse_camera(const nlohmann::json& j);
nlohmann::json camera_json(const CameraModel& camera);
/// {"rotation_z_deg", "translation"} or {"rotation" (rows), "translation"}.
RigidTransform parse_transform(const nlohmann::json& j);
nlohmann::json transform_json(const RigidTransform& t);

nlohmann::json assignment_json(const PartAssignment& assignment);
PartAssignment parse_assignment(const nlohmann::json& j);

/// Raw little-endian float32 vector, normalized on load.
EmbeddingVector read_query_embedding(const std::string& path);
void write_query_embedding(const std::string& path, const std::vector<double>& values);

/// Camera used for the library's recognition views: the bounding sphere about
/// the vertical axis spans two thirds of a 128 x 128 image, seen from 20
/// degrees above the horizon along world -y.
CameraModel recognition_camera(const TriangleMesh& mesh, int size = 128);
/// The asset turned by `azimuth_deg` about z and moved to `position`.
RigidTransform azimuth_pose(double azimuth_deg, const Vec3& position = Vec3::Zero());

/// Square crop around the mask's bounding box, resized to `size`.
ImageRGB silhouette_crop(const Mask& mask, int size);
/// Silhouette descriptors of the asset at azimuths 0, A, 2A, ... seen by `camera`.
std::vector<FeatureMap> pose_view_features(const TriangleMesh& mesh, const CameraModel& camera, const Vec3& position,
                                           double step_deg, int crop_size);

/// Linear reference image: PNG decoded and expanded with x^gamma.
ImageRGB linearize_ldr(const ImageRGB& image, double gamma);

// Stages. Each reads its inputs from the config and from earlier stage files in
// `out_dir`, and writes its own artifacts there.
std::vector<ScoredAsset> stage_retrieve(const PipelineConfig& config, const std::string& out_dir);
int stage_match_pose(const PipelineConfig& config, const std::string& out_dir);
PartAssignment stage_assign(const PipelineConfig& config, const std::string& out_dir);
LossReport stage_optimize(const PipelineConfig& config, const std::string& out_dir);
std::vector<std::string> stage_envmaps(const PipelineConfig& config, const std::string& out_dir);
/// Renders and composites frame `index`; returns the selected envmap index.
size_t stage_render_frame(const PipelineConfig& config, const std::string& out_dir, size_t index);

/// Artifact paths inside the output folder.
std::string frame_output_name(size_t index);
std::string envmap_output_name(size_t index);

struct RunManifest {
  nlohmann::ordered_json data;
  std::string text() const { return data.dump(2) + "\n"; }
  std::string digest() const;
};

/// Runs every stage into `out_dir` and writes manifest.json. A failing stage
/// writes a partial manifest and throws StageError.
RunManifest run_pipeline(const PipelineConfig& config, const std::string& out_dir);

/// Writes a small self-contained scene (two-asset library, reference view,
/// fisheye pairs, one background frame) and returns the config path.
std::string write_pipeline_fixture(const std::string& dir, int epochs = 300);

}  // namespace urbancad
