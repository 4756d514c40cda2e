#pragma once

#include "urbancad/assets.hpp"
#include "urbancad/common.hpp"
#include "urbancad/matgraph.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace urbancad {

/// Binary component mask with its recognition metadata.
struct SegmentationMask {
  Mask bits;
  std::string label;
  double confidence = 1.0;
  int view_index = 0;

  int width() const { return bits.width; }
  int height() const { return bits.height; }
  size_t count() const;
};

/// Reads `path` (PNG, nonzero = inside) and the sidecar with the same stem and
/// a .json extension when present.
SegmentationMask read_segmentation_mask(const std::string& path);
void write_segmentation_mask(const std::string& path, const SegmentationMask& mask);

inline constexpr int kBackgroundIndex = -1;

struct MaterialIndexMap {
  Image<int> indices;  // kBackgroundIndex where no material
  int view_index = 0;
};

inline const std::string kWindows = "windows";
inline const std::string kWheels = "wheels";
inline const std::string kBody = "body";
inline const std::string kUnassigned = "unassigned";

enum class AssignmentSource { Iou, BodyRule, Merged, None };
std::string to_string(AssignmentSource source);

struct PartEntry {
  std::string label = kUnassigned;
  AssignmentSource source = AssignmentSource::None;
  double iou = 0.0;
};

struct PartAssignment {
  std::map<int, PartEntry> entries;
  int selected_view = 0;  // view used for area comparisons
  Diagnostics diagnostics;

  const std::string& label_of(int material_index) const;
  std::set<int> indices_with(const std::string& label) const;
};

enum class FeatureSource { Ingested, BuiltinFilterBank };

/// Planar descriptor grid: value(c, x, y) = data[(c * height + y) * width + x].
struct FeatureMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;
  FeatureSource source = FeatureSource::Ingested;

  FeatureMap() = default;
  FeatureMap(int w, int h, int c) : width(w), height(h), channels(c), data(size_t(w) * size_t(h) * size_t(c), 0.0) {}
  double& at(int c, int x, int y) { return data[(size_t(c) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)]; }
  double at(int c, int x, int y) const {
    return data[(size_t(c) * size_t(height) + size_t(y)) * size_t(width) + size_t(x)];
  }
  bool same_layout(const FeatureMap& o) const { return width == o.width && height == o.height && channels == o.channels; }
};

/// Little-endian: uint32 width, height, channels, then float32 planar values.
FeatureMap read_feature_map(const std::string& path);
void write_feature_map(const std::string& path, const FeatureMap& features);

struct ScoredAsset {
  std::string id;
  double score = 0.0;
};

/// Cosine-similarity ranking of library assets; ties go to the smaller id.
std::vector<ScoredAsset> retrieve_cad(const EmbeddingVector& query, const Library& library, int k);

/// Summed squared descriptor difference.
double feature_distance(const FeatureMap& a, const FeatureMap& b);

/// Index of the closest view; ties go to the lower index.
int match_pose(const FeatureMap& reference, const std::vector<FeatureMap>& views);

enum class IouMode {
  WholeMask,       // IOU(pixels of i, component mask)
  DilatedSupport,  // IOU(pixels of i, component mask restricted to i's support grown by one pixel)
};

struct ClassifyOptions {
  double iou_threshold = 0.5;
  IouMode mode = IouMode::WholeMask;
  bool union_views = false;  // assign when any view passes instead of the most confident one
};

/// Pixel counts behind one IOU decision.
struct IouCounts {
  size_t intersection = 0;
  size_t union_ = 0;
  double iou() const { return union_ == 0 ? 0.0 : double(intersection) / double(union_); }
};
IouCounts material_iou(const MaterialIndexMap& index_map, const Mask& mask, int material_index, IouMode mode);

/// Assigns material indices to component labels. Every non-background index in
/// any view gets an entry; an index passing for several labels keeps the one
/// with the higher IOU (earlier label name on an exact tie).
PartAssignment classify_materials(const std::vector<MaterialIndexMap>& index_maps,
                                  const std::vector<SegmentationMask>& masks, const ClassifyOptions& options = {});

/// Labels the unassigned index with the largest area in `index_map` as body.
PartAssignment assign_car_body(const PartAssignment& assignment, const MaterialIndexMap& index_map);

struct MergeOptions {
  int min_hits = 3;
  double ratio = 0.9;    // cosine-distance ratio between best and second-best match
  int max_grid = 48;     // descriptors are taken on a strided grid at most this wide
};

/// Material indices of the CAD rendering that collect at least `min_hits`
/// mutual-nearest-neighbour correspondences inside the remaining masks.
std::set<int> merge_by_correspondence(const FeatureMap& reference, const FeatureMap& cad,
                                      const Mask& reference_remaining, const Mask& cad_remaining,
                                      const MaterialIndexMap& cad_index_map, const MergeOptions& options = {});

/// Deep copy of the prior for a component label.
MaterialGraph retrieve_material_prior(const std::string& label, bool body_painted = true);

/// 13-channel filter bank: luminance, then for sigma 1, 2, 4 the difference of
/// the blurred luminance across offsets (s,0), (s,s), (0,s), (-s,s), s = sigma.
/// Borders clamp. The bank is linear in the image.
inline constexpr int kFeatureChannels = 13;
FeatureMap builtin_features(const ImageRGB& image);

/// Transpose of builtin_features applied to a feature cotangent.
ImageRGB builtin_features_adjoint(const FeatureMap& cotangent);

/// Bilinear resize of an image region [x0, x1) x [y0, y1) to `size` x `size`.
ImageRGB resize_crop(const ImageRGB& image, int x0, int y0, int x1, int y1, int size);

}  // namespace urbancad
