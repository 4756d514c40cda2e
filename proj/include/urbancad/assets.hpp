#pragma once

#include "urbancad/common.hpp"

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace urbancad {

struct Corner {
  int position = 0;
  int normal = 0;
  int uv = 0;
  bool operator==(const Corner&) const = default;
};

using Triangle = std::array<Corner, 3>;

struct MeshGroup {
  std::string name;
  int material_index = 0;
  int face_start = 0;
  int face_count = 0;
  bool operator==(const MeshGroup&) const = default;
};

/// Indexed triangle mesh with named groups. Each group owns a contiguous range
/// of triangles and carries the material index authored for it.
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Vec3> normals;
  std::vector<Vec2> uvs;
  std::vector<Triangle> triangles;
  std::vector<MeshGroup> groups;

  /// Throws IntegrityError naming the first violated invariant.
  void validate() const;

  std::set<int> material_indices() const;

  /// Material index of every triangle, in triangle order.
  std::vector<int> triangle_materials() const;

  /// Axis-aligned bounds of the vertex positions.
  std::pair<Vec3, Vec3> bounds() const;
};

TriangleMesh read_mesh(const std::string& path);
TriangleMesh parse_mesh_text(const std::string& text, const std::string& source = "<mesh>");
std::string format_mesh_text(const TriangleMesh& mesh);
void write_mesh(const std::string& path, const TriangleMesh& mesh);

/// OBJ subset: v / vn / vt / f, `g name` and `usemtl N` start a new group with
/// material index N. Polygons are fan-triangulated.
TriangleMesh parse_obj(const std::string& text, const std::string& source = "<obj>");

struct EmbeddingVector {
  std::string id;
  std::vector<double> values;
};

/// Reads a little-endian float32 blob plus its JSON sidecar (id -> {offset, dim}).
/// Vectors are normalized to unit length.
std::map<std::string, EmbeddingVector> read_embeddings(const std::string& binary_path,
                                                       const std::string& index_path);
void write_embeddings(const std::string& binary_path, const std::string& index_path,
                      const std::vector<EmbeddingVector>& embeddings);

/// Scales `values` to unit Euclidean length. Throws on zero or non-finite input.
void normalize_embedding(EmbeddingVector& embedding);

/// Segmentation masks computed on a rendering of the asset at one azimuth.
struct RecognitionView {
  double azimuth_deg = 0.0;
  std::vector<std::string> mask_paths;  // resolved against the library root
};

struct CadAsset {
  std::string id;
  TriangleMesh mesh;
  std::string embedding_id;
  bool qualified = false;
  std::vector<RecognitionView> recognition;
};

/// A model qualifies for automatic material assignment when its groups use at
/// least two distinct material indices.
bool has_qualified_materials(const TriangleMesh& mesh);

struct Library {
  std::vector<CadAsset> assets;
  std::map<std::string, EmbeddingVector> embeddings;
  std::map<std::string, std::string> material_priors;

  const CadAsset& asset(const std::string& id) const;
  const EmbeddingVector& embedding_of(const CadAsset& asset) const;
};

/// Loads `root/manifest.json` and everything it references.
Library load_library(const std::string& root_path);

/// Keeps qualified assets in their original order.
Library filter_assets(const Library& library);

}  // namespace urbancad
