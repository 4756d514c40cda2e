#include "urbancad/assets.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace urbancad {

using nlohmann::json;
namespace fs = std::filesystem;

void TriangleMesh::validate() const {
  const auto check_index = [](int index, size_t size, size_t tri, const char* what) {
    if (index < 0 || size_t(index) >= size) {
      std::ostringstream msg;
      msg << "triangle " << tri << ": " << what << " index " << index << " out of range [0, " << size << ")";
      throw IntegrityError(msg.str());
    }
  };
  for (size_t t = 0; t < triangles.size(); ++t) {
    for (const Corner& c : triangles[t]) {
      check_index(c.position, vertices.size(), t, "position");
      check_index(c.normal, normals.size(), t, "normal");
      check_index(c.uv, uvs.size(), t, "uv");
    }
  }
  std::vector<int> owner(triangles.size(), -1);
  for (size_t g = 0; g < groups.size(); ++g) {
    const MeshGroup& group = groups[g];
    if (group.material_index < 0)
      throw IntegrityError("group '" + group.name + "': negative material_index");
    if (group.face_start < 0 || group.face_count < 0 ||
        size_t(group.face_start) + size_t(group.face_count) > triangles.size())
      throw IntegrityError("group '" + group.name + "': face range outside triangle array");
    for (int f = group.face_start; f < group.face_start + group.face_count; ++f) {
      if (owner[size_t(f)] >= 0)
        throw IntegrityError("group '" + group.name + "': face range overlaps group '" +
                             groups[size_t(owner[size_t(f)])].name + "'");
      owner[size_t(f)] = int(g);
    }
  }
  for (size_t t = 0; t < owner.size(); ++t)
    if (owner[t] < 0) throw IntegrityError("triangle " + std::to_string(t) + " belongs to no group");
}

std::set<int> TriangleMesh::material_indices() const {
  std::set<int> out;
  for (const auto& g : groups) out.insert(g.material_index);
  return out;
}

std::vector<int> TriangleMesh::triangle_materials() const {
  std::vector<int> out(triangles.size(), 0);
  for (const auto& g : groups)
    for (int f = g.face_start; f < g.face_start + g.face_count; ++f) out[size_t(f)] = g.material_index;
  return out;
}

std::pair<Vec3, Vec3> TriangleMesh::bounds() const {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& v : vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return {lo, hi};
}

namespace {

[[noreturn]] void field_error(const std::string& source, const std::string& field, const std::string& what) {
  throw ParseError(source + ": field '" + field + "': " + what);
}

const json& require(const json& obj, const char* key, const std::string& source, const std::string& ctx) {
  if (!obj.is_object() || !obj.contains(key)) field_error(source, ctx + key, "missing");
  return obj.at(key);
}

double number_at(const json& j, const std::string& source, const std::string& field) {
  if (!j.is_number()) field_error(source, field, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) field_error(source, field, "non-finite number");
  return v;
}

int int_at(const json& j, const std::string& source, const std::string& field) {
  if (!j.is_number_integer()) field_error(source, field, "expected an integer");
  return j.get<int>();
}

template <int N>
Eigen::Matrix<double, N, 1> vec_at(const json& j, const std::string& source, const std::string& field) {
  if (!j.is_array() || j.size() != size_t(N))
    field_error(source, field, "expected an array of " + std::to_string(N) + " numbers");
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i) v[i] = number_at(j[size_t(i)], source, field + "[" + std::to_string(i) + "]");
  return v;
}

json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": " + e.what());
  }
}

}  // namespace

TriangleMesh parse_mesh_text(const std::string& text, const std::string& source) {
  const json doc = parse_json(text, source);
  if (!doc.is_object()) throw ParseError(source + ": top level must be an object");
  TriangleMesh mesh;
  const auto read_vecs = [&](const char* key, auto& out, auto tag) {
    const json& arr = require(doc, key, source, "");
    if (!arr.is_array()) field_error(source, key, "expected an array");
    constexpr int n = decltype(tag)::value;
    for (size_t i = 0; i < arr.size(); ++i)
      out.push_back(vec_at<n>(arr[i], source, std::string(key) + "[" + std::to_string(i) + "]"));
  };
  read_vecs("vertices", mesh.vertices, std::integral_constant<int, 3>{});
  read_vecs("normals", mesh.normals, std::integral_constant<int, 3>{});
  read_vecs("uvs", mesh.uvs, std::integral_constant<int, 2>{});

  const json& tris = require(doc, "triangles", source, "");
  if (!tris.is_array()) field_error(source, "triangles", "expected an array");
  for (size_t t = 0; t < tris.size(); ++t) {
    const std::string field = "triangles[" + std::to_string(t) + "]";
    if (!tris[t].is_array() || tris[t].size() != 3) field_error(source, field, "expected 3 corners");
    Triangle tri;
    for (size_t k = 0; k < 3; ++k) {
      const json& c = tris[t][k];
      const std::string cf = field + "[" + std::to_string(k) + "]";
      if (!c.is_array() || c.size() != 3) field_error(source, cf, "expected [position, normal, uv]");
      tri[k] = {int_at(c[0], source, cf + "[0]"), int_at(c[1], source, cf + "[1]"), int_at(c[2], source, cf + "[2]")};
    }
    mesh.triangles.push_back(tri);
  }

  const json& groups = require(doc, "groups", source, "");
  if (!groups.is_array()) field_error(source, "groups", "expected an array");
  for (size_t g = 0; g < groups.size(); ++g) {
    const std::string field = "groups[" + std::to_string(g) + "].";
    const json& name = require(groups[g], "name", source, field);
    if (!name.is_string()) field_error(source, field + "name", "expected a string");
    MeshGroup group;
    group.name = name.get<std::string>();
    group.material_index = int_at(require(groups[g], "material_index", source, field), source, field + "material_index");
    const json& faces = require(groups[g], "faces", source, field);
    if (!faces.is_array() || faces.size() != 2) field_error(source, field + "faces", "expected [start, count]");
    group.face_start = int_at(faces[0], source, field + "faces[0]");
    group.face_count = int_at(faces[1], source, field + "faces[1]");
    mesh.groups.push_back(group);
  }
  try {
    mesh.validate();
  } catch (const IntegrityError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return mesh;
}

std::string format_mesh_text(const TriangleMesh& mesh) {
  std::ostringstream out;
  const auto write_list = [&](const char* key, const auto& items, auto&& write_item, bool last) {
    out << "  \"" << key << "\": [";
    for (size_t i = 0; i < items.size(); ++i) {
      out << (i == 0 ? "\n    " : ",\n    ");
      write_item(items[i]);
    }
    out << (items.empty() ? "]" : "\n  ]") << (last ? "\n" : ",\n");
  };
  const auto write_vec = [&](const auto& v) {
    out << "[";
    for (int i = 0; i < v.size(); ++i) out << (i ? ", " : "") << format_double(v[i]);
    out << "]";
  };
  out << "{\n";
  write_list("vertices", mesh.vertices, write_vec, false);
  write_list("normals", mesh.normals, write_vec, false);
  write_list("uvs", mesh.uvs, write_vec, false);
  write_list("triangles", mesh.triangles, [&](const Triangle& t) {
    out << "[";
    for (size_t k = 0; k < 3; ++k)
      out << (k ? ", " : "") << "[" << t[k].position << ", " << t[k].normal << ", " << t[k].uv << "]";
    out << "]";
  }, false);
  write_list("groups", mesh.groups, [&](const MeshGroup& g) {
    out << "{\"name\": " << json(g.name).dump() << ", \"material_index\": " << g.material_index
        << ", \"faces\": [" << g.face_start << ", " << g.face_count << "]}";
  }, true);
  out << "}\n";
  return out.str();
}

void write_mesh(const std::string& path, const TriangleMesh& mesh) {
  mesh.validate();
  write_text_file(path, format_mesh_text(mesh));
}

TriangleMesh parse_obj(const std::string& text, const std::string& source) {
  TriangleMesh mesh;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::string group_name = "default";
  int material = 0;
  bool group_open = false;
  const auto fail = [&](const std::string& what) {
    throw ParseError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  const auto start_group = [&]() {
    if (group_open && mesh.groups.back().face_count == 0) {
      mesh.groups.back().name = group_name;
      mesh.groups.back().material_index = material;
      return;
    }
    mesh.groups.push_back({group_name, material, int(mesh.triangles.size()), 0});
    group_open = true;
  };
  const auto resolve = [&](int index, size_t count) {
    if (index < 0) index += int(count);
    else index -= 1;
    return index;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v" || tag == "vn") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) fail("expected 3 coordinates");
      (tag == "v" ? mesh.vertices : mesh.normals).push_back(v);
    } else if (tag == "vt") {
      Vec2 t;
      if (!(ls >> t.x() >> t.y())) fail("expected 2 texture coordinates");
      mesh.uvs.push_back(t);
    } else if (tag == "g" || tag == "o") {
      std::string name;
      ls >> name;
      group_name = name.empty() ? "default" : name;
      start_group();
    } else if (tag == "usemtl") {
      std::string name;
      ls >> name;
      try {
        size_t used = 0;
        material = std::stoi(name, &used);
        if (used != name.size()) throw std::invalid_argument(name);
      } catch (const std::exception&) {
        fail("usemtl expects an integer material index, got '" + name + "'");
      }
      start_group();
    } else if (tag == "f") {
      if (!group_open) start_group();
      std::vector<Corner> poly;
      std::string token;
      while (ls >> token) {
        int v = 0, t = 0, n = 0;
        if (std::sscanf(token.c_str(), "%d/%d/%d", &v, &t, &n) != 3) fail("faces must use v/vt/vn corners");
        poly.push_back({resolve(v, mesh.vertices.size()), resolve(n, mesh.normals.size()),
                        resolve(t, mesh.uvs.size())});
      }
      if (poly.size() < 3) fail("face with fewer than 3 corners");
      for (size_t k = 1; k + 1 < poly.size(); ++k) {
        mesh.triangles.push_back({poly[0], poly[k], poly[k + 1]});
        mesh.groups.back().face_count++;
      }
    }
  }
  std::erase_if(mesh.groups, [](const MeshGroup& g) { return g.face_count == 0; });
  try {
    mesh.validate();
  } catch (const IntegrityError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return mesh;
}

TriangleMesh read_mesh(const std::string& path) {
  const std::string text = read_text_file(path);
  if (fs::path(path).extension() == ".obj") return parse_obj(text, path);
  return parse_mesh_text(text, path);
}

void normalize_embedding(EmbeddingVector& embedding) {
  if (embedding.values.empty()) throw IntegrityError("embedding '" + embedding.id + "' has dimension 0");
  double norm2 = 0.0;
  for (double v : embedding.values) {
    if (!std::isfinite(v)) throw IntegrityError("embedding '" + embedding.id + "' has non-finite values");
    norm2 += v * v;
  }
  if (norm2 <= 0.0) throw IntegrityError("embedding '" + embedding.id + "' has zero length");
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& v : embedding.values) v *= inv;
}

std::map<std::string, EmbeddingVector> read_embeddings(const std::string& binary_path,
                                                       const std::string& index_path) {
  const std::string blob = read_text_file(binary_path);
  if (blob.size() % 4 != 0) throw LoadError(binary_path + ": size is not a multiple of 4 bytes");
  const size_t count = blob.size() / 4;
  json index;
  try {
    index = json::parse(read_text_file(index_path));
  } catch (const json::parse_error& e) {
    throw LoadError(index_path + ": " + e.what());
  }
  if (!index.is_object()) throw LoadError(index_path + ": expected an object of id -> {offset, dim}");
  std::map<std::string, EmbeddingVector> out;
  for (const auto& [id, entry] : index.items()) {
    if (!entry.contains("offset") || !entry.contains("dim") || !entry["offset"].is_number_unsigned() ||
        !entry["dim"].is_number_unsigned())
      throw LoadError(index_path + ": entry '" + id + "' needs unsigned offset and dim");
    const size_t offset = entry["offset"].get<size_t>();
    const size_t dim = entry["dim"].get<size_t>();
    if (offset + dim > count) throw LoadError(binary_path + ": entry '" + id + "' exceeds file bounds");
    EmbeddingVector e{id, std::vector<double>(dim)};
    for (size_t i = 0; i < dim; ++i) {
      uint32_t bits = 0;
      std::memcpy(&bits, blob.data() + (offset + i) * 4, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      float f = 0.0f;
      std::memcpy(&f, &bits, 4);
      e.values[i] = f;
    }
    try {
      normalize_embedding(e);
    } catch (const IntegrityError& err) {
      throw LoadError(binary_path + ": " + err.what());
    }
    out.emplace(id, std::move(e));
  }
  return out;
}

void write_embeddings(const std::string& binary_path, const std::string& index_path,
                      const std::vector<EmbeddingVector>& embeddings) {
  std::string blob;
  json index = json::object();
  size_t offset = 0;
  for (const auto& e : embeddings) {
    index[e.id] = {{"offset", offset}, {"dim", e.values.size()}};
    for (double v : e.values) {
      const float f = float(v);
      uint32_t bits = 0;
      std::memcpy(&bits, &f, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      blob.append(reinterpret_cast<const char*>(&bits), 4);
    }
    offset += e.values.size();
  }
  write_text_file(binary_path, blob);
  write_text_file(index_path, index.dump(2) + "\n");
}

bool has_qualified_materials(const TriangleMesh& mesh) { return mesh.material_indices().size() >= 2; }

const CadAsset& Library::asset(const std::string& id) const {
  for (const auto& a : assets)
    if (a.id == id) return a;
  throw IntegrityError("unknown asset id: " + id);
}

const EmbeddingVector& Library::embedding_of(const CadAsset& a) const {
  const auto it = embeddings.find(a.embedding_id);
  if (it == embeddings.end()) throw IntegrityError("asset '" + a.id + "': dangling embedding_id '" + a.embedding_id + "'");
  return it->second;
}

Library load_library(const std::string& root_path) {
  const fs::path root(root_path);
  const fs::path manifest_path = root / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path.string()));
  } catch (const json::parse_error& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  if (!manifest.is_object()) throw LoadError(manifest_path.string() + ": expected an object");

  Library lib;
  if (manifest.contains("embeddings")) {
    const json& emb = manifest["embeddings"];
    if (!emb.contains("binary") || !emb.contains("index"))
      throw LoadError(manifest_path.string() + ": embeddings needs 'binary' and 'index'");
    lib.embeddings = read_embeddings((root / emb["binary"].get<std::string>()).string(),
                                     (root / emb["index"].get<std::string>()).string());
  }
  if (manifest.contains("material_priors")) {
    for (const auto& [label, prior] : manifest["material_priors"].items())
      lib.material_priors[label] = prior.get<std::string>();
  }
  std::set<std::string> seen;
  for (const json& entry : manifest.value("assets", json::array())) {
    if (!entry.contains("id") || !entry.contains("mesh_path") || !entry.contains("embedding_id"))
      throw LoadError(manifest_path.string() + ": asset entries need id, mesh_path, embedding_id");
    CadAsset a;
    a.id = entry["id"].get<std::string>();
    if (!seen.insert(a.id).second) throw IntegrityError("duplicate asset id: " + a.id);
    const fs::path mesh_path = root / entry["mesh_path"].get<std::string>();
    try {
      a.mesh = read_mesh(mesh_path.string());
    } catch (const ParseError& e) {
      throw LoadError(std::string("corrupt mesh file: ") + e.what());
    }
    a.embedding_id = entry["embedding_id"].get<std::string>();
    if (!lib.embeddings.count(a.embedding_id))
      throw IntegrityError("asset '" + a.id + "': dangling embedding_id '" + a.embedding_id + "'");
    a.qualified = entry.contains("qualified") ? entry["qualified"].get<bool>() : has_qualified_materials(a.mesh);
    for (const json& view : entry.value("recognition", json::array())) {
      RecognitionView rv;
      rv.azimuth_deg = view.at("azimuth_deg").get<double>();
      for (const json& m : view.at("masks")) rv.mask_paths.push_back((root / m.get<std::string>()).string());
      a.recognition.push_back(std::move(rv));
    }
    lib.assets.push_back(std::move(a));
  }
  return lib;
}

Library filter_assets(const Library& library) {
  Library out;
  out.embeddings = library.embeddings;
  out.material_priors = library.material_priors;
  for (const auto& a : library.assets)
    if (a.qualified) out.assets.push_back(a);
  return out;
}

}  // namespace urbancad
