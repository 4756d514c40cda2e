#include "urbancad/retrieval.hpp"

#include "urbancad/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>

namespace urbancad {

using nlohmann::json;
namespace fs = std::filesystem;

size_t SegmentationMask::count() const {
  size_t n = 0;
  for (uint8_t b : bits.pixels) n += b ? 1 : 0;
  return n;
}

namespace {

std::string sidecar_path(const std::string& path) { return fs::path(path).replace_extension(".json").string(); }

}  // namespace

SegmentationMask read_segmentation_mask(const std::string& path) {
  SegmentationMask m;
  m.bits = read_png_mask(path);
  m.label = fs::path(path).stem().string();
  const std::string side = sidecar_path(path);
  if (fs::exists(side)) {
    json j;
    try {
      j = json::parse(read_text_file(side));
    } catch (const json::parse_error& e) {
      throw LoadError(side + ": " + e.what());
    }
    m.label = j.value("label", m.label);
    m.confidence = j.value("confidence", 1.0);
    m.view_index = j.value("view_index", 0);
  }
  if (!std::isfinite(m.confidence) || m.confidence < 0 || m.confidence > 1)
    throw ValidationError(path + ": confidence must lie in [0, 1]");
  return m;
}

void write_segmentation_mask(const std::string& path, const SegmentationMask& mask) {
  write_png_mask(path, mask.bits);
  json j = json::object();
  j["label"] = mask.label;
  j["confidence"] = mask.confidence;
  j["view_index"] = mask.view_index;
  write_text_file(sidecar_path(path), j.dump(2) + "\n");
}

std::string to_string(AssignmentSource source) {
  switch (source) {
    case AssignmentSource::Iou: return "iou";
    case AssignmentSource::BodyRule: return "body_rule";
    case AssignmentSource::Merged: return "merged";
    case AssignmentSource::None: return "none";
  }
  return "none";
}

const std::string& PartAssignment::label_of(int material_index) const {
  const auto it = entries.find(material_index);
  return it == entries.end() ? kUnassigned : it->second.label;
}

std::set<int> PartAssignment::indices_with(const std::string& label) const {
  std::set<int> out;
  for (const auto& [index, entry] : entries)
    if (entry.label == label) out.insert(index);
  return out;
}

// ---------------------------------------------------------------------------
// Feature map files

namespace {

void put_u32(std::string& out, uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  out.append(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(const std::string& in, size_t offset) {
  uint32_t v = 0;
  std::memcpy(&v, in.data() + offset, 4);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

}  // namespace

FeatureMap read_feature_map(const std::string& path) {
  const std::string blob = read_text_file(path);
  if (blob.size() < 12) throw LoadError(path + ": truncated feature map header");
  const uint32_t w = get_u32(blob, 0), h = get_u32(blob, 4), c = get_u32(blob, 8);
  const size_t n = size_t(w) * size_t(h) * size_t(c);
  if (w == 0 || h == 0 || c == 0 || blob.size() != 12 + 4 * n)
    throw LoadError(path + ": feature map size does not match its header");
  FeatureMap f(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (size_t i = 0; i < n; ++i) {
    const uint32_t bits = get_u32(blob, 12 + 4 * i);
    float v = 0.0f;
    std::memcpy(&v, &bits, 4);
    if (!std::isfinite(v)) throw LoadError(path + ": non-finite feature value");
    f.data[i] = v;
  }
  return f;
}

void write_feature_map(const std::string& path, const FeatureMap& features) {
  std::string blob;
  blob.reserve(12 + 4 * features.data.size());
  put_u32(blob, uint32_t(features.width));
  put_u32(blob, uint32_t(features.height));
  put_u32(blob, uint32_t(features.channels));
  for (double v : features.data) {
    const float f = float(v);
    uint32_t bits = 0;
    std::memcpy(&bits, &f, 4);
    put_u32(blob, bits);
  }
  write_text_file(path, blob);
}

// ---------------------------------------------------------------------------
// CAD retrieval and pose matching

std::vector<ScoredAsset> retrieve_cad(const EmbeddingVector& query, const Library& library, int k) {
  if (library.assets.empty()) throw ValidationError("retrieve_cad: empty library");
  if (k < 1) throw ValidationError("retrieve_cad: k must be at least 1");
  double qn = 0.0;
  for (double v : query.values) qn += v * v;
  qn = std::sqrt(qn);
  if (!(qn > 0.0) || !std::isfinite(qn)) throw ValidationError("retrieve_cad: query has zero or non-finite norm");

  std::vector<ScoredAsset> scored;
  scored.reserve(library.assets.size());
  for (const CadAsset& asset : library.assets) {
    const EmbeddingVector& e = library.embedding_of(asset);
    if (e.values.size() != query.values.size())
      throw DimensionError("retrieve_cad: query dimension " + std::to_string(query.values.size()) +
                           " != library dimension " + std::to_string(e.values.size()));
    double dot = 0.0, en = 0.0;
    for (size_t i = 0; i < e.values.size(); ++i) {
      dot += (query.values[i] / qn) * e.values[i];
      en += e.values[i] * e.values[i];
    }
    scored.push_back({asset.id, en > 0 ? dot / std::sqrt(en) : 0.0});
  }
  std::sort(scored.begin(), scored.end(), [](const ScoredAsset& a, const ScoredAsset& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  scored.resize(std::min(scored.size(), size_t(k)));
  return scored;
}

double feature_distance(const FeatureMap& a, const FeatureMap& b) {
  if (!a.same_layout(b))
    throw DimensionError("feature maps differ in layout: " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                         "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) + "x" +
                         std::to_string(b.height) + "x" + std::to_string(b.channels));
  double d = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double t = a.data[i] - b.data[i];
    d += t * t;
  }
  return d;
}

int match_pose(const FeatureMap& reference, const std::vector<FeatureMap>& views) {
  if (views.empty()) throw ValidationError("match_pose: no views");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < views.size(); ++j) {
    const double d = feature_distance(reference, views[j]);
    if (d < best_d) {
      best_d = d;
      best = int(j);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Part-aware recognition

IouCounts material_iou(const MaterialIndexMap& index_map, const Mask& mask, int material_index, IouMode mode) {
  const Image<int>& idx = index_map.indices;
  if (!mask.same_shape(idx)) throw DimensionError("mask and index map differ in resolution");
  const int w = idx.width, h = idx.height;
  Mask support(w, h, 0);
  if (mode == IouMode::DilatedSupport) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (idx.at(x, y) != material_index) continue;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx >= 0 && yy >= 0 && xx < w && yy < h) support.at(xx, yy) = 1;
          }
      }
  }
  IouCounts c;
  for (size_t i = 0; i < idx.size(); ++i) {
    const bool a = idx.pixels[i] == material_index;
    bool b = mask.pixels[i] != 0;
    if (mode == IouMode::DilatedSupport) b = b && support.pixels[i];
    c.intersection += (a && b) ? 1 : 0;
    c.union_ += (a || b) ? 1 : 0;
  }
  return c;
}

namespace {

struct ViewMask {
  Mask bits;
  double confidence_sum = 0.0;
  int count = 0;
  double mean_confidence() const { return confidence_sum / count; }
};

std::set<int> indices_present(const Image<int>& idx) {
  std::set<int> out;
  for (int v : idx.pixels)
    if (v != kBackgroundIndex) out.insert(v);
  return out;
}

}  // namespace

PartAssignment classify_materials(const std::vector<MaterialIndexMap>& index_maps,
                                  const std::vector<SegmentationMask>& masks, const ClassifyOptions& options) {
  if (!(options.iou_threshold > 0.0 && options.iou_threshold < 1.0))
    throw ValidationError("iou_threshold must lie in (0, 1)");
  std::map<int, const MaterialIndexMap*> by_view;
  for (const auto& m : index_maps)
    if (!by_view.emplace(m.view_index, &m).second)
      throw ValidationError("duplicate index map for view " + std::to_string(m.view_index));

  // label -> view -> union of that view's masks
  std::map<std::string, std::map<int, ViewMask>> grouped;
  std::map<int, std::pair<double, int>> view_confidence;
  for (const auto& m : masks) {
    const auto it = by_view.find(m.view_index);
    if (it == by_view.end())
      throw ValidationError("mask '" + m.label + "' refers to view " + std::to_string(m.view_index) +
                            " which has no index map");
    if (!m.bits.same_shape(it->second->indices))
      throw DimensionError("mask '" + m.label + "' resolution differs from the index map of view " +
                           std::to_string(m.view_index));
    ViewMask& vm = grouped[m.label][m.view_index];
    if (vm.count == 0) vm.bits = Mask(m.width(), m.height(), 0);
    for (size_t i = 0; i < vm.bits.size(); ++i) vm.bits.pixels[i] |= m.bits.pixels[i] ? 1 : 0;
    vm.confidence_sum += m.confidence;
    vm.count += 1;
    auto& vc = view_confidence[m.view_index];
    vc.first += m.confidence;
    vc.second += 1;
  }

  PartAssignment out;
  for (const auto& [view, map] : by_view)
    for (int i : indices_present(map->indices)) out.entries.emplace(i, PartEntry{});
  out.selected_view = by_view.empty() ? 0 : by_view.begin()->first;
  double best_view_conf = -1.0;
  for (const auto& [view, vc] : view_confidence) {
    const double mean = vc.first / vc.second;
    if (mean > best_view_conf) {
      best_view_conf = mean;
      out.selected_view = view;
    }
  }

  // index -> (label, iou) of the best passing label so far
  std::map<int, std::pair<std::string, double>> winners;
  for (const auto& [label, views] : grouped) {
    std::vector<int> chosen;
    if (options.union_views) {
      for (const auto& [view, vm] : views) chosen.push_back(view);
    } else {
      int best = views.begin()->first;
      double best_conf = -1.0;
      for (const auto& [view, vm] : views)
        if (vm.mean_confidence() > best_conf) {
          best_conf = vm.mean_confidence();
          best = view;
        }
      chosen.push_back(best);
    }
    for (int view : chosen) {
      const MaterialIndexMap& map = *by_view.at(view);
      const Mask& bits = views.at(view).bits;
      for (int i : indices_present(map.indices)) {
        const IouCounts c = material_iou(map, bits, i, options.mode);
        if (c.intersection == 0) continue;  // not active for this component
        const double iou = c.iou();
        if (!(iou > options.iou_threshold)) continue;
        auto it = winners.find(i);
        if (it == winners.end() || iou > it->second.second) winners[i] = {label, iou};
      }
    }
  }
  for (const auto& [i, w] : winners) out.entries[i] = PartEntry{w.first, AssignmentSource::Iou, w.second};
  return out;
}

PartAssignment assign_car_body(const PartAssignment& assignment, const MaterialIndexMap& index_map) {
  PartAssignment out = assignment;
  std::map<int, size_t> area;
  for (int v : index_map.indices.pixels)
    if (v != kBackgroundIndex) area[v] += 1;
  for (const auto& [i, a] : area) out.entries.emplace(i, PartEntry{});

  int chosen = kBackgroundIndex;
  size_t chosen_area = 0;
  for (const auto& [i, entry] : out.entries) {
    if (entry.label != kUnassigned) continue;
    const size_t a = area.count(i) ? area.at(i) : 0;
    if (chosen == kBackgroundIndex || a > chosen_area) {
      chosen = i;
      chosen_area = a;
    }
  }
  if (chosen == kBackgroundIndex) {
    out.diagnostics.warn("assign_car_body: no unassigned material index left");
    return out;
  }
  out.entries[chosen] = PartEntry{kBody, AssignmentSource::BodyRule, 0.0};
  return out;
}

namespace {

struct Descriptor {
  int x = 0, y = 0;
  std::vector<double> v;  // unit length or zero
};

std::vector<Descriptor> gather(const FeatureMap& f, const Mask& mask, const Image<int>* index, int max_grid) {
  const int stride = std::max(1, (std::max(f.width, f.height) + max_grid - 1) / max_grid);
  std::vector<Descriptor> out;
  for (int y = 0; y < f.height; y += stride)
    for (int x = 0; x < f.width; x += stride) {
      if (!mask.at(x, y)) continue;
      if (index && index->at(x, y) == kBackgroundIndex) continue;
      Descriptor d{x, y, std::vector<double>(size_t(f.channels))};
      double n = 0.0;
      for (int c = 0; c < f.channels; ++c) {
        d.v[size_t(c)] = f.at(c, x, y);
        n += d.v[size_t(c)] * d.v[size_t(c)];
      }
      if (n > 0)
        for (double& v : d.v) v /= std::sqrt(n);
      out.push_back(std::move(d));
    }
  return out;
}

double cosine_distance(const Descriptor& a, const Descriptor& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * b.v[i];
  return 1.0 - s;
}

}  // namespace

std::set<int> merge_by_correspondence(const FeatureMap& reference, const FeatureMap& cad,
                                      const Mask& reference_remaining, const Mask& cad_remaining,
                                      const MaterialIndexMap& cad_index_map, const MergeOptions& options) {
  if (reference.channels != cad.channels) throw DimensionError("merge_by_correspondence: channel counts differ");
  if (!reference_remaining.same_shape(reference.width, reference.height) ||
      !cad_remaining.same_shape(cad.width, cad.height) || !cad_index_map.indices.same_shape(cad.width, cad.height))
    throw DimensionError("merge_by_correspondence: mask or index map resolution differs from its feature map");
  const auto ref = gather(reference, reference_remaining, nullptr, options.max_grid);
  const auto cd = gather(cad, cad_remaining, &cad_index_map.indices, options.max_grid);
  std::set<int> merged;
  if (ref.empty() || cd.empty()) return merged;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<int> best_for_ref(ref.size(), -1);
  std::vector<double> d1(ref.size(), inf), d2(ref.size(), inf);
  std::vector<int> best_for_cad(cd.size(), -1);
  std::vector<double> cad_d(cd.size(), inf);
  for (size_t r = 0; r < ref.size(); ++r)
    for (size_t c = 0; c < cd.size(); ++c) {
      const double d = cosine_distance(ref[r], cd[c]);
      if (d < d1[r]) {
        d2[r] = d1[r];
        d1[r] = d;
        best_for_ref[r] = int(c);
      } else if (d < d2[r]) {
        d2[r] = d;
      }
      if (d < cad_d[c]) {
        cad_d[c] = d;
        best_for_cad[c] = int(r);
      }
    }
  std::map<int, int> hits;
  for (size_t r = 0; r < ref.size(); ++r) {
    const int c = best_for_ref[r];
    if (best_for_cad[size_t(c)] != int(r)) continue;
    if (!(d1[r] < options.ratio * d2[r])) continue;
    hits[cad_index_map.indices.at(cd[size_t(c)].x, cd[size_t(c)].y)] += 1;
  }
  for (const auto& [i, n] : hits)
    if (n >= options.min_hits) merged.insert(i);
  return merged;
}

MaterialGraph retrieve_material_prior(const std::string& label, bool body_painted) {
  if (label == kWindows) return builtin_prior("window");
  if (label == kWheels) return builtin_prior("wheel");
  if (label == kBody) return builtin_prior(body_painted ? "body_painted" : "body_unpainted");
  throw ValidationError("unknown component label '" + label + "'; known labels: " + kBody + ", " + kWheels + ", " +
                        kWindows);
}

ImageRGB resize_crop(const ImageRGB& image, int x0, int y0, int x1, int y1, int size) {
  if (x1 <= x0 || y1 <= y0 || size < 1) throw ValidationError("resize_crop: empty region");
  ImageRGB out(size, size);
  const double sx = double(x1 - x0) / size, sy = double(y1 - y0) / size;
  for (int j = 0; j < size; ++j)
    for (int i = 0; i < size; ++i) {
      const double px = std::clamp(x0 + (i + 0.5) * sx - 0.5, 0.0, double(image.width - 1));
      const double py = std::clamp(y0 + (j + 0.5) * sy - 0.5, 0.0, double(image.height - 1));
      const int ix = std::min(int(px), image.width - 1), iy = std::min(int(py), image.height - 1);
      const int jx = std::min(ix + 1, image.width - 1), jy = std::min(iy + 1, image.height - 1);
      const double fx = px - ix, fy = py - iy;
      out.at(i, j) = (1 - fy) * ((1 - fx) * image.at(ix, iy) + fx * image.at(jx, iy)) +
                     fy * ((1 - fx) * image.at(ix, jy) + fx * image.at(jx, jy));
    }
  return out;
}

}  // namespace urbancad
