#include "oracles.hpp"
#include "test_util.hpp"

#include "urbancad/retrieval.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace urbancad;

namespace {

Library library_of(const std::map<std::string, std::vector<double>>& vectors) {
  Library lib;
  for (const auto& [id, v] : vectors) {
    CadAsset a;
    a.id = id;
    a.embedding_id = "e_" + id;
    a.qualified = true;
    lib.assets.push_back(a);
    lib.embeddings["e_" + id] = EmbeddingVector{"e_" + id, v};
  }
  return lib;
}

std::vector<double> random_unit(std::mt19937& rng, int dim) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(dim));
  double s = 0;
  for (double& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

MaterialIndexMap index_map_from(const std::vector<std::string>& rows) {
  MaterialIndexMap m;
  m.indices = Image<int>(int(rows[0].size()), int(rows.size()), kBackgroundIndex);
  for (size_t y = 0; y < rows.size(); ++y)
    for (size_t x = 0; x < rows[y].size(); ++x)
      if (rows[y][x] != '.') m.indices.at(int(x), int(y)) = rows[y][x] - '0';
  return m;
}

SegmentationMask mask_from(const std::vector<std::string>& rows, const std::string& label, double confidence = 1.0,
                           int view = 0) {
  SegmentationMask m;
  m.bits = Mask(int(rows[0].size()), int(rows.size()), 0);
  for (size_t y = 0; y < rows.size(); ++y)
    for (size_t x = 0; x < rows[y].size(); ++x) m.bits.at(int(x), int(y)) = rows[y][x] == '#';
  m.label = label;
  m.confidence = confidence;
  m.view_index = view;
  return m;
}

SegmentationMask mask_of(const Mask& bits, const std::string& label) {
  SegmentationMask m;
  m.bits = bits;
  m.label = label;
  return m;
}

// Direct 2-D Gaussian blur with clamped borders, no separability.
ImageF direct_blur(const ImageF& in, int sigma) {
  const int r = 3 * sigma;
  double norm = 0;
  for (int i = -r; i <= r; ++i) norm += std::exp(-0.5 * i * i / double(sigma * sigma));
  ImageF out(in.width, in.height, 0.0);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0;
      for (int j = -r; j <= r; ++j)
        for (int i = -r; i <= r; ++i) {
          const double w = std::exp(-0.5 * (i * i + j * j) / double(sigma * sigma)) / (norm * norm);
          s += w * in.at(std::clamp(x + i, 0, in.width - 1), std::clamp(y + j, 0, in.height - 1));
        }
      out.at(x, y) = s;
    }
  return out;
}

}  // namespace

TEST_SUITE("retrieve_cad") {
  TEST_CASE("self-similarity ranks the identical vector first with score 1") {
    std::mt19937 rng(3);
    std::map<std::string, std::vector<double>> vectors;
    for (int i = 0; i < 10; ++i) vectors["a" + std::to_string(i)] = random_unit(rng, 16);
    const Library lib = library_of(vectors);
    const auto r = retrieve_cad(EmbeddingVector{"q", vectors["a4"]}, lib, 3);
    REQUIRE(r.size() == 3);
    CHECK(r[0].id == "a4");
    CHECK(r[0].score == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r[0].score >= r[1].score);
    CHECK(r[1].score >= r[2].score);
  }

  TEST_CASE("orthogonal query ties everything and falls back to id order") {
    const Library lib = library_of({{"c", {1, 0, 0}}, {"a", {0, 1, 0}}, {"b", {0, 1, 0}}});
    const auto r = retrieve_cad(EmbeddingVector{"q", {0, 0, 1}}, lib, 3);
    REQUIRE(r.size() == 3);
    CHECK(r[0].id == "a");
    CHECK(r[1].id == "b");
    CHECK(r[2].id == "c");
    for (const auto& s : r) CHECK(s.score == 0.0);
  }

  TEST_CASE("planted neighbour matches the exhaustive scan and survives positive scaling") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> scale(1e-3, 1e3);
    for (int trial = 0; trial < 100; ++trial) {
      std::map<std::string, std::vector<double>> vectors;
      for (int i = 0; i < 100; ++i) vectors["id" + std::to_string(1000 + i)] = random_unit(rng, 32);
      std::vector<double> q = vectors["id1042"];
      std::normal_distribution<double> n(0.0, 0.01);
      for (double& x : q) x += n(rng);
      const Library lib = library_of(vectors);
      const auto top = retrieve_cad(EmbeddingVector{"q", q}, lib, 1);
      CHECK(top[0].id == oracle::nearest_by_cosine(q, vectors));
      CHECK(top[0].id == "id1042");
      std::vector<double> scaled = q;
      const double s = scale(rng);
      for (double& x : scaled) x *= s;
      CHECK(retrieve_cad(EmbeddingVector{"q", scaled}, lib, 1)[0].id == top[0].id);
    }
  }

  TEST_CASE("result does not depend on library storage order") {
    std::mt19937 rng(5);
    std::map<std::string, std::vector<double>> vectors;
    for (int i = 0; i < 20; ++i) vectors["v" + std::to_string(i)] = random_unit(rng, 8);
    vectors["dup"] = vectors["v3"];
    Library lib = library_of(vectors);
    const auto q = EmbeddingVector{"q", vectors["v3"]};
    const auto a = retrieve_cad(q, lib, 21);
    std::reverse(lib.assets.begin(), lib.assets.end());
    const auto b = retrieve_cad(q, lib, 21);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].id == b[i].id);
    CHECK(a[0].id == "dup");
    CHECK(a[1].id == "v3");
  }

  TEST_CASE("errors") {
    const Library lib = library_of({{"a", {1, 0}}});
    CHECK_THROWS_AS(retrieve_cad(EmbeddingVector{"q", {1, 0, 0}}, lib, 1), DimensionError);
    CHECK_THROWS_AS(retrieve_cad(EmbeddingVector{"q", {1, 0}}, Library{}, 1), ValidationError);
    CHECK(retrieve_cad(EmbeddingVector{"q", {1, 0}}, lib, 5).size() == 1);
  }
}

TEST_SUITE("match_pose") {
  TEST_CASE("identical view wins and ties go to the lower index") {
    std::mt19937 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<FeatureMap> views;
    for (int j = 0; j < 6; ++j) {
      FeatureMap f(4, 3, 2);
      for (double& v : f.data) v = u(rng);
      views.push_back(f);
    }
    CHECK(match_pose(views[4], views) == 4);
    views[5] = views[2];
    CHECK(match_pose(views[2], views) == 2);
  }

  TEST_CASE("permuting views permutes the answer") {
    std::mt19937 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    FeatureMap ref(5, 5, 3);
    for (double& v : ref.data) v = u(rng);
    std::vector<FeatureMap> views;
    for (int j = 0; j < 12; ++j) {
      FeatureMap f(5, 5, 3);
      for (double& v : f.data) v = u(rng);
      views.push_back(f);
    }
    const int best = match_pose(ref, views);
    std::vector<int> perm(views.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<FeatureMap> permuted;
    for (int p : perm) permuted.push_back(views[size_t(p)]);
    CHECK(perm[size_t(match_pose(ref, permuted))] == best);
  }

  TEST_CASE("layout mismatch and empty view list are errors") {
    CHECK_THROWS_AS(match_pose(FeatureMap(4, 4, 2), {FeatureMap(4, 4, 3)}), DimensionError);
    CHECK_THROWS_AS(match_pose(FeatureMap(4, 4, 2), {}), ValidationError);
  }
}

TEST_SUITE("classify_materials") {
  TEST_CASE("exact support is assigned, disjoint index is not active") {
    const MaterialIndexMap m = index_map_from({"0011", "0011", "2222"});
    const auto a = classify_materials({m}, {mask_from({"..##", "..##", "...."}, kWindows)});
    CHECK(a.label_of(1) == kWindows);
    CHECK(a.entries.at(1).iou == 1.0);
    CHECK(a.entries.at(1).source == AssignmentSource::Iou);
    CHECK(a.label_of(0) == kUnassigned);
    CHECK(a.label_of(2) == kUnassigned);
    CHECK(a.entries.size() == 3);
  }

  TEST_CASE("IOU exactly at the threshold is not assigned") {
    // index 1 has 2 pixels, the mask covers them plus 2 more: IOU = 2/4.
    const MaterialIndexMap m = index_map_from({"11..", "...."});
    CHECK(classify_materials({m}, {mask_from({"####", "...."}, kWheels)}).label_of(1) == kUnassigned);
    // one pixel less in the mask: IOU = 2/3.
    CHECK(classify_materials({m}, {mask_from({"###.", "...."}, kWheels)}).label_of(1) == kWheels);
  }

  TEST_CASE("16x16 grid with three indices equals the pixel-count oracle") {
    MaterialIndexMap m;
    m.indices = Image<int>(16, 16, kBackgroundIndex);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) m.indices.at(x, y) = y < 5 ? 0 : (x < 8 ? 1 : 2);
    Mask windows(16, 16, 0), wheels(16, 16, 0);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        windows.at(x, y) = y < 6;                    // covers index 0 plus a row of 1 and 2
        wheels.at(x, y) = y >= 7 && x >= 6 && x < 15;  // overlaps 1 and most of 2
      }
    const auto got = classify_materials({m}, {mask_of(windows, kWindows), mask_of(wheels, kWheels)});
    const auto want = oracle::brute_force_classification(m.indices, {{kWindows, windows}, {kWheels, wheels}}, 0.5);
    for (const auto& [i, label] : want) CHECK(got.label_of(i) == label);
    CHECK(got.label_of(0) == kWindows);
    CHECK(got.label_of(2) == kWheels);
    CHECK(got.label_of(1) == kUnassigned);
  }

  TEST_CASE("random 32x32 instances equal the oracle, including label conflicts") {
    std::mt19937 rng(2024);
    std::uniform_int_distribution<int> count(1, 5);
    std::uniform_real_distribution<double> flip(0.0, 0.35);
    for (int trial = 0; trial < 200; ++trial) {
      const MaterialIndexMap m = oracle::random_index_map(rng, 32, 32, count(rng));
      const Mask a = oracle::noisy_support(rng, m, 0, flip(rng));
      const Mask b = oracle::noisy_support(rng, m, trial % 2, flip(rng));
      const auto got = classify_materials({m}, {mask_of(a, kWindows), mask_of(b, kWheels)});
      const auto want = oracle::brute_force_classification(m.indices, {{kWindows, a}, {kWheels, b}}, 0.5);
      REQUIRE(got.entries.size() == want.size());
      for (const auto& [i, label] : want) CHECK(got.label_of(i) == label);
    }
  }

  TEST_CASE("dilated-support mode ignores mask pixels far from the index") {
    // The mask covers index 1 plus a distant block; whole-mask IOU is low,
    // dilated-support IOU is 1.
    const MaterialIndexMap m = index_map_from({"11......", "11......", "........", "........"});
    const SegmentationMask mask = mask_from({"##....##", "##....##", "......##", "......##"}, kWindows);
    CHECK(classify_materials({m}, {mask}).label_of(1) == kUnassigned);
    ClassifyOptions opt;
    opt.mode = IouMode::DilatedSupport;
    const auto a = classify_materials({m}, {mask}, opt);
    CHECK(a.label_of(1) == kWindows);
    CHECK(a.entries.at(1).iou == 1.0);
  }

  TEST_CASE("the most confident view decides; union mode accepts any view") {
    const MaterialIndexMap v0 = index_map_from({"11..", "...."});
    MaterialIndexMap v1 = index_map_from({"11..", "...."});
    v1.view_index = 1;
    const auto poor = mask_from({"....", "####"}, kWheels, 0.9, 0);
    const auto good = mask_from({"##..", "...."}, kWheels, 0.6, 1);
    CHECK(classify_materials({v0, v1}, {poor, good}).label_of(1) == kUnassigned);
    ClassifyOptions opt;
    opt.union_views = true;
    CHECK(classify_materials({v0, v1}, {poor, good}, opt).label_of(1) == kWheels);
  }

  TEST_CASE("a mask without its view is an error") {
    const MaterialIndexMap m = index_map_from({"11", ".."});
    CHECK_THROWS_AS(classify_materials({m}, {mask_from({"##", ".."}, kWindows, 1.0, 3)}), ValidationError);
    CHECK_THROWS_AS(classify_materials({m}, {mask_from({"###", "..."}, kWindows)}), DimensionError);
  }
}

TEST_SUITE("assign_car_body") {
  TEST_CASE("single unassigned index becomes body") {
    const MaterialIndexMap m = index_map_from({"0011"});
    PartAssignment a = classify_materials({m}, {mask_from({"##.."}, kWindows)});
    const PartAssignment b = assign_car_body(a, m);
    CHECK(b.label_of(0) == kWindows);
    CHECK(b.label_of(1) == kBody);
    CHECK(b.entries.at(1).source == AssignmentSource::BodyRule);
  }

  TEST_CASE("largest unassigned area wins") {
    MaterialIndexMap m;
    m.indices = Image<int>(40, 20, kBackgroundIndex);
    int placed2 = 0, placed5 = 0;
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 40; ++x) {
        if (placed2 < 500) {
          m.indices.at(x, y) = 2;
          ++placed2;
        } else if (placed5 < 120) {
          m.indices.at(x, y) = 5;
          ++placed5;
        }
      }
    const PartAssignment b = assign_car_body(PartAssignment{}, m);
    CHECK(b.label_of(2) == kBody);
    CHECK(b.label_of(5) == kUnassigned);
  }

  TEST_CASE("area ties go to the lower index and assigned indices are kept") {
    const MaterialIndexMap m = index_map_from({"331144"});
    PartAssignment a;
    a.entries[1] = PartEntry{kWheels, AssignmentSource::Iou, 1.0};
    a.entries[3] = PartEntry{};
    a.entries[4] = PartEntry{};
    const PartAssignment b = assign_car_body(a, m);
    CHECK(b.label_of(1) == kWheels);
    CHECK(b.label_of(3) == kBody);
    CHECK(b.label_of(4) == kUnassigned);
  }

  TEST_CASE("nothing unassigned leaves the assignment unchanged with a warning") {
    const MaterialIndexMap m = index_map_from({"0011"});
    PartAssignment a;
    a.entries[0] = PartEntry{kWindows, AssignmentSource::Iou, 1.0};
    a.entries[1] = PartEntry{kWheels, AssignmentSource::Iou, 1.0};
    const PartAssignment b = assign_car_body(a, m);
    CHECK(b.label_of(0) == kWindows);
    CHECK(b.label_of(1) == kWheels);
    CHECK(b.diagnostics.warnings.size() == 1);
  }
}

TEST_SUITE("merge_by_correspondence") {
  TEST_CASE("identical features give every remaining index a hit") {
    std::mt19937 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    FeatureMap f(12, 10, 5);
    for (double& v : f.data) v = u(rng);
    const MaterialIndexMap m = oracle::random_index_map(rng, 12, 10, 3, 4);
    Mask all(12, 10, 1);
    std::set<int> present;
    for (int v : m.indices.pixels)
      if (v != kBackgroundIndex) present.insert(v);
    MergeOptions opt;
    opt.min_hits = 1;
    CHECK(merge_by_correspondence(f, f, all, all, m, opt) == present);
    opt.min_hits = 1000;
    CHECK(merge_by_correspondence(f, f, all, all, m, opt).empty());
  }

  TEST_CASE("hand-enumerated toy: five mutual matches beat one") {
    FeatureMap ref(8, 1, 8), cad(6, 1, 8);
    for (int k = 0; k < 8; ++k) ref.at(k, k, 0) = 1.0;
    for (int k = 0; k < 6; ++k) cad.at(k, k, 0) = 1.0;
    MaterialIndexMap m;
    m.indices = Image<int>(6, 1, 2);
    m.indices.at(5, 0) = 7;
    MergeOptions opt;
    opt.min_hits = 3;
    CHECK(merge_by_correspondence(ref, cad, Mask(8, 1, 1), Mask(6, 1, 1), m, opt) == std::set<int>{2});
    opt.min_hits = 1;
    CHECK(merge_by_correspondence(ref, cad, Mask(8, 1, 1), Mask(6, 1, 1), m, opt) == std::set<int>{2, 7});
  }

  TEST_CASE("empty masks give an empty set; channel mismatch is an error") {
    FeatureMap f(4, 4, 2);
    MaterialIndexMap m;
    m.indices = Image<int>(4, 4, 0);
    CHECK(merge_by_correspondence(f, f, Mask(4, 4, 0), Mask(4, 4, 1), m).empty());
    CHECK_THROWS_AS(merge_by_correspondence(f, FeatureMap(4, 4, 3), Mask(4, 4, 1), Mask(4, 4, 1), m),
                    DimensionError);
  }
}

TEST_SUITE("retrieve_material_prior") {
  TEST_CASE("labels map to the shipped priors") {
    CHECK(retrieve_material_prior(kWindows).outputs().count(OutputSlot::Transmission) == 1);
    CHECK(retrieve_material_prior(kWheels).name() == "wheel");
    CHECK(retrieve_material_prior(kBody, true).name() == "body_painted");
    CHECK(retrieve_material_prior(kBody, false).name() == "body_unpainted");
    CHECK_THROWS_WITH_AS(retrieve_material_prior("spoiler"), doctest::Contains("windows"), ValidationError);
  }

  TEST_CASE("returned graphs are independent copies") {
    MaterialGraph a = retrieve_material_prior(kWheels);
    a.set_parameters(std::vector<double>(a.parameter_count(), 0.01));
    CHECK(retrieve_material_prior(kWheels).parameters() != a.parameters());
  }
}

TEST_SUITE("builtin_features") {
  TEST_CASE("constant image: band-pass channels vanish, luminance is constant") {
    const FeatureMap f = builtin_features(ImageRGB(9, 7, Vec3(0.2, 0.4, 0.6)));
    CHECK(f.channels == kFeatureChannels);
    const double lum = luminance(Vec3(0.2, 0.4, 0.6));
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) {
        CHECK(f.at(0, x, y) == doctest::Approx(lum).epsilon(1e-15));
        for (int c = 1; c < kFeatureChannels; ++c) CHECK(std::abs(f.at(c, x, y)) < 1e-12);
      }
  }

  TEST_CASE("whole-pixel translation translates features away from borders") {
    std::mt19937 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    const int w = 64, h = 64, dx = 3, dy = 2;
    ImageRGB a(w, h), b(w, h);
    for (auto& p : a.pixels) p = Vec3(u(rng), u(rng), u(rng));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) b.at(x, y) = a.at(std::clamp(x - dx, 0, w - 1), std::clamp(y - dy, 0, h - 1));
    const FeatureMap fa = builtin_features(a), fb = builtin_features(b);
    const int border = 20;  // blur radius 12 plus offset 4, plus the shift
    double worst = 0;
    for (int c = 0; c < kFeatureChannels; ++c)
      for (int y = border; y < h - border; ++y)
        for (int x = border; x < w - border; ++x)
          worst = std::max(worst, std::abs(fb.at(c, x, y) - fa.at(c, x - dx, y - dy)));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("checkerboard equals a direct 2-D convolution") {
    ImageRGB img(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) img.at(x, y) = Vec3::Constant(((x / 4) + (y / 4)) % 2 ? 0.9 : 0.1);
    const FeatureMap f = builtin_features(img);
    ImageF lum(32, 32);
    for (size_t i = 0; i < lum.size(); ++i) lum.pixels[i] = luminance(img.pixels[i]);
    const int dirs[4][2] = {{1, 0}, {1, 1}, {0, 1}, {-1, 1}};
    int c = 1;
    double worst = 0;
    for (int s : {1, 2, 4}) {
      const ImageF b = direct_blur(lum, s);
      for (const auto& d : dirs) {
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x) {
            const double want = b.at(std::clamp(x + d[0] * s, 0, 31), std::clamp(y + d[1] * s, 0, 31)) -
                                b.at(std::clamp(x - d[0] * s, 0, 31), std::clamp(y - d[1] * s, 0, 31));
            worst = std::max(worst, std::abs(f.at(c, x, y) - want));
          }
        ++c;
      }
    }
    CHECK(worst < 1e-12);
  }

  TEST_CASE("adjoint is the transpose") {
    std::mt19937 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    ImageRGB x(21, 17);
    for (auto& p : x.pixels) p = Vec3(u(rng), u(rng), u(rng));
    FeatureMap g(21, 17, kFeatureChannels);
    for (double& v : g.data) v = u(rng);
    const FeatureMap fx = builtin_features(x);
    const ImageRGB at = builtin_features_adjoint(g);
    double lhs = 0, rhs = 0;
    for (size_t i = 0; i < g.data.size(); ++i) lhs += g.data[i] * fx.data[i];
    for (size_t i = 0; i < x.size(); ++i) rhs += at.pixels[i].dot(x.pixels[i]);
    CHECK(std::abs(lhs - rhs) < 1e-9 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_SUITE("retrieval files") {
  TEST_CASE("feature map and mask round trips") {
    const auto dir = test::scratch_dir("retrieval_io");
    FeatureMap f(5, 3, 2);
    for (size_t i = 0; i < f.data.size(); ++i) f.data[i] = 0.25 * double(i) - 1.0;
    write_feature_map((dir / "f.bin").string(), f);
    const FeatureMap g = read_feature_map((dir / "f.bin").string());
    CHECK(g.same_layout(f));
    CHECK(g.data == f.data);

    SegmentationMask m = mask_from({"#..#", ".##."}, kWheels, 0.75, 2);
    write_segmentation_mask((dir / "wheels.png").string(), m);
    const SegmentationMask n = read_segmentation_mask((dir / "wheels.png").string());
    CHECK(n.bits.pixels == m.bits.pixels);
    CHECK(n.label == kWheels);
    CHECK(n.confidence == 0.75);
    CHECK(n.view_index == 2);

    write_text_file((dir / "bad.bin").string(), std::string(13, '\0'));
    CHECK_THROWS_AS(read_feature_map((dir / "bad.bin").string()), LoadError);
  }
}
