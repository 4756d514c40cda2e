#include "test_util.hpp"

#include "urbancad/image_io.hpp"
#include "urbancad/lighting.hpp"

#include <doctest.h>

#include <random>

using namespace urbancad;

namespace {

// Smooth colour field over the sphere, in [0.1, 0.9].
Vec3 smooth_field(const Vec3& d) {
  return Vec3(0.5 + 0.3 * d.x() * d.z() + 0.1 * d.y(), 0.5 + 0.25 * d.y() * d.y() - 0.1 * d.z(),
              0.5 + 0.2 * d.x() - 0.15 * d.y() * d.z());
}

Panorama field_panorama(int h, Vec3 (*field)(const Vec3&)) {
  Panorama p;
  p.pixels = ImageRGB(2 * h, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < 2 * h; ++c) p.pixels.at(c, r) = field(equirect_direction(r, c, 2 * h, h));
  return p;
}

struct Pair {
  FisheyeImage left, right;
};

Pair capture(const Panorama& p, double fov_deg, int size) {
  const double fov = fov_deg * kPi / 180.0;
  return {fisheye_from_panorama(p, fisheye_orientation(Vec3(0, 1, 0)), Vec3(0, 0.1, 0), fov, size),
          fisheye_from_panorama(p, fisheye_orientation(Vec3(0, -1, 0)), Vec3(0, -0.1, 0), fov, size)};
}

double polar_angle_deg(int row, int h) { return (row + 0.5) * 180.0 / h; }

}  // namespace

TEST_CASE("fisheye orientation keeps world up at the top of the image") {
  const Mat3 r = fisheye_orientation(Vec3(0, 1, 0));
  CHECK((r.transpose() * r - Mat3::Identity()).norm() < 1e-12);
  CHECK(r.determinant() == doctest::Approx(1.0));
  CHECK((r.col(2) - Vec3(0, 1, 0)).norm() < 1e-12);
  CHECK((r.col(1) - Vec3(0, 0, -1)).norm() < 1e-12);
  CHECK((r.col(0) - Vec3(1, 0, 0)).norm() < 1e-12);
  const Mat3 l = fisheye_orientation(Vec3(0, -1, 0));
  CHECK((l.col(0) - Vec3(-1, 0, 0)).norm() < 1e-12);
}

TEST_CASE("fisheye projection inverts unprojection inside the field of view") {
  FisheyeImage fe;
  fe.pixels = ImageRGB(200, 200);
  fe.fov = 200.0 * kPi / 180.0;
  fe.cx = fe.cy = 100;
  fe.f = 100 / (0.5 * fe.fov);
  fe.orientation = fisheye_orientation(Vec3(1, 1, 0.3).normalized());
  std::mt19937 rng(5);
  std::normal_distribution<double> n;
  int tested = 0;
  for (int i = 0; i < 500; ++i) {
    const Vec3 d = Vec3(n(rng), n(rng), n(rng)).normalized();
    const auto p = fe.project(d);
    const double angle = std::acos(std::clamp(d.dot(fe.axis()), -1.0, 1.0));
    CHECK(p.has_value() == (angle <= 0.5 * fe.fov));
    if (!p) continue;
    ++tested;
    // radius is f times the angle to the axis
    CHECK(std::hypot(p->x() - fe.cx, p->y() - fe.cy) == doctest::Approx(fe.f * angle).epsilon(1e-9));
    CHECK((fe.unproject(p->x(), p->y()) - d).norm() < 1e-9);
  }
  CHECK(tested > 250);
  const auto c = fe.project(fe.axis());
  REQUIRE(c);
  CHECK(c->x() == doctest::Approx(100));
  CHECK(c->y() == doctest::Approx(100));
}

TEST_CASE("panorama survives a fisheye round trip away from the poles") {
  const int h = 128;
  const Panorama src = field_panorama(h, smooth_field);
  const Pair pair = capture(src, 200, 384);
  const Panorama out = stitch_panorama(pair.left, pair.right, h);
  REQUIRE(out.pixels.same_shape(src.pixels));
  CHECK((out.capture_position - Vec3::Zero()).norm() < 1e-12);
  double worst = 0;
  for (int r = 0; r < h; ++r) {
    const double theta = polar_angle_deg(r, h);
    if (theta < 5 || theta > 175) continue;
    for (int c = 0; c < 2 * h; ++c)
      worst = std::max(worst, (out.pixels.at(c, r) - src.pixels.at(c, r)).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 2.0 / 255.0);
}

TEST_CASE("direction to pixel and back stays within one row") {
  const int h = 128, w = 256;
  std::mt19937 rng(11);
  std::normal_distribution<double> n;
  for (int i = 0; i < 2000; ++i) {
    const Vec3 d = Vec3(n(rng), n(rng), n(rng)).normalized();
    const EquirectPixel p = equirect_pixel(d, w, h);
    const Vec3 back = equirect_direction(p.row, p.col, w, h);
    CHECK(std::acos(std::clamp(back.dot(d), -1.0, 1.0)) < kPi / h);
  }
}

TEST_CASE("red and blue hemispheres land on their own side") {
  const int h = 64;
  const Panorama src = field_panorama(h, [](const Vec3& d) { return d.y() > 0 ? Vec3(1, 0, 0) : Vec3(0, 0, 1); });
  const Pair pair = capture(src, 190, 256);
  const Panorama out = stitch_panorama(pair.left, pair.right, h);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < 2 * h; ++c) {
      const Vec3 d = equirect_direction(r, c, 2 * h, h);
      if (std::abs(d.y()) < 0.2) continue;
      const Vec3 want = d.y() > 0 ? Vec3(1, 0, 0) : Vec3(0, 0, 1);
      CHECK((out.pixels.at(c, r) - want).norm() < 1e-9);
    }
}

TEST_CASE("constant gray stitches to the same gray") {
  const int h = 32;
  const Panorama src = field_panorama(h, [](const Vec3&) { return Vec3(0.37, 0.37, 0.37); });
  const Pair pair = capture(src, 190, 96);
  const Panorama out = stitch_panorama(pair.left, pair.right, h);
  for (const Vec3& p : out.pixels.pixels) CHECK((p - Vec3::Constant(0.37)).norm() < 1e-12);
}

TEST_CASE("a coverage gap is reported") {
  const Panorama src = field_panorama(16, smooth_field);
  const Pair exact = capture(src, 180, 48);
  CHECK_THROWS_AS(stitch_panorama(exact.left, exact.right, 16), ValidationError);
  const Pair wide = capture(src, 200, 48);
  CHECK_THROWS_AS(stitch_panorama(wide.left, wide.left, 16), ValidationError);
  try {
    stitch_panorama(wide.left, wide.left, 16);
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("sr uncovered") != std::string::npos);
  }
  CHECK_THROWS_AS(stitch_panorama(wide.left, wide.right, 1), ValidationError);
  FisheyeImage bad = wide.left;
  bad.fov = 1.0;
  CHECK_THROWS_AS(stitch_panorama(bad, wide.right, 16), ValidationError);
}

TEST_CASE("fisheye sidecar round trip") {
  const auto dir = test::scratch_dir("fisheye_io");
  const Pair pair = capture(field_panorama(16, smooth_field), 200, 32);
  const std::string path = (dir / "left.png").string();
  write_fisheye(path, pair.left);
  const FisheyeImage back = read_fisheye(path);
  CHECK(back.fov == doctest::Approx(pair.left.fov).epsilon(1e-12));
  CHECK(back.f == doctest::Approx(pair.left.f).epsilon(1e-12));
  CHECK(back.cx == pair.left.cx);
  CHECK((back.orientation - pair.left.orientation).norm() < 1e-9);
  CHECK((back.position - pair.left.position).norm() < 1e-12);
  for (size_t i = 0; i < back.pixels.size(); ++i)
    CHECK((back.pixels.pixels[i] - pair.left.pixels.pixels[i]).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
  write_text_file((dir / "left.json").string(), "{\"fov_deg\": 200}");
  CHECK_THROWS_AS(read_fisheye(path), LoadError);
}

TEST_CASE("flat sky is only linearized") {
  ImageRGB sky(8, 4, Vec3(0.5, 0.6, 0.7));
  sky.at(3, 1) = Vec3(0.52, 0.62, 0.72);
  const ImageRGB hdr = ldr_to_hdr_sky(sky);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) CHECK(hdr.at(x, y)[c] == doctest::Approx(std::pow(sky.at(x, y)[c], 2.2)));
}

TEST_CASE("sun pixels are boosted and the rest of the sky is not") {
  ImageRGB sky(40, 10, Vec3(0.4, 0.5, 0.8));
  sky.at(20, 3) = Vec3(1, 1, 1);
  SkyModelParams params;
  const ImageRGB hdr = ldr_to_hdr_sky(sky, params);
  CHECK(hdr.at(20, 3).x() == doctest::Approx(params.sun_boost));
  CHECK(hdr.at(0, 0).x() == doctest::Approx(std::pow(0.4, 2.2)));
  CHECK(hdr.at(39, 9).z() == doctest::Approx(std::pow(0.8, 2.2)));
}

TEST_CASE("sky linearization preserves luminance order") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  ImageRGB sky(32, 16);
  for (Vec3& p : sky.pixels) p = Vec3::Constant(u(rng));
  for (int i = 0; i < 5; ++i) sky.pixels[size_t(i)] = Vec3::Constant(0.98 + 0.004 * i);
  const ImageRGB hdr = ldr_to_hdr_sky(sky);
  for (size_t i = 0; i < sky.size(); ++i)
    for (size_t j = 0; j < sky.size(); ++j)
      if (luminance(sky.pixels[i]) < luminance(sky.pixels[j])) CHECK(luminance(hdr.pixels[i]) <= luminance(hdr.pixels[j]));
}

TEST_CASE("compose matches the sky and ground band medians") {
  const int h = 16, w = 32;
  Panorama pano;
  pano.capture_position = Vec3(1, 2, 3);
  pano.pixels = ImageRGB(w, h, Vec3::Constant(0.3));
  for (int y = h / 2; y < h; ++y)
    for (int x = 0; x < w; ++x) pano.pixels.at(x, y) = Vec3::Constant(0.2 + 0.01 * (x % 5));
  ImageRGB sky(w, h / 2, Vec3(2, 2, 2));
  Diagnostics diag;
  double scale = 0;
  const EnvironmentMap env = compose_envmap(sky, pano, nullptr, {}, &diag, &scale);
  CHECK(diag.empty());
  CHECK((env.capture_position - pano.capture_position).norm() == 0);
  CHECK(env.radiance.at(5, 2).x() == 2.0);
  std::vector<double> ground;
  for (int y = h / 2; y < h / 2 + 4; ++y)
    for (int x = 0; x < w; ++x) ground.push_back(luminance(env.radiance.at(x, y)));
  std::sort(ground.begin(), ground.end());
  CHECK(0.5 * (ground[ground.size() / 2 - 1] + ground[ground.size() / 2]) == doctest::Approx(2.0));
  CHECK(scale == doctest::Approx(2.0 / std::pow(0.22, 2.2)));
}

TEST_CASE("compose uses the given mask and falls back to unit scale") {
  const int h = 8, w = 16;
  Panorama pano;
  pano.pixels = ImageRGB(w, h, Vec3::Constant(0.5));
  ImageRGB sky(w, h / 2, Vec3(1, 1, 1));
  Mask all_sky(w, h, 0);
  Diagnostics diag;
  double scale = 0;
  const EnvironmentMap env = compose_envmap(sky, pano, &all_sky, {}, &diag, &scale);
  CHECK(scale == 1.0);
  CHECK_FALSE(diag.empty());
  CHECK(env.radiance.at(0, h - 1).x() == doctest::Approx(std::pow(0.5, 2.2)));
  Mask tree(w, h, 0);
  for (int y = h / 2; y < h; ++y)
    for (int x = 0; x < w; ++x) tree.at(x, y) = 1;
  tree.at(3, 1) = 1;
  const EnvironmentMap env2 = compose_envmap(sky, pano, &tree, {}, nullptr, &scale);
  CHECK(env2.radiance.at(3, 1).x() == doctest::Approx(1.0));
  CHECK(env2.radiance.at(4, 1).x() == 1.0);
  CHECK_THROWS_AS(compose_envmap(ImageRGB(w, 3), pano), DimensionError);
  Panorama square;
  square.pixels = ImageRGB(8, 8);
  CHECK_THROWS_AS(compose_envmap(sky, square), DimensionError);
}

TEST_CASE("dark sky-row pixels count as ground") {
  ImageRGB pano(8, 4, Vec3::Constant(0.8));
  pano.at(2, 0) = Vec3::Constant(0.05);
  const Mask m = default_non_sky_mask(pano);
  CHECK(m.at(2, 0) == 1);
  CHECK(m.at(3, 0) == 0);
  CHECK(m.at(3, 2) == 1);
}

TEST_CASE("envmap selection equals an exhaustive scan") {
  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(-20, 20);
  std::uniform_int_distribution<int> count(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EnvironmentMap> maps(size_t(count(rng)));
    for (auto& m : maps) {
      m = uniform_environment(Vec3::Ones(), 4, 2);
      m.capture_position = Vec3(u(rng), u(rng), 1.5);
    }
    if (maps.size() > 2) maps[2].capture_position = maps[0].capture_position;
    const Vec3 p(u(rng), u(rng), 0);
    size_t want = 0;
    for (size_t i = 1; i < maps.size(); ++i)
      if ((maps[i].capture_position - p).squaredNorm() < (maps[want].capture_position - p).squaredNorm()) want = i;
    CHECK(select_envmap_index(maps, p) == want);
    CHECK(&select_envmap(maps, p) == &maps[want]);
  }
  CHECK_THROWS_AS(select_envmap_index({}, Vec3::Zero()), ValidationError);
}

TEST_CASE("saturation fraction counts top-code pixels") {
  ImageRGB img(4, 1, Vec3::Constant(0.5));
  img.at(0, 0) = Vec3(1, 0, 0);
  img.at(1, 0) = Vec3(0, 254.0 / 255.0, 0);
  CHECK(saturation_fraction(img) == 0.25);
  CHECK(saturation_fraction(ImageRGB()) == 0.0);
}
