#include "urbancad/lighting.hpp"

#include "urbancad/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

namespace urbancad {

using nlohmann::json;
namespace fs = std::filesystem;

void FisheyeImage::validate() const {
  if (pixels.width < 1 || pixels.height < 1) throw ValidationError("fisheye: empty image");
  if (!(fov >= kPi && fov < 2 * kPi)) throw ValidationError("fisheye: field of view must lie in [180, 360) degrees");
  if (!(f > 0) || !std::isfinite(f)) throw ValidationError("fisheye: focal length must be positive");
  if (!(cx >= 0 && cx <= pixels.width && cy >= 0 && cy <= pixels.height))
    throw ValidationError("fisheye: principal point outside the image");
  if ((orientation.transpose() * orientation - Mat3::Identity()).norm() > 1e-6)
    throw ValidationError("fisheye: orientation is not a rotation");
}

std::optional<Vec2> FisheyeImage::project(const Vec3& world_direction) const {
  const Vec3 d = orientation.transpose() * world_direction.normalized();
  const double theta = std::acos(std::clamp(d.z(), -1.0, 1.0));
  if (theta > 0.5 * fov) return std::nullopt;
  const double rho = std::hypot(d.x(), d.y());
  if (rho == 0.0) return Vec2(cx, cy);
  return Vec2(cx + f * theta * d.x() / rho, cy + f * theta * d.y() / rho);
}

Vec3 FisheyeImage::unproject(double px, double py) const {
  const double dx = px - cx, dy = py - cy;
  const double r = std::hypot(dx, dy);
  const double theta = r / f;
  Vec3 d(0, 0, 1);
  if (r > 0) d = Vec3(std::sin(theta) * dx / r, std::sin(theta) * dy / r, std::cos(theta));
  return orientation * d;
}

Vec3 FisheyeImage::sample(double px, double py) const {
  const int w = pixels.width, h = pixels.height;
  const double x = std::clamp(px - 0.5, 0.0, double(w - 1)), y = std::clamp(py - 0.5, 0.0, double(h - 1));
  const int x0 = std::min(int(x), w - 1), y0 = std::min(int(y), h - 1);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * pixels.at(x0, y0) + fx * pixels.at(x1, y0)) +
         fy * ((1 - fx) * pixels.at(x0, y1) + fx * pixels.at(x1, y1));
}

FisheyeImage read_fisheye(const std::string& png_path) {
  FisheyeImage fe;
  fe.pixels = read_png_rgb(png_path);
  const std::string side = fs::path(png_path).replace_extension(".json").string();
  json j;
  try {
    j = json::parse(read_text_file(side));
    fe.fov = j.at("fov_deg").get<double>() * kPi / 180.0;
    fe.f = j.at("f").get<double>();
    fe.cx = j.at("cx").get<double>();
    fe.cy = j.at("cy").get<double>();
    const auto q = j.at("orientation").get<std::vector<double>>();
    if (q.size() != 4) throw ValidationError(side + ": orientation must be a quaternion [w, x, y, z]");
    fe.orientation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized().toRotationMatrix();
    const auto p = j.at("position").get<std::vector<double>>();
    if (p.size() != 3) throw ValidationError(side + ": position must have three entries");
    fe.position = Vec3(p[0], p[1], p[2]);
  } catch (const json::exception& e) {
    throw LoadError(side + ": " + e.what());
  }
  fe.validate();
  return fe;
}

void write_fisheye(const std::string& png_path, const FisheyeImage& image) {
  write_png_rgb(png_path, image.pixels);
  const Eigen::Quaterniond q(image.orientation);
  json j;
  j["fov_deg"] = image.fov * 180.0 / kPi;
  j["f"] = image.f;
  j["cx"] = image.cx;
  j["cy"] = image.cy;
  j["orientation"] = {q.w(), q.x(), q.y(), q.z()};
  j["position"] = {image.position.x(), image.position.y(), image.position.z()};
  write_text_file(fs::path(png_path).replace_extension(".json").string(), j.dump(2) + "\n");
}

Mat3 fisheye_orientation(const Vec3& axis) {
  const Vec3 z = axis.normalized();
  Vec3 down(0, 0, -1);
  if (std::abs(z.dot(down)) > 0.999) down = Vec3(1, 0, 0);
  const Vec3 y = (down - down.dot(z) * z).normalized();
  const Vec3 x = y.cross(z);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

FisheyeImage fisheye_from_panorama(const Panorama& source, const Mat3& orientation, const Vec3& position, double fov,
                                   int size) {
  FisheyeImage fe;
  fe.fov = fov;
  fe.cx = fe.cy = 0.5 * size;
  fe.f = 0.5 * size / (0.5 * fov);
  fe.orientation = orientation;
  fe.position = position;
  fe.pixels = ImageRGB(size, size, Vec3::Zero());
  EnvironmentMap env;
  env.radiance = source.pixels;
  parallel_for(size, [&](int y) {
    for (int x = 0; x < size; ++x) {
      const double r = std::hypot(x + 0.5 - fe.cx, y + 0.5 - fe.cy);
      if (r / fe.f > 0.5 * fov + 1.0 / fe.f) continue;  // keep one ring past the circle for interpolation
      fe.pixels.at(x, y) = sample_environment(env, fe.unproject(x + 0.5, y + 0.5));
    }
  });
  fe.validate();
  return fe;
}

Panorama stitch_panorama(const FisheyeImage& left, const FisheyeImage& right, int height) {
  left.validate();
  right.validate();
  if (height < 2) throw ValidationError("stitch_panorama: height must be at least 2");
  const int width = 2 * height;
  Panorama out;
  out.pixels = ImageRGB(width, height, Vec3::Zero());
  out.capture_position = 0.5 * (left.position + right.position);
  std::vector<double> uncovered(size_t(height), 0.0);
  const FisheyeImage* cams[2] = {&left, &right};
  parallel_for(height, [&](int r) {
    for (int c = 0; c < width; ++c) {
      const Vec3 d = equirect_direction(r, c, width, height);
      Vec3 sum = Vec3::Zero();
      double wsum = 0.0;
      for (const FisheyeImage* cam : cams) {
        const double angle = std::acos(std::clamp(cam->axis().dot(d), -1.0, 1.0));
        const double w = 0.5 * cam->fov - angle;
        if (w <= 0) continue;
        const auto p = cam->project(d);
        sum += w * cam->sample(p->x(), p->y());
        wsum += w;
      }
      if (wsum > 0)
        out.pixels.at(c, r) = sum / wsum;
      else
        uncovered[size_t(r)] += equirect_solid_angle(r, width, height);
    }
  });
  double gap = 0.0;
  for (double g : uncovered) gap += g;
  if (gap > 0) {
    std::ostringstream msg;
    msg << "stitch_panorama: fisheye pair leaves " << gap << " sr uncovered";
    throw ValidationError(msg.str());
  }
  return out;
}

void SkyModelParams::validate() const {
  if (!(gamma > 0) || !std::isfinite(gamma)) throw ValidationError("sky model: gamma must be positive");
  if (!(sun_boost > 1)) throw ValidationError("sky model: sun boost must exceed 1");
  if (!(sun_percentile > 90 && sun_percentile < 100)) throw ValidationError("sky model: percentile must lie in (90, 100)");
}

namespace {

Vec3 linearize(const Vec3& c, double gamma) {
  return Vec3(std::pow(std::max(0.0, c.x()), gamma), std::pow(std::max(0.0, c.y()), gamma),
              std::pow(std::max(0.0, c.z()), gamma));
}

double smoothstep(double e0, double e1, double x) {
  if (x <= e0) return 0.0;
  if (x >= e1) return 1.0;
  const double t = (x - e0) / (e1 - e0);
  return t * t * (3 - 2 * t);
}

double median(std::vector<double> v) {
  const size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ImageRGB ldr_to_hdr_sky(const ImageRGB& sky, const SkyModelParams& params) {
  params.validate();
  ImageRGB out(sky.width, sky.height);
  std::vector<double> lum(sky.size());
  for (size_t i = 0; i < sky.size(); ++i) {
    out.pixels[i] = linearize(sky.pixels[i], params.gamma);
    lum[i] = luminance(out.pixels[i]);
  }
  if (lum.empty()) return out;
  std::vector<double> sorted = lum;
  std::sort(sorted.begin(), sorted.end());
  const double med = median(sorted), mx = sorted.back();
  if (!(mx > 0) || (med > 0 && mx / med < 1.2)) return out;
  // nearest-rank percentile
  const size_t rank = size_t(std::ceil(params.sun_percentile / 100.0 * double(sorted.size())));
  const double t = sorted[std::clamp<size_t>(rank, 1, sorted.size()) - 1];
  for (size_t i = 0; i < sky.size(); ++i) {
    const double w = lum[i] >= mx ? 1.0 : (lum[i] > t ? smoothstep(t, mx, lum[i]) : 0.0);
    out.pixels[i] *= 1.0 + (params.sun_boost - 1.0) * w;
  }
  return out;
}

Mask default_non_sky_mask(const ImageRGB& panorama, const SkyModelParams& params) {
  const int b = params.boundary(panorama.height);
  Mask m(panorama.width, panorama.height, 0);
  for (int y = 0; y < panorama.height; ++y)
    for (int x = 0; x < panorama.width; ++x)
      m.at(x, y) = y >= b || luminance(linearize(panorama.at(x, y), params.gamma)) < params.non_sky_luminance;
  return m;
}

EnvironmentMap compose_envmap(const ImageRGB& hdr_sky, const Panorama& panorama, const Mask* non_sky_mask,
                              const SkyModelParams& params, Diagnostics* diagnostics, double* scale_out) {
  params.validate();
  const int w = panorama.pixels.width, h = panorama.pixels.height;
  if (w != 2 * h) throw DimensionError("compose_envmap: panorama must be twice as wide as high");
  const int b = params.boundary(h);
  if (b < 0 || b > h) throw ValidationError("compose_envmap: boundary row outside the panorama");
  if (hdr_sky.width != w || hdr_sky.height != b)
    throw DimensionError("compose_envmap: HDR sky must cover the rows above the boundary at panorama width");
  const Mask ground = non_sky_mask ? *non_sky_mask : default_non_sky_mask(panorama.pixels, params);
  if (!ground.same_shape(panorama.pixels)) throw DimensionError("compose_envmap: mask resolution differs");

  EnvironmentMap env;
  env.capture_position = panorama.capture_position;
  env.radiance = ImageRGB(w, h);
  ImageRGB linear(w, h);
  for (size_t i = 0; i < linear.size(); ++i) linear.pixels[i] = linearize(panorama.pixels.pixels[i], params.gamma);

  const auto sky_value = [&](int x, int y) { return y < b ? hdr_sky.at(x, y) : linear.at(x, y); };
  std::vector<double> sky_band, ground_band;
  for (int y = std::max(0, b - 4); y < b; ++y)
    for (int x = 0; x < w; ++x)
      if (!ground.at(x, y)) sky_band.push_back(luminance(sky_value(x, y)));
  for (int y = b; y < std::min(h, b + 4); ++y)
    for (int x = 0; x < w; ++x)
      if (ground.at(x, y)) ground_band.push_back(luminance(linear.at(x, y)));

  double scale = 1.0;
  if (sky_band.empty() || ground_band.empty()) {
    if (diagnostics) diagnostics->warn("compose_envmap: empty boundary band; ground left unscaled");
  } else {
    const double ms = median(sky_band), mg = median(ground_band);
    if (mg > 0 && ms > 0)
      scale = ms / mg;
    else if (diagnostics)
      diagnostics->warn("compose_envmap: zero band median; ground left unscaled");
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      env.radiance.at(x, y) = ground.at(x, y) ? Vec3(scale * linear.at(x, y)) : sky_value(x, y);
  if (scale_out) *scale_out = scale;
  env.validate();
  return env;
}

size_t select_envmap_index(const std::vector<EnvironmentMap>& maps, const Vec3& point) {
  if (maps.empty()) throw ValidationError("select_envmap: no environment maps");
  size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < maps.size(); ++i) {
    const double d = (maps[i].capture_position - point).norm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

const EnvironmentMap& select_envmap(const std::vector<EnvironmentMap>& maps, const Vec3& point) {
  return maps[select_envmap_index(maps, point)];
}

double saturation_fraction(const ImageRGB& ldr) {
  if (ldr.size() == 0) return 0.0;
  size_t n = 0;
  for (const Vec3& p : ldr.pixels) n += p.maxCoeff() >= 1.0 - 0.5 / 255.0 ? 1 : 0;
  return double(n) / double(ldr.size());
}

}  // namespace urbancad
