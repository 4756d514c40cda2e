#include "urbancad/envmap.hpp"

#include "urbancad/image_io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>

namespace urbancad {

void EnvironmentMap::validate() const {
  if (radiance.width <= 0 || radiance.width != 2 * radiance.height)
    throw ValidationError("environment map must be W = 2H, got " + std::to_string(radiance.width) + "x" +
                          std::to_string(radiance.height));
  for (const Vec3& p : radiance.pixels)
    for (int k = 0; k < 3; ++k)
      if (!std::isfinite(p[k]) || p[k] < 0.0) throw ValidationError("environment radiance must be finite and >= 0");
}

Vec3 EnvironmentMap::texel_direction(int row, int col) const {
  return orientation * equirect_direction(row, col, width(), height());
}

EquirectPixel equirect_pixel(const Vec3& d, int width, int height) {
  const double theta = std::acos(std::clamp(d.z(), -1.0, 1.0));
  double phi = std::atan2(d.y(), d.x());
  if (phi < 0) phi += 2 * kPi;
  int col = int(std::floor(phi * width / (2 * kPi) + 0.5)) % width;
  int row = std::min(height - 1, int(std::floor(theta / kPi * height)));
  return {row, col};
}

Vec3 equirect_direction(int row, int col, int width, int height) {
  const double theta = (row + 0.5) * kPi / height;
  const double phi = 2 * kPi * col / width;
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

Vec2 equirect_coordinates(const Vec3& d, int width, int height) {
  const double theta = std::acos(std::clamp(d.z(), -1.0, 1.0));
  double phi = std::atan2(d.y(), d.x());
  if (phi < 0) phi += 2 * kPi;
  return {phi * width / (2 * kPi), theta / kPi * height};
}

double equirect_solid_angle(int row, int width, int height) {
  const double t0 = row * kPi / height, t1 = (row + 1) * kPi / height;
  return (std::cos(t0) - std::cos(t1)) * 2 * kPi / width;
}

Vec3 sample_environment(const EnvironmentMap& env, const Vec3& world_direction) {
  const int w = env.width(), h = env.height();
  const Vec2 p = equirect_coordinates(env.orientation.transpose() * world_direction, w, h);
  const double x = p.x(), y = p.y() - 0.5;
  const double x0 = std::floor(x), y0 = std::floor(y);
  const double fx = x - x0, fy = y - y0;
  const auto col = [&](double c) { return ((int(c) % w) + w) % w; };
  const auto row = [&](double r) { return std::clamp(int(r), 0, h - 1); };
  const auto at = [&](double r, double c) { return env.radiance.at(col(c), row(r)); };
  return (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1) + (1 - fx) * fy * at(y0 + 1, x0) +
         fx * fy * at(y0 + 1, x0 + 1);
}

EnvironmentMap uniform_environment(const Vec3& radiance, int width, int height) {
  EnvironmentMap env;
  env.radiance = ImageRGB(width, height, radiance);
  return env;
}

EnvironmentMap downsample_environment(const EnvironmentMap& env, int max_width) {
  if (env.width() <= max_width) return env;
  const int w = max_width, h = max_width / 2;
  EnvironmentMap out;
  out.capture_position = env.capture_position;
  out.orientation = env.orientation;
  out.radiance = ImageRGB(w, h, Vec3::Zero());
  ImageF weight(w, h, 0.0);
  for (int r = 0; r < env.height(); ++r) {
    const double dw = equirect_solid_angle(r, env.width(), env.height());
    const int tr = std::min(h - 1, int(std::floor((r + 0.5) * h / env.height())));
    for (int c = 0; c < env.width(); ++c) {
      const int tc = int(std::floor(double(c) * w / env.width() + 0.5)) % w;
      out.radiance.at(tc, tr) += dw * env.radiance.at(c, r);
      weight.at(tc, tr) += dw;
    }
  }
  for (size_t i = 0; i < out.radiance.size(); ++i)
    if (weight.pixels[i] > 0) out.radiance.pixels[i] /= weight.pixels[i];
  return out;
}

namespace {

std::string sidecar_path(const std::string& pfm_path) {
  return std::filesystem::path(pfm_path).replace_extension(".json").string();
}

}  // namespace

void write_environment(const std::string& pfm_path, const EnvironmentMap& env) {
  write_pfm_rgb(pfm_path, env.radiance);
  nlohmann::ordered_json j;
  j["width"] = env.width();
  j["height"] = env.height();
  j["capture_position"] = {env.capture_position.x(), env.capture_position.y(), env.capture_position.z()};
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({env.orientation(r, 0), env.orientation(r, 1), env.orientation(r, 2)});
  j["orientation"] = rows;
  write_text_file(sidecar_path(pfm_path), j.dump(2) + "\n");
}

EnvironmentMap read_environment(const std::string& pfm_path) {
  EnvironmentMap env;
  env.radiance = read_pfm_rgb(pfm_path);
  const std::string side = sidecar_path(pfm_path);
  if (std::filesystem::exists(side)) {
    try {
      const auto j = nlohmann::json::parse(read_text_file(side));
      const auto& p = j.at("capture_position");
      env.capture_position = Vec3(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
      const auto& o = j.at("orientation");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) env.orientation(r, c) = o.at(size_t(r)).at(size_t(c)).get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(side + ": " + e.what());
    }
  }
  env.validate();
  return env;
}

}  // namespace urbancad
