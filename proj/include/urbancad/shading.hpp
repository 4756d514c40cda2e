#pragma once

#include "urbancad/envmap.hpp"
#include "urbancad/render.hpp"

#include <functional>

namespace urbancad {

/// GGX microfacet terms; `alpha` is roughness squared.
double ggx_distribution(double n_dot_h, double alpha);
/// Smith height-correlated visibility V = G / (4 n.l n.v).
double smith_visibility(double n_dot_l, double n_dot_v, double alpha);

/// Directional integrals of the GGX lobe split by the Schlick weight
/// s = (1 - v.h)^5:  a = integral of D V (n.l) (1 - s),  b = integral of D V (n.l) s.
/// Tabulated over (n.v, roughness) and interpolated bilinearly.
class SplitSumTable {
 public:
  static const SplitSumTable& instance();
  /// Returns (a, b); `d_mu` receives their derivatives with respect to n.v.
  std::pair<double, double> lookup(double n_dot_v, double roughness, std::pair<double, double>* d_mu = nullptr) const;
  static std::pair<double, double> integrate(double n_dot_v, double roughness, int samples);

 private:
  SplitSumTable();
  static constexpr int kSize = 32;
  std::vector<std::pair<double, double>> table_;
};

struct ShadeOptions {
  bool specular = true;    // false: Lambert only
  int max_env_width = 64;  // environment is box-filtered down to this width first
};

struct ShadedImage {
  ImageRGB radiance;  // linear, zero where uncovered
  ImageF alpha;       // coverage * (1 - transmission)
};

/// Everything the shading of a pixel needs that does not depend on albedo:
/// diffuse irradiance, lobe-weighted mean radiances and the split-sum terms.
struct PixelLighting {
  Vec3 irradiance = Vec3::Zero();
  Vec3 specular_a = Vec3::Zero();
  Vec3 specular_b = Vec3::Zero();
  double a = 0.0;
  double b = 0.0;
};
struct LightingCache {
  int width = 0;
  int height = 0;
  std::vector<PixelLighting> pixels;
};

LightingCache precompute_lighting(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                                  const ShadeOptions& options = {});
ShadedImage shade_cached(const ShadeGrid& pixels, const LightingCache& lighting, const ShadeOptions& options = {});
ShadedImage shade(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                  const ShadeOptions& options = {});

/// d(radiance)/d(albedo) transposed, using a cache built for `pixels`.
ImageRGB shade_albedo_pullback(const ShadeGrid& pixels, const LightingCache& lighting, const ShadeOptions& options,
                               const ImageRGB& d_radiance);

using ShadePullback = std::function<ShadeCotangent(const ImageRGB& d_radiance)>;
struct ShadedWithGrad {
  ShadedImage image;
  ShadePullback pullback;
};
/// Gradients reach albedo; with `normal_gradient` they also reach the world
/// normal. Roughness, transmission and metallic receive none.
ShadedWithGrad shade_with_grad(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                               const ShadeOptions& options = {}, bool normal_gradient = false);

}  // namespace urbancad
