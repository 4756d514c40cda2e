#include "urbancad/shading.hpp"

#include <cmath>
#include <memory>

namespace urbancad {

namespace {

constexpr double kMinCosView = 1e-4;

double radical_inverse(uint32_t bits) {
  bits = (bits << 16u) | (bits >> 16u);
  bits = ((bits & 0x55555555u) << 1u) | ((bits & 0xAAAAAAAAu) >> 1u);
  bits = ((bits & 0x33333333u) << 2u) | ((bits & 0xCCCCCCCCu) >> 2u);
  bits = ((bits & 0x0F0F0F0Fu) << 4u) | ((bits & 0xF0F0F0F0u) >> 4u);
  bits = ((bits & 0x00FF00FFu) << 8u) | ((bits & 0xFF00FF00u) >> 8u);
  return double(bits) * 2.3283064365386963e-10;
}

inline double pow5(double x) {
  const double x2 = x * x;
  return x2 * x2 * x;
}

}  // namespace

double ggx_distribution(double n_dot_h, double alpha) {
  const double a2 = alpha * alpha;
  const double q = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
  return a2 / (kPi * q * q);
}

double smith_visibility(double n_dot_l, double n_dot_v, double alpha) {
  const double a2 = alpha * alpha;
  const double lv = n_dot_l * std::sqrt(n_dot_v * n_dot_v * (1.0 - a2) + a2);
  const double ll = n_dot_v * std::sqrt(n_dot_l * n_dot_l * (1.0 - a2) + a2);
  return 0.5 / (lv + ll);
}

std::pair<double, double> SplitSumTable::integrate(double mu, double roughness, int samples) {
  const double alpha = roughness * roughness;
  const Vec3 v(std::sqrt(std::max(0.0, 1.0 - mu * mu)), 0.0, mu);
  double a = 0.0, b = 0.0;
  for (int i = 0; i < samples; ++i) {
    const double u1 = (i + 0.5) / samples, u2 = radical_inverse(uint32_t(i));
    const double phi = 2.0 * kPi * u1;
    const double cos_t = std::sqrt((1.0 - u2) / (1.0 + (alpha * alpha - 1.0) * u2));
    const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
    const Vec3 h(sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t);
    const double vh = v.dot(h);
    const Vec3 l = 2.0 * vh * h - v;
    if (l.z() <= 0.0 || vh <= 0.0) continue;
    // D V (n.l) / pdf(l), with pdf(l) = D (n.h) / (4 v.h).
    const double g = smith_visibility(l.z(), mu, alpha) * l.z() * 4.0 * vh / h.z();
    const double s = pow5(1.0 - vh);
    a += g * (1.0 - s);
    b += g * s;
  }
  return {a / samples, b / samples};
}

SplitSumTable::SplitSumTable() : table_(size_t(kSize * kSize)) {
  for (int i = 0; i < kSize; ++i)
    for (int j = 0; j < kSize; ++j) {
      const double mu = std::max(kMinCosView, double(i) / (kSize - 1));
      const double r = std::max(0.01, double(j) / (kSize - 1));
      table_[size_t(i * kSize + j)] = integrate(mu, r, 4096);
    }
}

const SplitSumTable& SplitSumTable::instance() {
  static const SplitSumTable table;
  return table;
}

std::pair<double, double> SplitSumTable::lookup(double mu, double roughness, std::pair<double, double>* d_mu) const {
  const double x = std::clamp(mu, 0.0, 1.0) * (kSize - 1);
  const double y = std::clamp(roughness, 0.0, 1.0) * (kSize - 1);
  const int i0 = std::min(int(x), kSize - 2), j0 = std::min(int(y), kSize - 2);
  const double fx = x - i0, fy = y - j0;
  const auto at = [&](int i, int j) { return table_[size_t(i * kSize + j)]; };
  const auto row = [&](int i) {
    const auto p = at(i, j0), q = at(i, j0 + 1);
    return std::pair<double, double>{p.first + fy * (q.first - p.first), p.second + fy * (q.second - p.second)};
  };
  const auto r0 = row(i0), r1 = row(i0 + 1);
  if (d_mu) *d_mu = {(r1.first - r0.first) * (kSize - 1), (r1.second - r0.second) * (kSize - 1)};
  return {r0.first + fx * (r1.first - r0.first), r0.second + fx * (r1.second - r0.second)};
}

namespace {

struct EnvTexel {
  Vec3 direction;
  Vec3 radiance;
  double solid_angle;
};

std::vector<EnvTexel> env_texels(const EnvironmentMap& env, const ShadeOptions& options) {
  env.validate();
  const EnvironmentMap small = downsample_environment(env, options.max_env_width);
  std::vector<EnvTexel> out;
  out.reserve(small.radiance.size());
  for (int r = 0; r < small.height(); ++r) {
    const double dw = equirect_solid_angle(r, small.width(), small.height());
    for (int c = 0; c < small.width(); ++c) {
      const Vec3& L = small.radiance.at(c, r);
      if (L.isZero()) continue;
      out.push_back({small.texel_direction(r, c), L, dw});
    }
  }
  return out;
}

// Shading normal facing the viewer, its sign, and the clamped n.v.
struct ViewGeometry {
  Vec3 n;
  Vec3 v;
  double sign;
  double mu;
  bool mu_clamped;
};

ViewGeometry view_geometry(const ShadePixel& p, const CameraModel& camera, int x, int y) {
  ViewGeometry g;
  g.v = -camera.ray_direction(x + 0.5, y + 0.5);
  g.sign = p.normal.dot(g.v) < 0.0 ? -1.0 : 1.0;
  g.n = g.sign * p.normal;
  const double raw = g.n.dot(g.v);
  g.mu_clamped = raw < kMinCosView;
  g.mu = g.mu_clamped ? kMinCosView : raw;
  return g;
}

PixelLighting light_pixel(const ShadePixel& p, const ViewGeometry& g, const std::vector<EnvTexel>& texels,
                          bool specular) {
  PixelLighting out;
  const double alpha = p.roughness * p.roughness;
  double wa = 0.0, wb = 0.0;
  Vec3 sa = Vec3::Zero(), sb = Vec3::Zero();
  for (const EnvTexel& t : texels) {
    const double c = g.n.dot(t.direction);
    if (c <= 0.0) continue;
    out.irradiance += (c * t.solid_angle) * t.radiance;
    if (!specular) continue;
    const Vec3 h = (t.direction + g.v).normalized();
    const double w = ggx_distribution(g.n.dot(h), alpha) * smith_visibility(c, g.mu, alpha) * c * t.solid_angle;
    const double s = pow5(1.0 - std::max(0.0, g.v.dot(h)));
    wa += w * (1.0 - s);
    wb += w * s;
    sa += (w * (1.0 - s)) * t.radiance;
    sb += (w * s) * t.radiance;
  }
  if (specular) {
    if (wa > 0) out.specular_a = sa / wa;
    if (wb > 0) out.specular_b = sb / wb;
    std::tie(out.a, out.b) = SplitSumTable::instance().lookup(g.mu, p.roughness);
  }
  return out;
}

Vec3 shade_pixel(const ShadePixel& p, const PixelLighting& l, bool specular) {
  const Vec3 kd = p.albedo * ((1.0 - p.metallic) / kPi);
  const double diffuse_scale = 1.0 - p.transmission;
  if (!specular) return diffuse_scale * kd.cwiseProduct(l.irradiance);
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    const double f0 = 0.04 * (1.0 - p.metallic) + p.albedo[c] * p.metallic;
    const double e_spec = f0 * l.a + l.b;
    out[c] = diffuse_scale * kd[c] * (1.0 - e_spec) * l.irradiance[c] + f0 * l.a * l.specular_a[c] +
             l.b * l.specular_b[c];
  }
  return out;
}

Vec3 albedo_derivative(const ShadePixel& p, const PixelLighting& l, bool specular) {
  const double m = p.metallic, diffuse_scale = 1.0 - p.transmission;
  if (!specular) return (diffuse_scale * (1.0 - m) / kPi) * l.irradiance;
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    const double f0 = 0.04 * (1.0 - m) + p.albedo[c] * m;
    const double e_spec = f0 * l.a + l.b;
    out[c] = diffuse_scale * (1.0 - m) / kPi * ((1.0 - e_spec) - p.albedo[c] * m * l.a) * l.irradiance[c] +
             m * l.a * l.specular_a[c];
  }
  return out;
}

// d(radiance)/d(n) for one pixel as a 3x3 Jacobian (row = channel), with
// respect to the unflipped world normal.
Mat3 normal_jacobian(const ShadePixel& p, const ViewGeometry& g, const std::vector<EnvTexel>& texels, bool specular) {
  const double alpha = p.roughness * p.roughness, a2 = alpha * alpha;
  Mat3 d_irr = Mat3::Zero();  // row c: d irradiance_c / dn
  double wa = 0.0, wb = 0.0;
  Vec3 sa = Vec3::Zero(), sb = Vec3::Zero();
  Vec3 d_wa = Vec3::Zero(), d_wb = Vec3::Zero();
  Mat3 d_sa = Mat3::Zero(), d_sb = Mat3::Zero();
  const double lam_v = std::sqrt(g.mu * g.mu * (1.0 - a2) + a2);
  for (const EnvTexel& t : texels) {
    const double c = g.n.dot(t.direction);
    if (c <= 0.0) continue;
    d_irr += t.radiance * (t.solid_angle * t.direction.transpose());
    if (!specular) continue;
    const Vec3 h = (t.direction + g.v).normalized();
    const double nh = g.n.dot(h);
    const double q = nh * nh * (a2 - 1.0) + 1.0;
    const double D = a2 / (kPi * q * q);
    const double dD = -4.0 * a2 * nh * (a2 - 1.0) / (kPi * q * q * q);
    const double lam_l = std::sqrt(c * c * (1.0 - a2) + a2);
    const double S = c * lam_v + g.mu * lam_l;
    const double vis = 0.5 / S;
    const double dS_dc = lam_v + g.mu * c * (1.0 - a2) / lam_l;
    const double dS_dmu = g.mu_clamped ? 0.0 : c * g.mu * (1.0 - a2) / lam_v + lam_l;
    const double dvis_dc = -0.5 / (S * S) * dS_dc, dvis_dmu = -0.5 / (S * S) * dS_dmu;
    const double w = D * vis * c * t.solid_angle;
    const Vec3 dw = t.solid_angle * (dD * vis * c * h + D * c * (dvis_dc * t.direction + dvis_dmu * g.v) +
                                     D * vis * t.direction);
    const double s = pow5(1.0 - std::max(0.0, g.v.dot(h)));
    wa += w * (1.0 - s);
    wb += w * s;
    sa += (w * (1.0 - s)) * t.radiance;
    sb += (w * s) * t.radiance;
    d_wa += (1.0 - s) * dw;
    d_wb += s * dw;
    d_sa += ((1.0 - s) * t.radiance) * dw.transpose();
    d_sb += (s * t.radiance) * dw.transpose();
  }
  const Vec3 irr = [&] {
    Vec3 e = Vec3::Zero();
    for (const EnvTexel& t : texels) {
      const double c = g.n.dot(t.direction);
      if (c > 0.0) e += (c * t.solid_angle) * t.radiance;
    }
    return e;
  }();
  const double m = p.metallic, diffuse_scale = 1.0 - p.transmission;
  const Vec3 kd = p.albedo * ((1.0 - m) / kPi);
  Mat3 J;
  if (!specular) {
    J = diffuse_scale * kd.asDiagonal() * d_irr;
  } else {
    const Vec3 la = wa > 0 ? Vec3(sa / wa) : Vec3::Zero();
    const Vec3 lb = wb > 0 ? Vec3(sb / wb) : Vec3::Zero();
    Mat3 d_la = Mat3::Zero(), d_lb = Mat3::Zero();
    if (wa > 0) d_la = (d_sa - la * d_wa.transpose()) / wa;
    if (wb > 0) d_lb = (d_sb - lb * d_wb.transpose()) / wb;
    std::pair<double, double> d_mu;
    const auto [a, b] = SplitSumTable::instance().lookup(g.mu, p.roughness, &d_mu);
    const Vec3 dmu_dn = g.mu_clamped ? Vec3::Zero() : g.v;
    const Vec3 da = d_mu.first * dmu_dn, db = d_mu.second * dmu_dn;
    for (int ch = 0; ch < 3; ++ch) {
      const double f0 = 0.04 * (1.0 - m) + p.albedo[ch] * m;
      const double e_spec = f0 * a + b;
      const Eigen::RowVector3d row =
          diffuse_scale * kd[ch] * (-(f0 * da + db).transpose() * irr[ch] + (1.0 - e_spec) * d_irr.row(ch)) +
          f0 * (da.transpose() * la[ch] + a * d_la.row(ch)) + db.transpose() * lb[ch] + b * d_lb.row(ch);
      J.row(ch) = row;
    }
  }
  return g.sign * J;
}

}  // namespace

LightingCache precompute_lighting(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                                  const ShadeOptions& options) {
  const std::vector<EnvTexel> texels = env_texels(env, options);
  LightingCache cache;
  cache.width = pixels.width;
  cache.height = pixels.height;
  cache.pixels.resize(pixels.size());
  parallel_for(pixels.height, [&](int y) {
    for (int x = 0; x < pixels.width; ++x) {
      const ShadePixel& p = pixels.at(x, y);
      if (!p.covered) continue;
      cache.pixels[size_t(y) * size_t(pixels.width) + size_t(x)] =
          light_pixel(p, view_geometry(p, camera, x, y), texels, options.specular);
    }
  });
  return cache;
}

ShadedImage shade_cached(const ShadeGrid& pixels, const LightingCache& lighting, const ShadeOptions& options) {
  if (lighting.width != pixels.width || lighting.height != pixels.height)
    throw DimensionError("lighting cache does not match the pixel grid");
  ShadedImage out{ImageRGB(pixels.width, pixels.height, Vec3::Zero()), ImageF(pixels.width, pixels.height, 0.0)};
  for (size_t i = 0; i < pixels.size(); ++i) {
    const ShadePixel& p = pixels.pixels[i];
    if (!p.covered) continue;
    out.radiance.pixels[i] = shade_pixel(p, lighting.pixels[i], options.specular);
    out.alpha.pixels[i] = 1.0 - p.transmission;
  }
  return out;
}

ShadedImage shade(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                  const ShadeOptions& options) {
  return shade_cached(pixels, precompute_lighting(pixels, env, camera, options), options);
}

ImageRGB shade_albedo_pullback(const ShadeGrid& pixels, const LightingCache& lighting, const ShadeOptions& options,
                               const ImageRGB& d_radiance) {
  ImageRGB out(pixels.width, pixels.height, Vec3::Zero());
  for (size_t i = 0; i < pixels.size(); ++i) {
    const ShadePixel& p = pixels.pixels[i];
    if (!p.covered) continue;
    out.pixels[i] = albedo_derivative(p, lighting.pixels[i], options.specular).cwiseProduct(d_radiance.pixels[i]);
  }
  return out;
}

ShadedWithGrad shade_with_grad(const ShadeGrid& pixels, const EnvironmentMap& env, const CameraModel& camera,
                               const ShadeOptions& options, bool normal_gradient) {
  auto cache = std::make_shared<LightingCache>(precompute_lighting(pixels, env, camera, options));
  ShadedWithGrad out;
  out.image = shade_cached(pixels, *cache, options);
  auto grid = std::make_shared<ShadeGrid>(pixels);
  std::shared_ptr<std::vector<EnvTexel>> texels;
  if (normal_gradient) texels = std::make_shared<std::vector<EnvTexel>>(env_texels(env, options));
  out.pullback = [grid, cache, options, camera, texels](const ImageRGB& d_radiance) {
    ShadeCotangent cot;
    cot.albedo = shade_albedo_pullback(*grid, *cache, options, d_radiance);
    if (texels) {
      cot.normal = ImageRGB(grid->width, grid->height, Vec3::Zero());
      parallel_for(grid->height, [&](int y) {
        for (int x = 0; x < grid->width; ++x) {
          const ShadePixel& p = grid->at(x, y);
          if (!p.covered) continue;
          const Mat3 J = normal_jacobian(p, view_geometry(p, camera, x, y), *texels, options.specular);
          cot.normal.at(x, y) = J.transpose() * d_radiance.at(x, y);
        }
      });
    }
    return cot;
  };
  return out;
}

}  // namespace urbancad
