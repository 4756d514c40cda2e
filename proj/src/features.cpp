#include "urbancad/retrieval.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace urbancad {

namespace {

constexpr std::array<int, 3> kSigmas = {1, 2, 4};
constexpr std::array<std::array<int, 2>, 4> kDirections = {{{1, 0}, {1, 1}, {0, 1}, {-1, 1}}};

std::vector<double> gaussian_kernel(int sigma) {
  const int r = 3 * sigma;
  std::vector<double> k(size_t(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[size_t(i + r)] = std::exp(-0.5 * double(i * i) / double(sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

int clampi(int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); }

// Separable blur with clamped borders, and its transpose.
ImageF blur(const ImageF& in, const std::vector<double>& k) {
  const int r = int(k.size() / 2), w = in.width, h = in.height;
  ImageF tmp(w, h), out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[size_t(i + r)] * in.at(clampi(x + i, w - 1), y);
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[size_t(i + r)] * tmp.at(x, clampi(y + i, h - 1));
      out.at(x, y) = s;
    }
  return out;
}

ImageF blur_adjoint(const ImageF& d_out, const std::vector<double>& k) {
  const int r = int(k.size() / 2), w = d_out.width, h = d_out.height;
  ImageF d_tmp(w, h, 0.0), d_in(w, h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int i = -r; i <= r; ++i) d_tmp.at(x, clampi(y + i, h - 1)) += k[size_t(i + r)] * d_out.at(x, y);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int i = -r; i <= r; ++i) d_in.at(clampi(x + i, w - 1), y) += k[size_t(i + r)] * d_tmp.at(x, y);
  return d_in;
}

}  // namespace

FeatureMap builtin_features(const ImageRGB& image) {
  const int w = image.width, h = image.height;
  FeatureMap f(w, h, kFeatureChannels);
  f.source = FeatureSource::BuiltinFilterBank;
  ImageF lum(w, h);
  for (size_t i = 0; i < lum.size(); ++i) lum.pixels[i] = luminance(image.pixels[i]);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) f.at(0, x, y) = lum.at(x, y);
  int c = 1;
  for (int s : kSigmas) {
    const ImageF b = blur(lum, gaussian_kernel(s));
    for (const auto& d : kDirections) {
      const int ox = d[0] * s, oy = d[1] * s;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          f.at(c, x, y) = b.at(clampi(x + ox, w - 1), clampi(y + oy, h - 1)) -
                          b.at(clampi(x - ox, w - 1), clampi(y - oy, h - 1));
      ++c;
    }
  }
  return f;
}

ImageRGB builtin_features_adjoint(const FeatureMap& cotangent) {
  if (cotangent.channels != kFeatureChannels) throw DimensionError("feature cotangent must have 13 channels");
  const int w = cotangent.width, h = cotangent.height;
  ImageF d_lum(w, h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) d_lum.at(x, y) = cotangent.at(0, x, y);
  int c = 1;
  for (int s : kSigmas) {
    ImageF d_b(w, h, 0.0);
    for (const auto& d : kDirections) {
      const int ox = d[0] * s, oy = d[1] * s;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double g = cotangent.at(c, x, y);
          d_b.at(clampi(x + ox, w - 1), clampi(y + oy, h - 1)) += g;
          d_b.at(clampi(x - ox, w - 1), clampi(y - oy, h - 1)) -= g;
        }
      ++c;
    }
    const ImageF back = blur_adjoint(d_b, gaussian_kernel(s));
    for (size_t i = 0; i < d_lum.size(); ++i) d_lum.pixels[i] += back.pixels[i];
  }
  ImageRGB out(w, h);
  const Vec3 weights(0.2126, 0.7152, 0.0722);
  for (size_t i = 0; i < out.size(); ++i) out.pixels[i] = d_lum.pixels[i] * weights;
  return out;
}

}  // namespace urbancad
