#include "urbancad/noise.hpp"

#include <array>
#include <cmath>

namespace urbancad {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

uint32_t mix32(uint32_t x) {
  x ^= x >> 16;
  x *= 0x7feb352dU;
  x ^= x >> 15;
  x *= 0x846ca68bU;
  x ^= x >> 16;
  return x;
}

template <int Dim>
double lattice_value(const std::array<int64_t, Dim>& cell, uint32_t seed) {
  uint32_t h = mix32(seed ^ 0x9e3779b9U);
  for (int d = 0; d < Dim; ++d) h = mix32(h ^ uint32_t(cell[size_t(d)] * 0x27d4eb2dLL + d * 0x165667b1));
  return double(h >> 8) / double(1U << 24);
}

inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }
inline double fade_derivative(double t) { return 30.0 * t * t * (t - 1.0) * (t - 1.0); }

}  // namespace

template <int Dim>
double value_noise(const double* point, uint32_t seed, double* gradient) {
  std::array<int64_t, Dim> base{};
  std::array<double, Dim> w{}, dw{};
  for (int d = 0; d < Dim; ++d) {
    const double fl = std::floor(point[d]);
    base[size_t(d)] = int64_t(fl);
    const double t = point[d] - fl;
    w[size_t(d)] = fade(t);
    dw[size_t(d)] = fade_derivative(t);
  }
  double value = 0.0;
  std::array<double, Dim> grad{};
  for (int corner = 0; corner < (1 << Dim); ++corner) {
    std::array<int64_t, Dim> cell = base;
    double weight = 1.0;
    std::array<double, Dim> factor{};
    for (int d = 0; d < Dim; ++d) {
      const bool hi = (corner >> d) & 1;
      cell[size_t(d)] += hi ? 1 : 0;
      factor[size_t(d)] = hi ? w[size_t(d)] : 1.0 - w[size_t(d)];
      weight *= factor[size_t(d)];
    }
    const double lv = lattice_value<Dim>(cell, seed);
    value += weight * lv;
    if (gradient) {
      for (int d = 0; d < Dim; ++d) {
        double partial = ((corner >> d) & 1) ? dw[size_t(d)] : -dw[size_t(d)];
        for (int e = 0; e < Dim; ++e)
          if (e != d) partial *= factor[size_t(e)];
        grad[size_t(d)] += partial * lv;
      }
    }
  }
  if (gradient)
    for (int d = 0; d < Dim; ++d) gradient[d] = grad[size_t(d)];
  return value;
}

template double value_noise<2>(const double*, uint32_t, double*);
template double value_noise<4>(const double*, uint32_t, double*);

double fractal_noise(const FractalNoiseSpec& spec, double scale, double u, double v, double* d_scale) {
  double sum = 0.0, d_sum = 0.0, norm = 0.0;
  double amplitude = 1.0, frequency = 1.0;
  for (int o = 0; o < spec.octaves; ++o) {
    const uint32_t octave_seed = spec.seed + uint32_t(o) * 1013U;
    const double f = scale * frequency;
    double n = 0.0, dn_df = 0.0;
    if (spec.tileable) {
      // Circle of circumference f per axis keeps the feature size at 1/f.
      const double r = f / kTwoPi;
      const double cu = std::cos(kTwoPi * u), su = std::sin(kTwoPi * u);
      const double cv = std::cos(kTwoPi * v), sv = std::sin(kTwoPi * v);
      const std::array<double, 4> dir{cu, su, cv, sv};
      std::array<double, 4> p{}, g{};
      for (size_t k = 0; k < 4; ++k) p[k] = r * dir[k] + 17.0 * double(k);
      n = value_noise<4>(p.data(), octave_seed, d_scale ? g.data() : nullptr);
      for (size_t k = 0; k < 4; ++k) dn_df += g[k] * dir[k] / kTwoPi;
    } else {
      const std::array<double, 2> p{f * u, f * v};
      std::array<double, 2> g{};
      n = value_noise<2>(p.data(), octave_seed, d_scale ? g.data() : nullptr);
      dn_df = g[0] * u + g[1] * v;
    }
    sum += amplitude * n;
    d_sum += amplitude * dn_df * frequency;
    norm += amplitude;
    amplitude *= 0.5;
    frequency *= 2.0;
  }
  if (d_scale) *d_scale = d_sum / norm;
  return sum / norm;
}

}  // namespace urbancad
