#pragma once

#include <cstdint>

namespace urbancad {

/// Lattice value noise in `Dim` dimensions (2 or 4) with quintic fade, so the
/// field is C2 in position. Returns a value in [0,1]; when `gradient` is non-null
/// it receives d(value)/d(point).
template <int Dim>
double value_noise(const double* point, uint32_t seed, double* gradient);

/// Fractal sum of value noise. Octave o samples at frequency `scale * 2^o` with
/// weight 2^-o; the sum is normalized back to [0,1].
///
/// Tileable noise wraps (u, v) onto a torus embedded in 4D so the field is
/// exactly periodic in u and v for any continuous scale.
struct FractalNoiseSpec {
  int octaves = 3;
  uint32_t seed = 0;
  bool tileable = true;
};

/// Value and derivative with respect to `scale` at texture coordinate (u, v).
double fractal_noise(const FractalNoiseSpec& spec, double scale, double u, double v, double* d_scale);

}  // namespace urbancad
