#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

namespace test {

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// FractalNoise(octaves=3, seed=7) at 64x64, default scale and amplitude.
inline constexpr double kNoiseMean = 0.5156155211739425;
inline constexpr double kNoiseVar = 0.004094562771968902;

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("urbancad_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test
