#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace urbancad {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

// Error hierarchy. Every failure surfaced by the library derives from Error so
// callers can catch one type; the subclasses exist for tests and exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class LoadError : public Error {
 public:
  using Error::Error;
};
class IntegrityError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class SchemaError : public Error {
 public:
  using Error::Error;
};
class EvaluationError : public Error {
 public:
  using Error::Error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Collects non-fatal conditions (clamped parameters, empty overlaps, ...).
struct Diagnostics {
  std::vector<std::string> warnings;
  void warn(std::string message) { warnings.push_back(std::move(message)); }
  bool empty() const { return warnings.empty(); }
};

/// Rigid transform x' = rotation * x + translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 apply_direction(const Vec3& d) const { return rotation * d; }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
  RigidTransform operator*(const RigidTransform& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
};

/// Rotation about world +z (up) by `degrees`.
Mat3 rotation_z(double degrees);

/// Row-major planar-free image of `T` values.
template <typename T>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> pixels;

  Image() = default;
  Image(int w, int h, const T& fill = T{}) : width(w), height(h), pixels(size_t(w) * size_t(h), fill) {}

  T& at(int x, int y) { return pixels[size_t(y) * size_t(width) + size_t(x)]; }
  const T& at(int x, int y) const { return pixels[size_t(y) * size_t(width) + size_t(x)]; }
  size_t size() const { return pixels.size(); }
  bool same_shape(int w, int h) const { return width == w && height == h; }
  template <typename U>
  bool same_shape(const Image<U>& other) const {
    return width == other.width && height == other.height;
  }
};

using ImageRGB = Image<Vec3>;
using ImageF = Image<double>;
using Mask = Image<uint8_t>;  // 0 or 1

inline double luminance(const Vec3& c) { return 0.2126 * c.x() + 0.7152 * c.y() + 0.0722 * c.z(); }

inline double clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

/// Number of worker threads used by parallel loops (0 = implementation default).
void set_thread_count(int threads);
int thread_count();

/// Runs fn(i) for i in [0, n). Iterations must write disjoint outputs.
void parallel_for(int n, const std::function<void(int)>& fn);

/// Hex-encoded SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& contents);

/// Shortest decimal representation that round-trips to the same double.
std::string format_double(double value);

}  // namespace urbancad
