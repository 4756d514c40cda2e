#pragma once

#include "urbancad/common.hpp"

#include <string>

namespace urbancad {

// 8-bit PNG. Values are mapped to [0,1] on read; written with round(x*255)
// after clamping.
ImageRGB read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const ImageRGB& image);

// RGBA: color and alpha travel separately in memory.
void read_png_rgba(const std::string& path, ImageRGB& color, ImageF& alpha);
void write_png_rgba(const std::string& path, const ImageRGB& color, const ImageF& alpha);

// Single channel 8-bit; masks are stored as 0/255.
ImageF read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const ImageF& image);
Mask read_png_mask(const std::string& path);
void write_png_mask(const std::string& path, const Mask& mask);

// Portable float map, little-endian (scale -1.0), rows stored bottom-to-top.
ImageRGB read_pfm_rgb(const std::string& path);
void write_pfm_rgb(const std::string& path, const ImageRGB& image);
ImageF read_pfm_gray(const std::string& path);
void write_pfm_gray(const std::string& path, const ImageF& image);

/// Quantizes like an 8-bit round trip would.
inline double quantize8(double v) {
  const double c = clamp01(v);
  return double(int(c * 255.0 + 0.5)) / 255.0;
}

/// Rounds each channel through float32, the precision PFM files store.
ImageRGB to_float_precision(const ImageRGB& image);

}  // namespace urbancad
