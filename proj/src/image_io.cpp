#include "urbancad/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace urbancad {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t to_byte(double v) { return uint8_t(int(clamp01(v) * 255.0 + 0.5)); }

// Decodes any PNG into 8-bit RGBA rows.
std::vector<uint8_t> decode_png(const std::string& path, int& width, int& height) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw LoadError("cannot open PNG: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("libpng init failed: " + path);
  }
  std::vector<uint8_t> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("corrupt PNG: " + path);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = int(png_get_image_width(png, info));
  height = int(png_get_image_height(png, info));
  const png_byte color_type = png_get_color_type(png, info);
  const png_byte bit_depth = png_get_bit_depth(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color_type == PNG_COLOR_TYPE_RGB || color_type == PNG_COLOR_TYPE_GRAY ||
      color_type == PNG_COLOR_TYPE_PALETTE)
    png_set_filler(png, 0xFF, PNG_FILLER_AFTER);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  data.resize(size_t(width) * size_t(height) * 4);
  std::vector<png_bytep> rows(static_cast<size_t>(height));
  for (int y = 0; y < height; ++y) rows[size_t(y)] = data.data() + size_t(y) * size_t(width) * 4;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

void encode_png(const std::string& path, int width, int height, int channels,
                const std::vector<uint8_t>& data) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot write PNG: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng init failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encoding failed: " + path);
  }
  png_init_io(png, file.get());
  const int color_type = channels == 1   ? PNG_COLOR_TYPE_GRAY
                         : channels == 3 ? PNG_COLOR_TYPE_RGB
                                         : PNG_COLOR_TYPE_RGBA;
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(data.data() + size_t(y) * size_t(width) * size_t(channels)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PfmData {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> values;  // top-to-bottom rows
};

PfmData read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open PFM: " + path);
  std::string magic;
  PfmData pfm;
  double scale = 0.0;
  in >> magic >> pfm.width >> pfm.height >> scale;
  in.get();
  if (!in || (magic != "PF" && magic != "Pf") || pfm.width <= 0 || pfm.height <= 0)
    throw LoadError("corrupt PFM header: " + path);
  if (scale >= 0.0) throw LoadError("big-endian PFM not supported: " + path);
  pfm.channels = magic == "PF" ? 3 : 1;
  const size_t row = size_t(pfm.width) * size_t(pfm.channels);
  std::vector<float> raw(row * size_t(pfm.height));
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size() * sizeof(float)));
  if (!in) throw LoadError("truncated PFM: " + path);
  pfm.values.resize(raw.size());
  for (int y = 0; y < pfm.height; ++y)
    std::memcpy(pfm.values.data() + size_t(y) * row, raw.data() + size_t(pfm.height - 1 - y) * row,
                row * sizeof(float));
  return pfm;
}

void write_pfm(const std::string& path, const PfmData& pfm) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write PFM: " + path);
  out << (pfm.channels == 3 ? "PF" : "Pf") << "\n" << pfm.width << " " << pfm.height << "\n-1.0\n";
  const size_t row = size_t(pfm.width) * size_t(pfm.channels);
  for (int y = pfm.height - 1; y >= 0; --y)
    out.write(reinterpret_cast<const char*>(pfm.values.data() + size_t(y) * row),
              std::streamsize(row * sizeof(float)));
  if (!out) throw Error("PFM write failed: " + path);
}

}  // namespace

ImageRGB read_png_rgb(const std::string& path) {
  int w = 0, h = 0;
  const auto data = decode_png(path, w, h);
  ImageRGB img(w, h);
  for (size_t i = 0; i < img.size(); ++i)
    img.pixels[i] = Vec3(data[4 * i], data[4 * i + 1], data[4 * i + 2]) / 255.0;
  return img;
}

void write_png_rgb(const std::string& path, const ImageRGB& image) {
  std::vector<uint8_t> data(image.size() * 3);
  for (size_t i = 0; i < image.size(); ++i)
    for (int c = 0; c < 3; ++c) data[3 * i + size_t(c)] = to_byte(image.pixels[i][c]);
  encode_png(path, image.width, image.height, 3, data);
}

void read_png_rgba(const std::string& path, ImageRGB& color, ImageF& alpha) {
  int w = 0, h = 0;
  const auto data = decode_png(path, w, h);
  color = ImageRGB(w, h);
  alpha = ImageF(w, h);
  for (size_t i = 0; i < color.size(); ++i) {
    color.pixels[i] = Vec3(data[4 * i], data[4 * i + 1], data[4 * i + 2]) / 255.0;
    alpha.pixels[i] = data[4 * i + 3] / 255.0;
  }
}

void write_png_rgba(const std::string& path, const ImageRGB& color, const ImageF& alpha) {
  if (!color.same_shape(alpha)) throw DimensionError("RGBA color/alpha size mismatch");
  std::vector<uint8_t> data(color.size() * 4);
  for (size_t i = 0; i < color.size(); ++i) {
    for (int c = 0; c < 3; ++c) data[4 * i + size_t(c)] = to_byte(color.pixels[i][c]);
    data[4 * i + 3] = to_byte(alpha.pixels[i]);
  }
  encode_png(path, color.width, color.height, 4, data);
}

ImageF read_png_gray(const std::string& path) {
  int w = 0, h = 0;
  const auto data = decode_png(path, w, h);
  ImageF img(w, h);
  for (size_t i = 0; i < img.size(); ++i) img.pixels[i] = data[4 * i] / 255.0;
  return img;
}

void write_png_gray(const std::string& path, const ImageF& image) {
  std::vector<uint8_t> data(image.size());
  for (size_t i = 0; i < image.size(); ++i) data[i] = to_byte(image.pixels[i]);
  encode_png(path, image.width, image.height, 1, data);
}

Mask read_png_mask(const std::string& path) {
  int w = 0, h = 0;
  const auto data = decode_png(path, w, h);
  Mask mask(w, h);
  for (size_t i = 0; i < mask.size(); ++i) mask.pixels[i] = data[4 * i] >= 128 ? 1 : 0;
  return mask;
}

void write_png_mask(const std::string& path, const Mask& mask) {
  std::vector<uint8_t> data(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) data[i] = mask.pixels[i] ? 255 : 0;
  encode_png(path, mask.width, mask.height, 1, data);
}

ImageRGB read_pfm_rgb(const std::string& path) {
  const PfmData pfm = read_pfm(path);
  ImageRGB img(pfm.width, pfm.height);
  for (size_t i = 0; i < img.size(); ++i) {
    if (pfm.channels == 3)
      img.pixels[i] = Vec3(pfm.values[3 * i], pfm.values[3 * i + 1], pfm.values[3 * i + 2]);
    else
      img.pixels[i] = Vec3::Constant(pfm.values[i]);
  }
  return img;
}

void write_pfm_rgb(const std::string& path, const ImageRGB& image) {
  PfmData pfm{image.width, image.height, 3, std::vector<float>(image.size() * 3)};
  for (size_t i = 0; i < image.size(); ++i)
    for (int c = 0; c < 3; ++c) pfm.values[3 * i + size_t(c)] = float(image.pixels[i][c]);
  write_pfm(path, pfm);
}

ImageF read_pfm_gray(const std::string& path) {
  const PfmData pfm = read_pfm(path);
  ImageF img(pfm.width, pfm.height);
  for (size_t i = 0; i < img.size(); ++i)
    img.pixels[i] = pfm.channels == 1 ? pfm.values[i] : pfm.values[3 * i];
  return img;
}

void write_pfm_gray(const std::string& path, const ImageF& image) {
  PfmData pfm{image.width, image.height, 1, std::vector<float>(image.size())};
  for (size_t i = 0; i < image.size(); ++i) pfm.values[i] = float(image.pixels[i]);
  write_pfm(path, pfm);
}

ImageRGB to_float_precision(const ImageRGB& image) {
  ImageRGB out = image;
  for (auto& p : out.pixels)
    for (int c = 0; c < 3; ++c) p[c] = double(float(p[c]));
  return out;
}

}  // namespace urbancad
