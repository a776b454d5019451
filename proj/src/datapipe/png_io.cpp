#include <png.h>

#include <cmath>
#include <cstring>

#include "davit/datapipe.hpp"

namespace davit {

namespace {

PngData finish_read(png_image& img) {
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  PngData out;
  out.width = img.width;
  out.height = img.height;
  out.channels = gray ? 1 : 3;
  out.bytes.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.bytes.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw PngError("png decode failed: " + msg);
  }
  return out;
}

png_image writer_for(const PngData& png) {
  if (png.channels != 1 && png.channels != 3) throw PngError("png channels must be 1 or 3");
  if (png.bytes.size() != static_cast<size_t>(png.width * png.height * png.channels)) {
    throw PngError("png buffer size does not match its dimensions");
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(png.width);
  img.height = static_cast<png_uint_32>(png.height);
  img.format = png.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  return img;
}

uint8_t to_byte(double v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

PngData read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw PngError("cannot read png " + path.string() + ": " + img.message);
  }
  return finish_read(img);
}

PngData decode_png(std::span<const uint8_t> encoded) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, encoded.data(), encoded.size())) {
    throw PngError(std::string("cannot decode png: ") + img.message);
  }
  return finish_read(img);
}

std::vector<uint8_t> encode_png(const PngData& png) {
  png_image img = writer_for(png);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, png.bytes.data(), 0, nullptr)) {
    throw PngError(std::string("png encode failed: ") + img.message);
  }
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, png.bytes.data(), 0, nullptr)) {
    throw PngError(std::string("png encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const PngData& png) {
  png_image img = writer_for(png);
  if (!png_image_write_to_file(&img, path.c_str(), 0, png.bytes.data(), 0, nullptr)) {
    throw PngError("cannot write png " + path.string() + ": " + img.message);
  }
}

PngData image_to_png(const Image& image) {
  PngData png{image.width, image.height, 3, std::vector<uint8_t>(image.pixels.size())};
  for (size_t i = 0; i < image.pixels.size(); ++i) png.bytes[i] = to_byte(image.pixels[i]);
  return png;
}

Image image_from_png(const PngData& png) {
  Image img(png.height, png.width);
  const auto n = static_cast<size_t>(png.width * png.height);
  for (size_t p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) {
      const uint8_t v = png.channels == 1 ? png.bytes[p] : png.bytes[p * 3 + static_cast<size_t>(c)];
      img.pixels[p * 3 + static_cast<size_t>(c)] = v / 255.0;
    }
  return img;
}

PngData mask_to_png(const Mask& mask) { return {mask.width, mask.height, 1, mask.labels}; }

Mask mask_from_png(const PngData& png) {
  if (png.channels == 3) return decode_palette(png);
  Mask m(png.height, png.width);
  m.labels = png.bytes;
  for (size_t i = 0; i < m.labels.size(); ++i) {
    const uint8_t v = m.labels[i];
    if (v >= kNumClasses && v != kIgnoreLabel) {
      throw std::invalid_argument("mask value " + std::to_string(v) + " at pixel (" +
                                  std::to_string(static_cast<int64_t>(i) / png.width) + ", " +
                                  std::to_string(static_cast<int64_t>(i) % png.width) + ") is not a class index");
    }
  }
  return m;
}

}  // namespace davit
