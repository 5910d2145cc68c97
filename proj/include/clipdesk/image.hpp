#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace clipdesk {

// Interleaved RGB raster, row-major, channel values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> rgb;

  static Image filled(std::size_t width, std::size_t height, double r, double g, double b);

  double& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

std::uint8_t quantize_channel(double value);

// 8-bit pixel block, 3 bytes per pixel in row-major order.
std::vector<std::uint8_t> pixel_bytes(const Image& image);
Image from_pixel_bytes(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& bytes);

// Round trip through 8 bits, i.e. what a reader of the PPM file sees.
Image quantized(const Image& image);

// Binary PPM (P6, maxval 255).
std::string encode_ppm(const Image& image);
Image decode_ppm(std::string_view bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Pixel block of a P6 file without converting to [0, 1].
struct RawRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};
RawRaster read_ppm_raw(const std::filesystem::path& path);
std::vector<std::uint8_t> read_ppm_pixels(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace clipdesk
