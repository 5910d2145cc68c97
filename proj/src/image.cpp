#include "clipdesk/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "clipdesk/errors.hpp"

namespace clipdesk {

namespace {

struct PpmLayout {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t offset = 0;  // first pixel byte
};

PpmLayout parse_header(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t value = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) throw FormatError("ppm: malformed header");
    return value;
  };
  if (bytes.substr(0, 2) != "P6") throw FormatError("ppm: not a binary P6 file");
  pos = 2;
  PpmLayout layout;
  layout.width = number();
  layout.height = number();
  if (number() != 255) throw FormatError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("ppm: missing separator after header");
  }
  layout.offset = pos + 1;
  const std::size_t need = layout.width * layout.height * 3;
  if (bytes.size() < layout.offset + need) throw TruncatedError("ppm: pixel block truncated");
  return layout;
}

}  // namespace

Image Image::filled(std::size_t width, std::size_t height, double r, double g, double b) {
  Image image{width, height, std::vector<double>(width * height * 3)};
  for (std::size_t i = 0; i < width * height; ++i) {
    image.rgb[i * 3] = r;
    image.rgb[i * 3 + 1] = g;
    image.rgb[i * 3 + 2] = b;
  }
  return image;
}

std::uint8_t quantize_channel(double value) {
  const double clamped = std::clamp(value, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0));
}

std::vector<std::uint8_t> pixel_bytes(const Image& image) {
  std::vector<std::uint8_t> out(image.rgb.size());
  std::transform(image.rgb.begin(), image.rgb.end(), out.begin(), quantize_channel);
  return out;
}

Image from_pixel_bytes(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != width * height * 3) throw ShapeError("pixel block does not match dimensions");
  Image image{width, height, std::vector<double>(bytes.size())};
  for (std::size_t i = 0; i < bytes.size(); ++i) image.rgb[i] = bytes[i] / 255.0;
  return image;
}

Image quantized(const Image& image) {
  return from_pixel_bytes(image.width, image.height, pixel_bytes(image));
}

std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  const auto pixels = pixel_bytes(image);
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

Image decode_ppm(std::string_view bytes) {
  const PpmLayout layout = parse_header(bytes);
  std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<std::ptrdiff_t>(layout.offset),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(
                                                       layout.offset + layout.width * layout.height * 3));
  return from_pixel_bytes(layout.width, layout.height, pixels);
}

RawRaster read_ppm_raw(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const PpmLayout layout = parse_header(bytes);
  const auto* begin = reinterpret_cast<const std::uint8_t*>(bytes.data()) + layout.offset;
  return {layout.width, layout.height, {begin, begin + layout.width * layout.height * 3}};
}

std::vector<std::uint8_t> read_ppm_pixels(const std::filesystem::path& path) {
  return read_ppm_raw(path).pixels;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_ppm(image));
}

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace clipdesk
