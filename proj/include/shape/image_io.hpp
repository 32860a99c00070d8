#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "shape/core.hpp"

namespace shape {

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

/// 8-bit quantisation with round-half-to-even.
inline std::uint8_t quantize8(double v) {
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double q = std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0);
  std::fesetround(saved);
  return static_cast<std::uint8_t>(q);
}

inline std::vector<std::uint8_t> quantize8(const ImageTensor& img) {
  std::vector<std::uint8_t> out(img.size());
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::nearbyint(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  }
  std::fesetround(saved);
  return out;
}

inline ImageTensor from_bytes8(int h, int w, int c, const std::uint8_t* bytes) {
  ImageTensor img{h, w, c, std::vector<double>(static_cast<std::size_t>(h) * w * c)};
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

inline std::string encode_ppm(const ImageTensor& img) {
  validate_image(img);
  const auto bytes = quantize8(img);
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(img.height) * img.width * 3);
  for (std::size_t p = 0; p < static_cast<std::size_t>(img.height) * img.width; ++p) {
    for (int c = 0; c < 3; ++c) {
      out.push_back(static_cast<char>(bytes[p * img.channels + (img.channels == 3 ? c : 0)]));
    }
  }
  return out;
}

inline ImageTensor decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P6") throw IoError("not a binary PPM (P6) file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header");
  }
  if (w <= 0 || h <= 0) throw IoError("PPM dimensions must be positive");
  if (maxval != 255) throw IoError("only PPM maxval 255 is supported");
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw IoError("truncated PPM raster");
  return from_bytes8(h, w, 3, reinterpret_cast<const std::uint8_t*>(bytes.data() + pos));
}

// ---------------------------------------------------------------------------
// PNG (libpng simplified API)

inline std::string encode_png(const ImageTensor& img) {
  validate_image(img);
  const auto bytes = quantize8(img);
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + pi.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + pi.message);
  }
  out.resize(size);
  return out;
}

inline ImageTensor decode_png(const std::string& bytes) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) {
    throw IoError(std::string("PNG decode failed: ") + pi.message);
  }
  const bool color = (pi.format & PNG_FORMAT_FLAG_COLOR) != 0;
  pi.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;  // alpha is dropped
  std::vector<std::uint8_t> raster(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, raster.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw IoError(std::string("PNG decode failed: ") + pi.message);
  }
  return from_bytes8(static_cast<int>(pi.height), static_cast<int>(pi.width), color ? 3 : 1,
                     raster.data());
}

// ---------------------------------------------------------------------------

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(a) == std::tolower(b); });
}

/// Reads PNG or P6 PPM, detected from the file's magic bytes.
inline ImageTensor read_image(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  try {
    if (bytes.size() >= 8 && static_cast<unsigned char>(bytes[0]) == 0x89 && bytes[1] == 'P' &&
        bytes[2] == 'N' && bytes[3] == 'G') {
      return decode_png(bytes);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
  throw IoError(path + ": unsupported image format (expected PNG or P6 PPM)");
}

/// Writes PNG for *.png, PPM for *.ppm.
inline void write_image(const std::string& path, const ImageTensor& img) {
  std::string bytes;
  if (has_suffix(path, ".png")) {
    bytes = encode_png(img);
  } else if (has_suffix(path, ".ppm")) {
    bytes = encode_ppm(img);
  } else {
    throw IoError(path + ": output extension must be .png or .ppm");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace shape
