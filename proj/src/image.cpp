#include "xformer/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

namespace xf {

Image::Image(std::size_t h, std::size_t w, std::size_t c, float fill)
    : height(h), width(w), channels(c), colorspace(c == 3 ? ColorSpace::rgb : ColorSpace::gray),
      values(h * w * c, fill) {
  if (c != 1 && c != 3) throw DimensionError("image channels must be 1 or 3, got " + std::to_string(c));
}

namespace {

std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Keeps libpng quiet; the message ends up in the thrown IoError instead.
void png_error_to_string(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

void png_ignore_warning(png_structp, png_const_charp) {}

Image read_png(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image '" + path + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("'" + path + "' is not a PNG file");
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_to_string, png_ignore_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed for '" + path + "'");
  }
  Image img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG '" + path + "': " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t c = png_get_channels(png, info);
  buffer.resize(h * w * c);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * w * c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img = Image(h, w, c);
  for (std::size_t i = 0; i < buffer.size(); ++i) img.values[i] = static_cast<float>(buffer[i]) / 255.0f;
  return img;
}

void write_png(const Image& img, const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write image '" + path + "'");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_to_string, png_ignore_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for '" + path + "'");
  }
  std::vector<png_byte> buffer(img.values.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = quantize(img.values[i]);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * img.width * img.channels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path + "': " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Next header token of a netpbm file, skipping whitespace and comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  const std::string magic = pnm_token(in);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw IoError("'" + path + "' is not a PGM/PPM file");
  }
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(pnm_token(in));
    h = std::stoul(pnm_token(in));
    maxval = std::stoul(pnm_token(in));
  } catch (const std::exception&) {
    throw IoError("corrupt PGM/PPM header in '" + path + "'");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) {
    throw IoError("corrupt PGM/PPM header in '" + path + "'");
  }
  const std::size_t c = (magic == "P3" || magic == "P6") ? 3 : 1;
  Image img(h, w, c);
  const std::size_t n = h * w * c;
  const float scale = 1.0f / static_cast<float>(maxval);
  if (magic == "P2" || magic == "P3") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string tok = pnm_token(in);
      if (tok.empty()) throw IoError("truncated image data in '" + path + "'");
      img.values[i] = static_cast<float>(std::stoul(tok)) * scale;
    }
    return img;
  }
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw IoError("truncated image data in '" + path + "'");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bytes == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
    img.values[i] = static_cast<float>(v) * scale;
  }
  return img;
}

void write_pnm(const Image& img, const std::string& path, bool color) {
  if ((img.channels == 3) != color) {
    throw IoError("'" + path + "': " + std::to_string(img.channels) + "-channel image needs " +
                  (img.channels == 3 ? ".ppm or .png" : ".pgm or .png"));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out << (color ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.values.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = quantize(img.values[i]);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace

Image image_read(const std::string& path) {
  const std::string ext = lower_extension(path);
  if (ext == "png") return read_png(path);
  if (ext == "pgm" || ext == "ppm" || ext == "pnm") return read_pnm(path);
  throw IoError("unsupported image format for '" + path + "' (expected png, pgm or ppm)");
}

void image_write(const Image& img, const std::string& path) {
  if (img.values.size() != img.height * img.width * img.channels || img.values.empty()) {
    throw IoError("cannot write malformed image to '" + path + "'");
  }
  const std::string ext = lower_extension(path);
  if (ext == "png") return write_png(img, path);
  if (ext == "pgm") return write_pnm(img, path, false);
  if (ext == "ppm") return write_pnm(img, path, true);
  throw IoError("unsupported image format for '" + path + "' (expected png, pgm or ppm)");
}

Image clip(Image img, float lo, float hi) {
  for (auto& v : img.values) v = std::clamp(v, lo, hi);
  return img;
}

Image crop(const Image& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  if (y + h > img.height || x + w > img.width || h == 0 || w == 0) {
    throw DimensionError("crop outside image bounds");
  }
  Image out(h, w, img.channels);
  out.colorspace = img.colorspace;
  for (std::size_t i = 0; i < h; ++i) {
    std::copy_n(img.values.begin() + static_cast<std::ptrdiff_t>(((y + i) * img.width + x) * img.channels),
                w * img.channels, out.values.begin() + static_cast<std::ptrdiff_t>(i * w * img.channels));
  }
  return out;
}

Image synthetic_image(std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed) {
  Image img(height, width, channels);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double h = static_cast<double>(height), w = static_cast<double>(width);

  std::vector<double> base(channels), gy(channels), gx(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    base[c] = 0.3 + 0.4 * unit(rng);
    gy[c] = 0.3 * (unit(rng) - 0.5);
    gx[c] = 0.3 * (unit(rng) - 0.5);
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        img.at(y, x, c) = static_cast<float>(base[c] + gy[c] * (y / h - 0.5) + gx[c] * (x / w - 0.5));
      }
    }
  }

  const int shapes = 3 + static_cast<int>(unit(rng) * 5.0);
  for (int s = 0; s < shapes; ++s) {
    const bool disc = unit(rng) < 0.5;
    const double cy = unit(rng) * h, cx = unit(rng) * w;
    const double ry = (0.08 + 0.25 * unit(rng)) * h, rx = (0.08 + 0.25 * unit(rng)) * w;
    std::vector<double> color(channels);
    for (auto& v : color) v = unit(rng);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const bool inside = disc ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < channels; ++c) img.at(y, x, c) = static_cast<float>(color[c]);
      }
    }
  }

  const double freq = 2.0 * std::numbers::pi * (2.0 + 6.0 * unit(rng)) / w;
  const double angle = std::numbers::pi * unit(rng);
  const double fy = freq * std::sin(angle), fx = freq * std::cos(angle);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double stripe = 0.05 * std::sin(fy * y + fx * x);
      for (std::size_t c = 0; c < channels; ++c) {
        float& v = img.at(y, x, c);
        v = static_cast<float>(0.15 + 0.7 * std::clamp(v + stripe, 0.0, 1.0));
      }
    }
  }
  return img;
}

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  return Tensor<T>(Shape{img.height, img.width, img.channels},
                   std::vector<T>(img.values.begin(), img.values.end()));
}

template <typename T>
Image to_image(const Tensor<T>& t) {
  if (t.rank() != 3) throw DimensionError("to_image: expected [H,W,C], got " + shape_str(t.shape()));
  Image img(t.extent(0), t.extent(1), t.extent(2));
  for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<float>(t[i]);
  return img;
}

template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);
template Image to_image(const Tensor<float>&);
template Image to_image(const Tensor<double>&);

}  // namespace xf
