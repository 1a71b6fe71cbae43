#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "xformer/tensor.hpp"

namespace xf {

enum class ColorSpace { gray, rgb };

/// H x W x C image, channel-last, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  ColorSpace colorspace = ColorSpace::gray;
  std::vector<float> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f);

  float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }
  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels;
  }
  bool operator==(const Image&) const = default;
};

/// Reads PNG (8/16-bit, gray/RGB, alpha dropped) and binary or ASCII PGM/PPM.
/// 8-bit samples map to [0, 1] by /255.
Image image_read(const std::string& path);

/// Writes PNG, PGM or PPM by extension; values are clipped and quantised with
/// round-half-up.
void image_write(const Image& img, const std::string& path);

Image clip(Image img, float lo = 0.0f, float hi = 1.0f);

/// Top-left corner (y, x), size h x w.
Image crop(const Image& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w);

/// Piecewise-smooth test scene (gradient background, discs, rectangles, a
/// faint stripe texture) with values in [0.15, 0.85]; fully determined by seed.
Image synthetic_image(std::size_t height, std::size_t width, std::size_t channels, std::uint64_t seed);

template <typename T> Tensor<T> to_tensor(const Image& img);
template <typename T> Image to_image(const Tensor<T>& t);

}  // namespace xf
