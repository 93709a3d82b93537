#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "densegrade/tensor.hpp"

namespace densegrade {

// 8-bit RGB image, rows top to bottom, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t& at(int y, int x, int c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(y * width + x) * 3 + c]; }
};

inline Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw std::runtime_error("cannot decode '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw std::runtime_error("cannot decode '" + path.string() + "': " + msg);
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.pixels.data(), 0, nullptr))
    throw std::runtime_error("cannot write '" + path.string() + "': " + png.message);
}

// Image -> C x H x W tensor scaled to [0, 1].
template <typename S = float>
TensorT<S> image_to_tensor(const Image& img) {
  auto t = TensorT<S>::zeros({3, static_cast<std::size_t>(img.height),
                              static_cast<std::size_t>(img.width)});
  S* p = t.data();
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      p[c * plane + i] = static_cast<S>(img.pixels[i * 3 + c]) / S(255);
  return t;
}

// C x H x W tensor in [0, 1] -> 8-bit image (values clamped).
template <typename S>
Image tensor_to_image(const TensorT<S>& t) {
  if (t.shape().size() != 3 || t.dim(0) != 3)
    throw std::invalid_argument("tensor_to_image: expected 3 x H x W, got " +
                                shape_to_string(t.shape()));
  Image img;
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.pixels.resize(static_cast<std::size_t>(img.height) * img.width * 3);
  const S* p = t.data();
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      double v = std::round(static_cast<double>(p[c * plane + i]) * 255.0);
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return img;
}

// Bilinear resize of a C x H x W tensor; pixel-center convention
// (src = (dst + 0.5) * scale - 0.5) with edge clamping.
template <typename S>
TensorT<S> resize_bilinear(const TensorT<S>& src, std::size_t out_h, std::size_t out_w) {
  if (src.shape().size() != 3)
    throw std::invalid_argument("resize_bilinear: expected C x H x W, got " +
                                shape_to_string(src.shape()));
  const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
  if (H == out_h && W == out_w) return src.clone_detached();

  auto dst = TensorT<S>::zeros({C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  const S* in = src.data();
  S* out = dst.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
    const long y0 = static_cast<long>(std::floor(fy));
    const double wy = fy - static_cast<double>(y0);
    const std::size_t y0c = static_cast<std::size_t>(std::clamp<long>(y0, 0, static_cast<long>(H) - 1));
    const std::size_t y1c = static_cast<std::size_t>(std::clamp<long>(y0 + 1, 0, static_cast<long>(H) - 1));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
      const long x0 = static_cast<long>(std::floor(fx));
      const double wx = fx - static_cast<double>(x0);
      const std::size_t x0c = static_cast<std::size_t>(std::clamp<long>(x0, 0, static_cast<long>(W) - 1));
      const std::size_t x1c = static_cast<std::size_t>(std::clamp<long>(x0 + 1, 0, static_cast<long>(W) - 1));
      for (std::size_t c = 0; c < C; ++c) {
        const S* plane = in + c * H * W;
        const double top = (1.0 - wx) * plane[y0c * W + x0c] + wx * plane[y0c * W + x1c];
        const double bot = (1.0 - wx) * plane[y1c * W + x0c] + wx * plane[y1c * W + x1c];
        out[c * out_h * out_w + oy * out_w + ox] = static_cast<S>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

// Single-channel variant used for heatmap upsampling.
template <typename S>
std::vector<S> resize_bilinear_plane(const std::vector<S>& src, std::size_t h, std::size_t w,
                                     std::size_t out_h, std::size_t out_w) {
  auto t = TensorT<S>::from_vector({1, h, w}, src);
  auto r = resize_bilinear(t, out_h, out_w);
  return std::vector<S>(r.data(), r.data() + out_h * out_w);
}

}  // namespace densegrade
