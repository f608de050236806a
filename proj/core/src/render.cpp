#include "lucid/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "lucid/error.hpp"

namespace lucid {

namespace {

void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

std::vector<std::uint8_t> encode_png(std::span<const std::uint8_t> rgb, int width, int height) {
  if (width < 1 || height < 1 || rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw ShapeError("encode_png: pixel buffer does not match " + std::to_string(width) + "x" + std::to_string(height));
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw IoError("PNG encoding failed");
  }
  png_set_write_fn(png, &out, png_append, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::vector<std::uint8_t> render_overlay(std::span<const float> image_hwc, int height, int width, int channels,
                                         const Tensor& map, float scale, int zoom) {
  if (image_hwc.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ShapeError("render_overlay: image does not match its shape");
  }
  if (map.rank() != 2) throw ShapeError("render_overlay: map must be 2-D, got " + shape_str(map.shape()));
  if (zoom < 1) throw InvalidArgument("zoom must be >= 1");
  const int mh = map.dim(0), mw = map.dim(1);
  const bool color = channels == 3;
  const int panel = width * zoom, out_w = color ? 2 * panel : panel, out_h = height * zoom;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(out_w) * out_h * 3);
  auto put = [&](int x, int y, float r, float g, float b) {
    auto* p = rgb.data() + (static_cast<std::size_t>(y) * out_w + x) * 3;
    p[0] = to_byte(r), p[1] = to_byte(g), p[2] = to_byte(b);
  };
  for (int y = 0; y < out_h; ++y) {
    const int iy = y / zoom, my = iy * mh / height;
    for (int x = 0; x < panel; ++x) {
      const int ix = x / zoom, mx = ix * mw / width;
      const float* px = image_hwc.data() + (static_cast<std::size_t>(iy) * width + ix) * channels;
      float gray = 0.0f;
      for (int c = 0; c < channels; ++c) gray = std::max(gray, px[c]);
      const float a = scale > 0 ? std::clamp(map[static_cast<std::size_t>(my) * mw + mx] / scale, 0.0f, 1.0f) : 0.0f;
      const int ox = color ? panel + x : x;
      put(ox, y, (1 - a) * gray + a, (1 - a) * gray, (1 - a) * gray);
      if (color) put(x, y, px[0], px[1], px[2]);
    }
  }
  return encode_png(rgb, out_w, out_h);
}

}  // namespace lucid
