#include "docseg/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "docseg/errors.hpp"

namespace docseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3 && image.channels != 4)
    throw IoError(path.string(), "unsupported channel count");
  if (image.data.size() != static_cast<size_t>(image.height) * image.width * image.channels)
    throw IoError(path.string(), "pixel buffer size mismatch");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError(path.string(), "cannot open for writing");

  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string(), "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path.string(), "png write failed: " + message);
  }
  png_init_io(png, file.get());
  const int color = image.channels == 1   ? PNG_COLOR_TYPE_GRAY
                    : image.channels == 3 ? PNG_COLOR_TYPE_RGB
                                          : PNG_COLOR_TYPE_RGBA;
  png_set_IHDR(png, info, image.width, image.height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(image.width) * image.channels;
  for (int y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.data.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError(path.string(), "cannot open for reading");
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw IoError(path.string(), "not a PNG file");

  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string(), "libpng initialisation failed");
  }
  Image8 image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string(), "png read failed: " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  image.width = static_cast<int>(png_get_image_width(png, info));
  image.height = static_cast<int>(png_get_image_height(png, info));
  image.channels = static_cast<int>(png_get_channels(png, info));
  const size_t stride = png_get_rowbytes(png, info);
  image.data.resize(stride * image.height);
  std::vector<png_bytep> rows(image.height);
  for (int y = 0; y < image.height; ++y) rows[y] = image.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

torch::Tensor image_to_tensor(const Image8& image) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.data.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0f).contiguous();
}

Image8 tensor_to_image(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw ShapeError("tensor_to_image: expected [C, H, W]");
  auto hwc = chw.detach().to(torch::kFloat32).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  Image8 image;
  image.channels = static_cast<int>(chw.size(0));
  image.height = static_cast<int>(chw.size(1));
  image.width = static_cast<int>(chw.size(2));
  image.data.assign(hwc.data_ptr<std::uint8_t>(), hwc.data_ptr<std::uint8_t>() + hwc.numel());
  return image;
}

Image8 mask_to_image(const torch::Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("mask_to_image: expected [H, W]");
  auto u8 = mask.to(torch::kBool).to(torch::kUInt8).mul(255).contiguous();
  Image8 image{static_cast<int>(mask.size(0)), static_cast<int>(mask.size(1)), 1, {}};
  image.data.assign(u8.data_ptr<std::uint8_t>(), u8.data_ptr<std::uint8_t>() + u8.numel());
  return image;
}

torch::Tensor image_to_mask(const Image8& image) {
  auto t = torch::from_blob(const_cast<std::uint8_t*>(image.data.data()), {image.height, image.width, image.channels},
                            torch::kUInt8);
  return t.select(2, 0).ge(128).clone();
}

}  // namespace docseg
