#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace docseg {

/// 8-bit interleaved raster (1 = gray, 3 = RGB, 4 = RGBA).
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;
};

void write_png(const std::filesystem::path& path, const Image8& image);
/// Throws IoError naming the path on any failure. Palette and 16-bit inputs
/// are converted to 8-bit gray/RGB/RGBA.
Image8 read_png(const std::filesystem::path& path);

/// float32 [C, H, W] with values k / 255.
torch::Tensor image_to_tensor(const Image8& image);
/// Inverse of image_to_tensor for values in [0, 1] (rounded to nearest level).
Image8 tensor_to_image(const torch::Tensor& chw);

Image8 mask_to_image(const torch::Tensor& mask);
/// Pixels >= 128 are foreground.
torch::Tensor image_to_mask(const Image8& image);

}  // namespace docseg
